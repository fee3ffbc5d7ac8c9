//! On-disk matrix formats.
//!
//! bbm-binary layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BBMP"
//! 4       4     u32 version (1)
//! 8       8     u64 rows
//! 16      8     u64 cols
//! 24      8*r*c f64 payload, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{check_finite, BoldMatrix, MotionParams, Template, TemplateKind};
use crate::error::{BbmError, Result};

pub const BBM_MAGIC: &[u8; 4] = b"BBMP";
pub const BBM_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoldFormat {
    BbmBinary,
    Csv,
}

impl BoldFormat {
    /// `.csv` means CSV; everything else is treated as bbm-binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => BoldFormat::Csv,
            _ => BoldFormat::BbmBinary,
        }
    }
}

pub fn encode_bbm(m: &DMatrix<f64>) -> Vec<u8> {
    let (r, c) = m.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * r * c);
    buf.extend_from_slice(BBM_MAGIC);
    buf.extend_from_slice(&BBM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(r as u64).to_le_bytes());
    buf.extend_from_slice(&(c as u64).to_le_bytes());
    for i in 0..r {
        for j in 0..c {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    buf
}

pub fn decode_bbm(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(BbmError::Malformed(format!(
            "bbm header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != BBM_MAGIC {
        return Err(BbmError::Malformed("bad magic, expected BBMP".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BBM_VERSION {
        return Err(BbmError::Malformed(format!("unsupported bbm version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| BbmError::Malformed("header dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(BbmError::DimensionMismatch(format!(
            "header says {rows} x {cols} ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_bbm(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, encode_bbm(m)).map_err(|e| BbmError::io(path, e))
}

pub fn read_bbm(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| BbmError::io(path, e))?;
    decode_bbm(&bytes)
}

/// Numeric CSV; a first row that does not parse as numbers is taken as a header.
pub fn read_csv_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| BbmError::Malformed(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| BbmError::Malformed(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(vals) => rows.push(vals),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(BbmError::Malformed(format!("{}: row {i}: {e}", path.display()))),
        }
    }
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.is_empty() || ncols == 0 {
        return Err(BbmError::Malformed(format!("{}: no data rows", path.display())));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(BbmError::DimensionMismatch(format!(
            "{}: row {bad} has {} fields, expected {ncols}",
            path.display(),
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// JSON metadata stored next to a data file (`x.bbm` -> `x.json`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tr_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network_names: Option<Vec<String>>,
}

pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("json")
}

pub fn load_sidecar(data_path: &Path) -> Result<Option<Sidecar>> {
    let p = sidecar_path(data_path);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(|e| BbmError::io(&p, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| BbmError::Malformed(format!("{}: {e}", p.display())))
}

pub fn write_sidecar(data_path: &Path, sidecar: &Sidecar) -> Result<()> {
    let p = sidecar_path(data_path);
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(&p, text).map_err(|e| BbmError::io(&p, e))
}

/// TR used when neither a sidecar nor the caller provides one.
const FALLBACK_TR_SECONDS: f64 = 1.0;

/// Loads a BOLD matrix; TR and ids come from the JSON sidecar when present.
pub fn load_bold(path: &Path, format: BoldFormat) -> Result<BoldMatrix> {
    let data = match format {
        BoldFormat::BbmBinary => read_bbm(path)?,
        BoldFormat::Csv => read_csv_matrix(path)?,
    };
    let sidecar = load_sidecar(path)?.unwrap_or_default();
    let tr = sidecar.tr_seconds.unwrap_or_else(|| {
        log::warn!(
            "{}: no tr_seconds in sidecar, assuming {FALLBACK_TR_SECONDS} s",
            path.display()
        );
        FALLBACK_TR_SECONDS
    });
    Ok(BoldMatrix::new(data, tr)?.with_ids(sidecar.subject_id, sidecar.session_id))
}

/// Writes the data as bbm-binary plus a sidecar carrying TR and ids.
pub fn save_bold(path: &Path, b: &BoldMatrix) -> Result<()> {
    write_bbm(path, b.data())?;
    write_sidecar(
        path,
        &Sidecar {
            tr_seconds: Some(b.tr_seconds()),
            subject_id: b.subject_id.clone(),
            session_id: b.session_id.clone(),
            network_names: None,
        },
    )
}

/// Continuous maps are a Q x V bbm-binary; parcellations a single-column integer CSV.
pub fn load_template(path: &Path, kind: TemplateKind) -> Result<Template> {
    let names = load_sidecar(path)?.and_then(|s| s.network_names);
    match kind {
        TemplateKind::ContinuousMaps => Template::continuous(read_bbm(path)?, names),
        TemplateKind::Parcellation => {
            let m = read_csv_matrix(path)?;
            if m.ncols() != 1 {
                return Err(BbmError::Malformed(format!(
                    "{}: parcellation CSV must have one column, found {}",
                    path.display(),
                    m.ncols()
                )));
            }
            let labels = m
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if x >= 0.0 && x.fract() == 0.0 {
                        Ok(x as usize)
                    } else {
                        Err(BbmError::Malformed(format!(
                            "{}: label {x} at row {i} is not a non-negative integer",
                            path.display()
                        )))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Template::parcellation(labels, names)
        }
    }
}

pub fn load_motion(path: &Path) -> Result<MotionParams> {
    let m = match BoldFormat::from_path(path) {
        BoldFormat::Csv => read_csv_matrix(path)?,
        BoldFormat::BbmBinary => read_bbm(path)?,
    };
    check_finite(&m)?;
    MotionParams::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    #[test]
    fn csv_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let mut f = fs::File::create(&p).unwrap();
        writeln!(f, "a,b,c\n1,2,3\n4,5,6\n7,8,9\n10,11,12.5").unwrap();
        let b = load_bold(&p, BoldFormat::Csv).unwrap();
        assert_eq!((b.t(), b.v()), (4, 3));
        assert_eq!(b.data()[(3, 2)], 12.5);
        assert!(b.kept_mask().iter().all(|&k| k));

        let p2 = dir.path().join("b.csv");
        fs::write(&p2, "1,2,3\n4,5,6\n7,8,9\n10,11,12\n").unwrap();
        let b2 = load_bold(&p2, BoldFormat::Csv).unwrap();
        assert_eq!((b2.t(), b2.v()), (4, 3));
    }

    #[test]
    fn csv_non_finite_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "1,2\n3,inf\n").unwrap();
        assert!(matches!(
            load_bold(&p, BoldFormat::Csv),
            Err(BbmError::NonFinite { row: 1, col: 1 })
        ));
    }

    #[test]
    fn binary_100_by_500() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bbm");
        let m = DMatrix::from_fn(100, 500, |i, j| (i * 500 + j) as f64 * 0.5);
        write_bbm(&p, &m).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 24 + 50_000 * 8);
        let b = load_bold(&p, BoldFormat::BbmBinary).unwrap();
        assert_eq!((b.t(), b.v()), (100, 500));
        assert_eq!(b.data(), &m);
    }

    #[test]
    fn truncated_payload_is_dimension_mismatch() {
        let m = DMatrix::from_element(3, 4, 1.0);
        let mut bytes = encode_bbm(&m);
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(decode_bbm(&bytes), Err(BbmError::DimensionMismatch(_))));
        let mut bad = encode_bbm(&m);
        bad[0] = b'X';
        assert!(matches!(decode_bbm(&bad), Err(BbmError::Malformed(_))));
    }

    #[test]
    fn parcellation_csv_template() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        fs::write(&p, "label\n1\n1\n2\n0\n2\n").unwrap();
        let t = load_template(&p, TemplateKind::Parcellation).unwrap();
        assert_eq!(t.q(), 2);
        assert_eq!(t.v(), 5);
    }

    proptest! {
        #[test]
        fn bbm_round_trip_is_bit_exact(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in proptest::collection::vec(any::<u64>(), 36),
        ) {
            let m = DMatrix::from_fn(rows, cols, |i, j| f64::from_bits(seed[i * 6 + j]));
            let back = decode_bbm(&encode_bbm(&m)).unwrap();
            for (a, b) in m.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
