//! Overlap and reliability measures for network maps.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{BbmError, Result};
use crate::ingest::Template;
use crate::linalg::{mean, pearson, sample_sd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapSource {
    Template,
    PriorMean,
    Subject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    /// Symmetric Q x Q Dice coefficients.
    pub dice: DMatrix<f64>,
    /// None when masks came straight from parcellation labels.
    pub threshold_z: Option<f64>,
    pub source: OverlapSource,
}

/// Flags locations whose within-network z-score has magnitude at least `z`.
pub fn threshold_zmap(maps: &DMatrix<f64>, z: f64) -> Result<DMatrix<bool>> {
    let (q, v) = maps.shape();
    let mut out = DMatrix::from_element(q, v, false);
    for k in 0..q {
        let row: Vec<f64> = maps.row(k).iter().copied().collect();
        let (m, sd) = (mean(&row), sample_sd(&row));
        if !(sd > 0.0) {
            return Err(BbmError::ZeroVariance(format!("map {k} is constant")));
        }
        for (j, x) in row.iter().enumerate() {
            out[(k, j)] = ((x - m) / sd).abs() >= z;
        }
    }
    Ok(out)
}

/// `2|a & b| / (|a| + |b|)`, or 0 when both masks are empty.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "dice needs equal-length masks");
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        0.0
    } else {
        2.0 * both as f64 / total as f64
    }
}

/// Per-network Pearson correlation over locations.
pub fn reliability(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.shape() != y.shape() {
        return Err(BbmError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    (0..x.nrows())
        .map(|k| {
            let a: Vec<f64> = x.row(k).iter().copied().collect();
            let b: Vec<f64> = y.row(k).iter().copied().collect();
            pearson(&a, &b).ok_or_else(|| BbmError::ZeroVariance(format!("network {k} is constant")))
        })
        .collect()
}

/// Pairwise Dice between the rows of a Q x V mask matrix.
pub fn dice_matrix(masks: &DMatrix<bool>) -> DMatrix<f64> {
    let q = masks.nrows();
    let rows: Vec<Vec<bool>> = (0..q).map(|k| masks.row(k).iter().copied().collect()).collect();
    let mut d = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in i..q {
            let x = dice(&rows[i], &rows[j]);
            d[(i, j)] = x;
            d[(j, i)] = x;
        }
    }
    d
}

/// One mask row per parcel from hard labels.
pub fn parcellation_masks(labels: &[usize], q: usize) -> DMatrix<bool> {
    DMatrix::from_fn(q, labels.len(), |k, j| labels[j] == k + 1)
}

impl OverlapMatrix {
    pub fn from_maps(maps: &DMatrix<f64>, z: f64, source: OverlapSource) -> Result<Self> {
        Ok(OverlapMatrix {
            dice: dice_matrix(&threshold_zmap(maps, z)?),
            threshold_z: Some(z),
            source,
        })
    }

    /// Parcellations use their labels directly; continuous maps are thresholded at `z`.
    pub fn from_template(t: &Template, z: f64) -> Result<Self> {
        match t {
            Template::Parcellation { labels, q, .. } => Ok(OverlapMatrix {
                dice: dice_matrix(&parcellation_masks(labels, *q)),
                threshold_z: None,
                source: OverlapSource::Template,
            }),
            Template::ContinuousMaps { maps, .. } => Self::from_maps(maps, z, OverlapSource::Template),
        }
    }

    /// Header row of network names, then one row per network.
    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        let q = self.dice.nrows();
        let mut buf = Vec::new();
        let header: Vec<&str> = std::iter::once("network")
            .chain(names.iter().map(String::as_str))
            .collect();
        writeln!(buf, "{}", header.join(",")).expect("write to Vec");
        for (i, name) in names.iter().enumerate().take(q) {
            let cells: Vec<String> = (0..q).map(|j| format!("{}", self.dice[(i, j)])).collect();
            writeln!(buf, "{name},{}", cells.join(",")).expect("write to Vec");
        }
        std::fs::write(path, buf).map_err(|e| BbmError::io(path, e))
    }
}
