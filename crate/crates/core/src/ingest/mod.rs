//! Data containers and deterministic preprocessing of BOLD matrices.

mod format;
mod motion;
mod preprocess;

pub use format::{
    load_bold, load_motion, load_sidecar, load_template, read_bbm, read_csv_matrix, save_bold, sidecar_path,
    write_bbm, write_sidecar, BoldFormat, Sidecar, BBM_MAGIC, BBM_VERSION,
};
pub use motion::{censor, compute_fd, CensorConfig, DEFAULT_HEAD_RADIUS_MM};
pub use preprocess::{preprocess, split_pseudo_sessions, Normalization, ScaleMode};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{BbmError, Result};

/// A T x V time-by-location data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldMatrix {
    data: DMatrix<f64>,
    tr_seconds: f64,
    kept_mask: Vec<bool>,
    pub subject_id: String,
    pub session_id: String,
}

impl BoldMatrix {
    /// Wraps a raw matrix; every volume is marked as retained.
    pub fn new(data: DMatrix<f64>, tr_seconds: f64) -> Result<Self> {
        let t = data.nrows();
        Self::with_mask(data, tr_seconds, vec![true; t])
    }

    pub fn with_mask(data: DMatrix<f64>, tr_seconds: f64, kept_mask: Vec<bool>) -> Result<Self> {
        let (t, v) = data.shape();
        if t < 2 || v < 2 {
            return Err(BbmError::DimensionMismatch(format!(
                "BOLD matrix must be at least 2 x 2, got {t} x {v}"
            )));
        }
        if !(tr_seconds > 0.0 && tr_seconds.is_finite()) {
            return Err(BbmError::InvalidArgument(format!(
                "TR must be positive, got {tr_seconds}"
            )));
        }
        check_finite(&data)?;
        let kept = kept_mask.iter().filter(|&&k| k).count();
        if kept != t {
            return Err(BbmError::DimensionMismatch(format!(
                "kept_mask marks {kept} volumes but data has {t} rows"
            )));
        }
        Ok(BoldMatrix {
            data,
            tr_seconds,
            kept_mask,
            subject_id: String::new(),
            session_id: String::new(),
        })
    }

    pub fn with_ids(mut self, subject: impl Into<String>, session: impl Into<String>) -> Self {
        self.subject_id = subject.into();
        self.session_id = session.into();
        self
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn tr_seconds(&self) -> f64 {
        self.tr_seconds
    }

    pub fn kept_mask(&self) -> &[bool] {
        &self.kept_mask
    }

    /// Retained time points.
    pub fn t(&self) -> usize {
        self.data.nrows()
    }

    pub fn v(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.t() as f64 * self.tr_seconds
    }

    /// Same metadata, new data with the same number of rows.
    pub(crate) fn replace_data(&self, data: DMatrix<f64>) -> Self {
        debug_assert_eq!(data.nrows(), self.t());
        BoldMatrix {
            data,
            tr_seconds: self.tr_seconds,
            kept_mask: self.kept_mask.clone(),
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
        }
    }
}

pub(crate) fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    // Report the first offender in row-major order.
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if !m[(r, c)].is_finite() {
                return Err(BbmError::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Parcellation,
    ContinuousMaps,
}

/// Group-level definition of the Q networks.
#[derive(Debug, Clone, PartialEq)]
pub enum Template {
    /// Hard labels per location in `0..=Q`; 0 marks unassigned locations.
    Parcellation {
        labels: Vec<usize>,
        q: usize,
        network_names: Vec<String>,
    },
    /// Q x V continuous maps.
    ContinuousMaps {
        maps: DMatrix<f64>,
        network_names: Vec<String>,
    },
}

fn default_names(q: usize) -> Vec<String> {
    (1..=q).map(|i| format!("network{i}")).collect()
}

impl Template {
    pub fn parcellation(labels: Vec<usize>, names: Option<Vec<String>>) -> Result<Self> {
        let q = labels.iter().copied().max().unwrap_or(0);
        if q == 0 {
            return Err(BbmError::InvalidArgument(
                "parcellation has no labelled locations".into(),
            ));
        }
        let mut counts = vec![0usize; q + 1];
        for &l in &labels {
            counts[l] += 1;
        }
        if let Some(empty) = (1..=q).find(|&k| counts[k] == 0) {
            return Err(BbmError::EmptyParcel(empty));
        }
        let network_names = names.unwrap_or_else(|| default_names(q));
        if network_names.len() != q {
            return Err(BbmError::DimensionMismatch(format!(
                "{} network names for {q} parcels",
                network_names.len()
            )));
        }
        Ok(Template::Parcellation {
            labels,
            q,
            network_names,
        })
    }

    pub fn continuous(maps: DMatrix<f64>, names: Option<Vec<String>>) -> Result<Self> {
        check_finite(&maps)?;
        if let Some(r) = (0..maps.nrows()).find(|&r| maps.row(r).iter().all(|&x| x == 0.0)) {
            return Err(BbmError::InvalidArgument(format!("template map {r} is all zero")));
        }
        let q = maps.nrows();
        let network_names = names.unwrap_or_else(|| default_names(q));
        if network_names.len() != q {
            return Err(BbmError::DimensionMismatch(format!(
                "{} network names for {q} maps",
                network_names.len()
            )));
        }
        Ok(Template::ContinuousMaps { maps, network_names })
    }

    pub fn kind(&self) -> TemplateKind {
        match self {
            Template::Parcellation { .. } => TemplateKind::Parcellation,
            Template::ContinuousMaps { .. } => TemplateKind::ContinuousMaps,
        }
    }

    pub fn q(&self) -> usize {
        match self {
            Template::Parcellation { q, .. } => *q,
            Template::ContinuousMaps { maps, .. } => maps.nrows(),
        }
    }

    pub fn v(&self) -> usize {
        match self {
            Template::Parcellation { labels, .. } => labels.len(),
            Template::ContinuousMaps { maps, .. } => maps.ncols(),
        }
    }

    pub fn network_names(&self) -> &[String] {
        match self {
            Template::Parcellation { network_names, .. } | Template::ContinuousMaps { network_names, .. } => {
                network_names
            }
        }
    }
}

/// Rigid-body motion estimates: 3 translations (mm) then 3 rotations (radians).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams {
    params: DMatrix<f64>,
}

impl MotionParams {
    pub fn new(params: DMatrix<f64>) -> Result<Self> {
        if params.ncols() != 6 {
            return Err(BbmError::DimensionMismatch(format!(
                "motion parameters need 6 columns, got {}",
                params.ncols()
            )));
        }
        check_finite(&params)?;
        Ok(MotionParams { params })
    }

    pub fn params(&self) -> &DMatrix<f64> {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.params.nrows() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bold_rejects_non_finite_with_location() {
        let mut m = DMatrix::zeros(3, 3);
        m[(1, 2)] = f64::NAN;
        match BoldMatrix::new(m, 1.0) {
            Err(BbmError::NonFinite { row: 1, col: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parcellation_requires_every_label() {
        assert!(matches!(
            Template::parcellation(vec![1, 1, 3, 0], None),
            Err(BbmError::EmptyParcel(2))
        ));
        let t = Template::parcellation(vec![0, 1, 2, 2], None).unwrap();
        assert_eq!(t.q(), 2);
        assert_eq!(t.v(), 4);
    }

    #[test]
    fn continuous_rejects_zero_row() {
        let maps = DMatrix::from_row_slice(2, 3, &[1., 0., 0., 0., 0., 0.]);
        assert!(Template::continuous(maps, None).is_err());
    }
}
