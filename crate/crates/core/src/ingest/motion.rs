//! Framewise displacement and volume censoring.

use nalgebra::DMatrix;

use super::{BoldMatrix, MotionParams};
use crate::error::{BbmError, Result};

pub const DEFAULT_HEAD_RADIUS_MM: f64 = 50.0;

/// Lagged framewise displacement.
///
/// `FD_t = sum_k |p_{t,k} - p_{t-lag,k}|`, with rotations (columns 3..6)
/// converted to arc length on a sphere of `head_radius_mm`. The first `lag`
/// entries are zero.
pub fn compute_fd(m: &MotionParams, head_radius_mm: f64, lag: usize) -> Result<Vec<f64>> {
    let p = m.params();
    let n = p.nrows();
    if lag == 0 || lag >= n {
        return Err(BbmError::InvalidArgument(format!(
            "lag must satisfy 1 <= lag < {n}, got {lag}"
        )));
    }
    if !(head_radius_mm > 0.0 && head_radius_mm.is_finite()) {
        return Err(BbmError::InvalidArgument(format!(
            "head radius must be positive, got {head_radius_mm}"
        )));
    }
    let mut fd = vec![0.0; n];
    for t in lag..n {
        let mut s = 0.0;
        for k in 0..6 {
            let d = (p[(t, k)] - p[(t - lag, k)]).abs();
            s += if k < 3 { d } else { d * head_radius_mm };
        }
        fd[t] = s;
    }
    Ok(fd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CensorConfig {
    pub threshold_mm: f64,
    pub drop_initial: usize,
    pub min_duration_s: f64,
}

impl Default for CensorConfig {
    fn default() -> Self {
        CensorConfig {
            threshold_mm: 0.5,
            drop_initial: 15,
            min_duration_s: 600.0,
        }
    }
}

/// Drops the first `drop_initial` raw volumes and any volume whose FD exceeds
/// the threshold. `fd` is indexed by raw volume, so censoring an already
/// censored matrix with the same inputs is a no-op.
pub fn censor(b: &BoldMatrix, fd: &[f64], cfg: &CensorConfig) -> Result<BoldMatrix> {
    let mask = b.kept_mask();
    if fd.len() != mask.len() {
        return Err(BbmError::DimensionMismatch(format!(
            "FD has {} entries but the raw scan has {} volumes",
            fd.len(),
            mask.len()
        )));
    }
    if !(cfg.threshold_mm > 0.0) {
        return Err(BbmError::InvalidArgument(format!(
            "FD threshold must be positive, got {}",
            cfg.threshold_mm
        )));
    }
    if let Some(i) = fd.iter().position(|x| !x.is_finite()) {
        return Err(BbmError::NonFinite { row: i, col: 0 });
    }

    let mut new_mask = vec![false; mask.len()];
    let mut rows = Vec::with_capacity(b.t());
    let mut row = 0usize;
    for (t, &kept) in mask.iter().enumerate() {
        if !kept {
            continue;
        }
        if t >= cfg.drop_initial && fd[t] <= cfg.threshold_mm {
            new_mask[t] = true;
            rows.push(row);
        }
        row += 1;
    }

    let retained = rows.len() as f64 * b.tr_seconds();
    if rows.len() < 2 || retained < cfg.min_duration_s {
        return Err(BbmError::InsufficientDuration {
            retained_seconds: retained,
            required_seconds: cfg.min_duration_s,
        });
    }
    let data = b.data();
    let kept = DMatrix::from_fn(rows.len(), data.ncols(), |i, j| data[(rows[i], j)]);
    Ok(BoldMatrix::with_mask(kept, b.tr_seconds(), new_mask)?
        .with_ids(b.subject_id.clone(), b.session_id.clone()))
}
