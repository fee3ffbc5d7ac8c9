//! Significant-engagement maps from posterior moments.
//!
//! For network `q` and effect size `z`, the threshold is
//! `u_q(z) = mean_v(s0_q) + z * sd_v(s0_q)`, computed over the locations of
//! the prior mean map. A location is flagged when the one-sided posterior
//! test `(s_mean - u) / sqrt(s_var) > Phi^-1(1 - alpha')` passes, with
//! `alpha' = alpha / (Q * V)` under Bonferroni.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{BbmError, Result};
use crate::fit::SubjectFit;
use crate::linalg::{mean, sample_sd};
use crate::prior_spatial::SpatialPrior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    Bonferroni,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngagementResult {
    pub zs: Vec<f64>,
    /// One Q x V mask per entry of `zs`.
    pub masks: Vec<DMatrix<bool>>,
    /// `thresholds[k][q]` is `u_q(zs[k])`.
    pub thresholds: Vec<Vec<f64>>,
    pub alpha: f64,
    pub correction: Correction,
    /// Critical value of the standardized exceedance.
    pub critical_z: f64,
}

impl EngagementResult {
    /// Flagged locations per network for threshold index `k`.
    pub fn counts(&self, k: usize) -> Vec<usize> {
        let m = &self.masks[k];
        (0..m.nrows())
            .map(|q| m.row(q).iter().filter(|&&b| b).count())
            .collect()
    }
}

/// Upper-tail critical value for a one-sided level-`alpha` test.
pub fn critical_value(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha)
}

fn is_engaged(s_mean: f64, s_var: f64, u: f64, crit: f64) -> bool {
    if s_var > 0.0 {
        (s_mean - u) / s_var.sqrt() > crit
    } else {
        s_mean > u
    }
}

/// Posterior-moment engagement tests for each effect size in `zs`.
pub fn engagements(
    fit: &SubjectFit,
    prior: &SpatialPrior,
    zs: &[f64],
    alpha: f64,
    correction: Correction,
) -> Result<EngagementResult> {
    engagement_masks(&fit.s_mean, &fit.s_var, &prior.mean, zs, alpha, correction)
}

/// [`engagements`] on raw Q x V moment matrices.
pub fn engagement_masks(
    s_mean: &DMatrix<f64>,
    s_var: &DMatrix<f64>,
    prior_mean: &DMatrix<f64>,
    zs: &[f64],
    alpha: f64,
    correction: Correction,
) -> Result<EngagementResult> {
    if s_mean.shape() != prior_mean.shape() || s_var.shape() != prior_mean.shape() {
        return Err(BbmError::DimensionMismatch(format!(
            "posterior is {:?}/{:?}, prior is {:?}",
            s_mean.shape(),
            s_var.shape(),
            prior_mean.shape()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BbmError::InvalidArgument(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    if zs.iter().any(|z| !(*z >= 0.0)) || zs.windows(2).any(|w| w[0] > w[1]) {
        return Err(BbmError::InvalidArgument(
            "z values must be >= 0 and sorted ascending".into(),
        ));
    }
    let (q, v) = s_mean.shape();
    let level = match correction {
        Correction::Bonferroni => alpha / (q * v) as f64,
        Correction::None => alpha,
    };
    let crit = critical_value(level);

    let stats: Vec<(f64, f64)> = (0..q)
        .map(|k| {
            let row: Vec<f64> = prior_mean.row(k).iter().copied().collect();
            (mean(&row), sample_sd(&row))
        })
        .collect();

    let mut masks = Vec::with_capacity(zs.len());
    let mut thresholds = Vec::with_capacity(zs.len());
    for &z in zs {
        let u: Vec<f64> = stats.iter().map(|(m, sd)| m + z * sd).collect();
        let cols: Vec<Vec<bool>> = (0..v)
            .into_par_iter()
            .map(|j| {
                (0..q)
                    .map(|k| is_engaged(s_mean[(k, j)], s_var[(k, j)], u[k], crit))
                    .collect()
            })
            .collect();
        masks.push(DMatrix::from_fn(q, v, |k, j| cols[j][k]));
        thresholds.push(u);
    }
    Ok(EngagementResult {
        zs: zs.to_vec(),
        masks,
        thresholds,
        alpha,
        correction,
        critical_z: crit,
    })
}
