//! Spatial topography prior from test-retest dual-regression maps.
//!
//! Each (network, location) cell is treated with a two-level measurement
//! error model: session estimate `x_ij = z_i + e_ij`, subject truth
//! `z_i ~ (mu, sigma^2)`, noise `e_ij ~ (0, sigma_e^2)`. With two sessions per
//! subject the method-of-moments estimates are
//!
//! ```text
//! sigma_e^2 = (1/n) sum_i (x_i1 - x_i2)^2 / 2
//! sigma^2   = var(xbar_i) - sigma_e^2 / 2
//! ```
//!
//! and the prior mean is the grand mean over all subjects and sessions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dualreg::DualRegResult;
use crate::error::{BbmError, Result};
use crate::ingest::Normalization;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialPrior {
    /// Q x V population mean engagement.
    pub mean: DMatrix<f64>,
    /// Q x V between-subject variance, nonnegative.
    pub var: DMatrix<f64>,
    pub n_subjects: usize,
    pub provenance: Provenance,
}

/// Where a prior came from and how its training data were normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub template_name: String,
    #[serde(flatten)]
    pub normalization: Normalization,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            template_name: "unnamed".into(),
            normalization: Normalization::default(),
        }
    }
}

impl SpatialPrior {
    pub fn q(&self) -> usize {
        self.mean.nrows()
    }

    pub fn v(&self) -> usize {
        self.mean.ncols()
    }

    /// Validates shapes and nonnegativity.
    pub fn new(
        mean: DMatrix<f64>,
        var: DMatrix<f64>,
        n_subjects: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(BbmError::DimensionMismatch(format!(
                "prior mean is {:?} but variance is {:?}",
                mean.shape(),
                var.shape()
            )));
        }
        crate::ingest::check_finite(&mean)?;
        if let Some(i) = var.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(BbmError::InvalidArgument(format!(
                "prior variance entry {i} is {} (must be finite and >= 0)",
                var[i]
            )));
        }
        Ok(SpatialPrior {
            mean,
            var,
            n_subjects,
            provenance,
        })
    }
}

/// Unclamped moment estimates for every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceDecomposition {
    pub grand_mean: DMatrix<f64>,
    /// Between-subject variance before clamping; may be negative.
    pub between_var: DMatrix<f64>,
    pub noise_var: DMatrix<f64>,
    pub n_subjects: usize,
}

/// Method-of-moments decomposition of paired session maps (each Q x V).
pub fn decompose_sessions(pairs: &[(&DMatrix<f64>, &DMatrix<f64>)]) -> Result<VarianceDecomposition> {
    let n = pairs.len();
    if n < 2 {
        return Err(BbmError::TooFewSubjects(n));
    }
    let shape = pairs[0].0.shape();
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.shape() != shape || b.shape() != shape {
            return Err(BbmError::DimensionMismatch(format!(
                "subject {i} maps are {:?}/{:?}, expected {shape:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    let nf = n as f64;
    let mut grand_mean = DMatrix::zeros(shape.0, shape.1);
    let mut noise_var = DMatrix::zeros(shape.0, shape.1);
    for (a, b) in pairs {
        grand_mean += *a + *b;
        let d = *a - *b;
        noise_var += d.component_mul(&d) * 0.5;
    }
    grand_mean /= 2.0 * nf;
    noise_var /= nf;

    let mut ss = DMatrix::zeros(shape.0, shape.1);
    for (a, b) in pairs {
        let dev = (*a + *b) * 0.5 - &grand_mean;
        ss += dev.component_mul(&dev);
    }
    let var_of_means = ss / (nf - 1.0);
    let between_var = var_of_means - &noise_var * 0.5;
    Ok(VarianceDecomposition {
        grand_mean,
        between_var,
        noise_var,
        n_subjects: n,
    })
}

/// Prior mean and clamped between-subject variance from per-subject session pairs.
pub fn estimate_spatial_prior(
    sessions: &[(DualRegResult, DualRegResult)],
    provenance: Provenance,
) -> Result<SpatialPrior> {
    let pairs: Vec<_> = sessions.iter().map(|(a, b)| (&a.maps, &b.maps)).collect();
    let dec = decompose_sessions(&pairs)?;
    let prior = SpatialPrior {
        mean: dec.grand_mean,
        var: dec.between_var,
        n_subjects: dec.n_subjects,
        provenance,
    };
    Ok(clamp_and_inflate(prior, 0.0))
}

/// `var := max(var, var_floor)`.
pub fn clamp_and_inflate(mut p: SpatialPrior, var_floor: f64) -> SpatialPrior {
    p.var.apply(|x| *x = x.max(var_floor));
    p
}
