//! Population functional-connectivity priors.
//!
//! Two priors are built from the training sessions' correlation matrices:
//!
//! * inverse-Wishart, with the scale fixed so its mean equals the empirical
//!   mean, and the degrees of freedom set as large as possible while keeping
//!   every off-diagonal element-wise variance at or above the population
//!   variance;
//! * a permuted-Cholesky prior, which stores Gaussian statistics of the
//!   Cholesky factors of the training correlations under several network
//!   orderings and samples by drawing an ordering, drawing the factor elements
//!   jointly, and mapping back to a unit-diagonal matrix.
//!
//! Factor elements are drawn with their full covariance. Independent draws
//! ignore the unit-norm coupling within each factor row and inflate every
//! element-wise SD towards a common level, which erases the variance pattern
//! the prior is meant to carry.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BbmError, Result};
use crate::linalg::{
    column_correlation, from_lower_triangle, lower_triangle, permute_symmetric, repair_spd, spd_inverse,
    symmetrize, to_unit_diagonal, unpermute_symmetric, SPD_EIGEN_FLOOR,
};
use crate::rng::stream;

/// Width of the degrees-of-freedom search above `Q + 4`.
pub const IW_NU_SEARCH_WIDTH: f64 = 1e6;
const IW_NU_REL_TOL: f64 = 1e-6;
pub const DEFAULT_PERMUTATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcKind {
    InverseWishart,
    Cholesky,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IwParams {
    pub nu: f64,
    pub psi: DMatrix<f64>,
}

impl IwParams {
    pub fn q(&self) -> usize {
        self.psi.nrows()
    }

    pub fn mean(&self) -> DMatrix<f64> {
        &self.psi / (self.nu - self.q() as f64 - 1.0)
    }

    pub fn elementwise_var(&self) -> DMatrix<f64> {
        iw_elementwise_var(&self.psi, self.nu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyStats {
    /// Orderings of `0..Q`; the first is the identity.
    pub permutations: Vec<Vec<usize>>,
    /// P x Q(Q+1)/2 element means of the permuted Cholesky factors (row-major lower triangle).
    pub mean: DMatrix<f64>,
    /// Same layout, element variances.
    pub var: DMatrix<f64>,
    /// Per ordering, a square root `B` of the element covariance (`B B^T = Cov`).
    pub scale: Vec<DMatrix<f64>>,
}

impl CholeskyStats {
    pub fn q(&self) -> usize {
        self.permutations[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcPrior {
    /// Element-wise mean of training correlations, unit diagonal.
    pub emp_mean: DMatrix<f64>,
    /// Element-wise sample variance across training sessions.
    pub emp_var: DMatrix<f64>,
    pub n_sessions: usize,
    pub iw: Option<IwParams>,
    pub cholesky: Option<CholeskyStats>,
}

impl FcPrior {
    pub fn q(&self) -> usize {
        self.emp_mean.nrows()
    }

    pub fn kinds(&self) -> Vec<FcKind> {
        let mut k = Vec::new();
        if self.iw.is_some() {
            k.push(FcKind::InverseWishart);
        }
        if self.cholesky.is_some() {
            k.push(FcKind::Cholesky);
        }
        k
    }

    /// Builds the requested prior kinds from training time courses (each T x Q).
    pub fn estimate(
        timecourses: &[DMatrix<f64>],
        kinds: &[FcKind],
        permutations: usize,
        seed: u64,
    ) -> Result<Self> {
        let corrs = session_correlations(timecourses)?;
        let (emp_mean, emp_var) = fc_moments(&corrs)?;
        let iw = if kinds.contains(&FcKind::InverseWishart) {
            Some(fit_iw(&emp_mean, &emp_var)?)
        } else {
            None
        };
        let cholesky = if kinds.contains(&FcKind::Cholesky) {
            Some(build_cholesky_prior(&corrs, permutations, seed)?)
        } else {
            None
        };
        Ok(FcPrior {
            emp_mean,
            emp_var,
            n_sessions: corrs.len(),
            iw,
            cholesky,
        })
    }
}

pub fn session_correlations(timecourses: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    timecourses
        .iter()
        .enumerate()
        .map(|(i, tc)| {
            if tc.nrows() <= tc.ncols() {
                return Err(BbmError::InsufficientTimepoints {
                    t: tc.nrows(),
                    q: tc.ncols(),
                });
            }
            column_correlation(tc).map_err(|e| match e {
                BbmError::ZeroVariance(m) => BbmError::ZeroVariance(format!("session {i}: {m}")),
                other => other,
            })
        })
        .collect()
}

/// Element-wise mean and sample variance of correlation matrices.
pub fn fc_moments(corrs: &[DMatrix<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = corrs.len();
    if n < 2 {
        return Err(BbmError::InvalidArgument(format!(
            "need >= 2 training sessions for FC statistics, got {n}"
        )));
    }
    let q = corrs[0].nrows();
    if corrs.iter().any(|c| c.shape() != (q, q)) {
        return Err(BbmError::DimensionMismatch(
            "correlation matrices differ in size".into(),
        ));
    }
    let mut mean = DMatrix::zeros(q, q);
    for c in corrs {
        mean += c;
    }
    mean /= n as f64;
    let mut var = DMatrix::zeros(q, q);
    for c in corrs {
        let d = c - &mean;
        var += d.component_mul(&d);
    }
    var /= (n - 1) as f64;
    mean.fill_diagonal(1.0);
    symmetrize(&mut mean);
    Ok((mean, var))
}

/// Per-session Pearson correlations, then element-wise moments.
pub fn empirical_fc(timecourses: &[DMatrix<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    fc_moments(&session_correlations(timecourses)?)
}

/// Element-wise variance of an inverse-Wishart(nu, psi) matrix.
pub fn iw_elementwise_var(psi: &DMatrix<f64>, nu: f64) -> DMatrix<f64> {
    let q = psi.nrows() as f64;
    let denom = (nu - q) * (nu - q - 1.0).powi(2) * (nu - q - 3.0);
    DMatrix::from_fn(psi.nrows(), psi.ncols(), |i, j| {
        ((nu - q + 1.0) * psi[(i, j)].powi(2) + (nu - q - 1.0) * psi[(i, i)] * psi[(j, j)]) / denom
    })
}

/// Smallest off-diagonal slack `Var_IW(i,j) - emp_var(i,j)` when the IW mean is
/// pinned to `mean`.
fn min_slack(mean: &DMatrix<f64>, emp_var: &DMatrix<f64>, nu: f64) -> f64 {
    let q = mean.nrows();
    let psi = mean * (nu - q as f64 - 1.0);
    let v = iw_elementwise_var(&psi, nu);
    let mut worst = f64::INFINITY;
    for i in 0..q {
        for j in (i + 1)..q {
            worst = worst.min(v[(i, j)] - emp_var[(i, j)]);
        }
    }
    worst
}

/// Fits (nu, psi) with `psi / (nu - Q - 1) = emp_mean` and the largest nu in
/// `(Q + 4, Q + 4 + 1e6]` keeping the off-diagonal IW variance >= `emp_var`.
pub fn fit_iw(emp_mean: &DMatrix<f64>, emp_var: &DMatrix<f64>) -> Result<IwParams> {
    let q = emp_mean.nrows();
    if q < 2 {
        return Err(BbmError::InvalidArgument("IW prior needs Q >= 2".into()));
    }
    if emp_var.shape() != (q, q) {
        return Err(BbmError::DimensionMismatch("emp_var shape".into()));
    }
    let mean = repair_spd(emp_mean, SPD_EIGEN_FLOOR);
    let qf = q as f64;
    let lo_bound = qf + 4.0;
    let hi_bound = lo_bound + IW_NU_SEARCH_WIDTH;

    // Variances decrease in nu, so the feasible set is an interval at the low end.
    let nu = if min_slack(&mean, emp_var, hi_bound) >= 0.0 {
        hi_bound
    } else {
        let mut lo = lo_bound;
        if min_slack(&mean, emp_var, lo) < 0.0 {
            return Err(BbmError::Infeasible(format!(
                "population variance exceeds the IW variance even at nu = {lo}"
            )));
        }
        let mut hi = hi_bound;
        while (hi - lo) > IW_NU_REL_TOL * lo {
            let mid = 0.5 * (lo + hi);
            if min_slack(&mean, emp_var, mid) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    Ok(IwParams {
        nu,
        psi: mean * (nu - qf - 1.0),
    })
}

/// Element statistics of Cholesky factors of `fcs` under `n_perm` orderings.
pub fn build_cholesky_prior(fcs: &[DMatrix<f64>], n_perm: usize, seed: u64) -> Result<CholeskyStats> {
    if fcs.is_empty() {
        return Err(BbmError::InvalidArgument("no training matrices".into()));
    }
    if n_perm == 0 {
        return Err(BbmError::InvalidArgument("need at least one permutation".into()));
    }
    let q = fcs[0].nrows();
    let mut rng = stream(seed, &[0xC401]);
    let mut permutations = vec![(0..q).collect::<Vec<_>>()];
    for _ in 1..n_perm {
        let mut p: Vec<usize> = (0..q).collect();
        p.shuffle(&mut rng);
        permutations.push(p);
    }

    let repaired: Vec<_> = fcs
        .iter()
        .map(|r| {
            if r.shape() != (q, q) {
                return Err(BbmError::DimensionMismatch(
                    "training matrices differ in size".into(),
                ));
            }
            Ok(repair_spd(r, SPD_EIGEN_FLOOR))
        })
        .collect::<Result<_>>()?;

    let n_el = q * (q + 1) / 2;
    let n = repaired.len() as f64;
    let mut mean = DMatrix::zeros(n_perm, n_el);
    let mut var = DMatrix::zeros(n_perm, n_el);
    let mut scale = Vec::with_capacity(n_perm);
    for (p, perm) in permutations.iter().enumerate() {
        let factors: Vec<Vec<f64>> = repaired
            .iter()
            .map(|r| {
                permute_symmetric(r, perm)
                    .cholesky()
                    .map(|c| lower_triangle(&c.l()))
                    .ok_or_else(|| BbmError::CholeskyFailure(format!("permutation {p}")))
            })
            .collect::<Result<_>>()?;
        for e in 0..n_el {
            mean[(p, e)] = factors.iter().map(|f| f[e]).sum::<f64>() / n;
        }
        let mut cov = DMatrix::zeros(n_el, n_el);
        if factors.len() > 1 {
            for f in &factors {
                let d = DVector::from_fn(n_el, |e, _| f[e] - mean[(p, e)]);
                cov.ger(1.0, &d, &d, 1.0);
            }
            cov /= n - 1.0;
        }
        for e in 0..n_el {
            var[(p, e)] = cov[(e, e)];
        }
        scale.push(psd_sqrt(cov));
    }
    Ok(CholeskyStats {
        permutations,
        mean,
        var,
        scale,
    })
}

/// `U diag(sqrt(max(l, 0)))` from the eigendecomposition; exact zero for a zero matrix.
fn psd_sqrt(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

fn cholesky_draw<R: Rng>(stats: &CholeskyStats, rng: &mut R) -> DMatrix<f64> {
    let q = stats.q();
    let p = rng.random_range(0..stats.permutations.len());
    let n_el = q * (q + 1) / 2;
    let z = DVector::from_fn(n_el, |_, _| StandardNormal.sample(rng));
    let mut vals: Vec<f64> = (&stats.scale[p] * z)
        .iter()
        .enumerate()
        .map(|(e, x)| stats.mean[(p, e)] + x)
        .collect();
    // factor diagonals are positive; reflect draws that cross zero
    for i in 0..q {
        let d = i * (i + 1) / 2 + i;
        vals[d] = vals[d].abs().max(1e-12);
    }
    let l = from_lower_triangle(q, &vals);
    let r = to_unit_diagonal(&(&l * l.transpose()));
    unpermute_symmetric(&r, &stats.permutations[p])
}

/// One inverse-Wishart(nu, psi) draw via the Bartlett decomposition of its
/// Wishart(nu, psi^{-1}) inverse.
pub fn sample_inverse_wishart<R: Rng>(nu: f64, psi: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let q = psi.nrows();
    let psi_inv = spd_inverse(psi).ok_or_else(|| BbmError::CholeskyFailure("psi".into()))?;
    let l = psi_inv
        .cholesky()
        .ok_or_else(|| BbmError::CholeskyFailure("psi inverse".into()))?
        .l();
    let mut a = DMatrix::zeros(q, q);
    for i in 0..q {
        let chi = ChiSquared::new(nu - i as f64)
            .map_err(|e| BbmError::InvalidArgument(format!("chi-square dof: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    spd_inverse(&w).ok_or_else(|| BbmError::CholeskyFailure("wishart draw".into()))
}

/// `k` unit-diagonal correlation draws from the chosen prior kind. Draw `i`
/// uses its own stream derived from `(seed, i)`.
pub fn sample_fc_prior(prior: &FcPrior, kind: FcKind, k: usize, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    match kind {
        FcKind::Cholesky => {
            let stats = prior
                .cholesky
                .as_ref()
                .ok_or_else(|| BbmError::InvalidArgument("prior has no Cholesky statistics".into()))?;
            Ok((0..k)
                .into_par_iter()
                .map(|i| cholesky_draw(stats, &mut stream(seed, &[0xC402, i as u64])))
                .collect())
        }
        FcKind::InverseWishart => {
            let iw = prior
                .iw
                .as_ref()
                .ok_or_else(|| BbmError::InvalidArgument("prior has no IW parameters".into()))?;
            (0..k)
                .into_par_iter()
                .map(|i| {
                    let s = sample_inverse_wishart(iw.nu, &iw.psi, &mut stream(seed, &[0x1A03, i as u64]))?;
                    Ok(to_unit_diagonal(&s))
                })
                .collect()
        }
    }
}

/// Element-wise mean and standard deviation over a set of draws.
pub fn draw_moments(draws: &[DMatrix<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = draws.len() as f64;
    let q = draws[0].nrows();
    let mut mean = DMatrix::zeros(q, q);
    for d in draws {
        mean += d;
    }
    mean /= n;
    let mut var = DMatrix::zeros(q, q);
    for d in draws {
        let e = d - &mean;
        var += e.component_mul(&e);
    }
    var /= n - 1.0;
    (mean, var.map(f64::sqrt))
}
