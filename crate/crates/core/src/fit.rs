//! Single-subject model fitting.
//!
//! The model for location `v` and time `t` is
//!
//! ```text
//! y_tv = a_t' s_v + e_tv,   e_tv ~ N(0, tau2_v)
//! s_qv = s0_qv + delta_qv,  delta_qv ~ N(0, sigma2_qv)
//! a_t  ~ N(0, G)                                   (optional FC prior)
//! ```
//!
//! Without an FC prior the mixing matrix A is a parameter and the fit is EM:
//! the E-step gives a Gaussian posterior for each `s_v`, the M-step updates A
//! and then `tau2` in closed form. With an FC prior, A is latent as well and
//! the fit is a mean-field variational loop over `q(s_v)`, `q(a_t)`, `tau2`
//! and the FC estimate `G`.
//!
//! After each M-step the columns of A are rescaled to unit sample variance.
//! That rescaling changes the likelihood (the prior pins the scale of `s`),
//! so the EM objective is recorded twice per iteration: once with the
//! parameters the E-step used, and once after the M-step but before
//! rescaling. EM guarantees the second is never below the first.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dualreg::{stage1, stage2};
use crate::error::{BbmError, Result};
use crate::fc_posterior::CholeskyPosterior;
use crate::ingest::{BoldMatrix, Normalization, Template};
use crate::linalg::{column_correlation, sample_sd, spd_inverse, symmetrize, to_unit_diagonal};
use crate::prior_fc::{FcKind, FcPrior};
use crate::prior_spatial::SpatialPrior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcPriorChoice {
    None,
    Iw,
    Cholesky,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    PerLocation,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Relative Frobenius change in A that counts as converged.
    pub tol: f64,
    pub fc_prior: FcPriorChoice,
    /// Importance-sampling draws per Cholesky FC update, split across orderings.
    pub cholesky_k: usize,
    pub noise_model: NoiseModel,
    pub rng_seed: u64,
    /// How the data were preprocessed; checked against the prior when set.
    pub normalization: Option<Normalization>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iters: 100,
            tol: 1e-3,
            fc_prior: FcPriorChoice::None,
            cholesky_k: 1000,
            noise_model: NoiseModel::PerLocation,
            rng_seed: 0,
            normalization: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFit {
    /// Q x V posterior means.
    pub s_mean: DMatrix<f64>,
    /// Q x V posterior variances; zero where the prior variance is zero.
    pub s_var: DMatrix<f64>,
    /// T x Q mixing matrix with unit-variance columns.
    pub a: DMatrix<f64>,
    /// Q x Q FC estimate. Without an FC prior, the correlation of A's columns.
    pub g_hat: DMatrix<f64>,
    pub tau2: Vec<f64>,
    pub n_iters: usize,
    pub converged: bool,
    /// Marginal log-likelihood at the start of each iteration.
    pub objective_trace: Vec<f64>,
    /// Marginal log-likelihood after each M-step, before column rescaling.
    pub mstep_trace: Vec<f64>,
}

/// Per-location Gaussian posterior of `s_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Posterior of `s_v` given `A'A`, `A'y_v`, noise and prior moments.
///
/// Networks with zero prior variance are pinned to their prior mean and get
/// zero posterior (co)variance.
fn posterior_from_moments(
    ata: &DMatrix<f64>,
    aty: &DVector<f64>,
    tau2: f64,
    s0: &[f64],
    sigma2: &[f64],
) -> LocationPosterior {
    let q = s0.len();
    let free: Vec<usize> = (0..q).filter(|&k| sigma2[k] > 0.0).collect();
    let mut mean = DVector::from_column_slice(s0);
    let mut cov = DMatrix::zeros(q, q);
    if free.is_empty() {
        return LocationPosterior { mean, cov };
    }
    let pinned: Vec<usize> = (0..q).filter(|&k| sigma2[k] <= 0.0).collect();
    let nf = free.len();
    let mut prec = DMatrix::zeros(nf, nf);
    let mut rhs = DVector::zeros(nf);
    for (a, &i) in free.iter().enumerate() {
        let mut data_term = aty[i];
        for &z in &pinned {
            data_term -= ata[(i, z)] * s0[z];
        }
        rhs[a] = s0[i] / sigma2[i] + data_term / tau2;
        for (b, &j) in free.iter().enumerate() {
            prec[(a, b)] = ata[(i, j)] / tau2;
        }
        prec[(a, a)] += 1.0 / sigma2[i];
    }
    let cov_f = spd_inverse(&prec).expect("posterior precision is positive definite");
    let mean_f = &cov_f * rhs;
    for (a, &i) in free.iter().enumerate() {
        mean[i] = mean_f[a];
        for (b, &j) in free.iter().enumerate() {
            cov[(i, j)] = cov_f[(a, b)];
        }
    }
    LocationPosterior { mean, cov }
}

/// Gaussian posterior of `s_v` for one location with A and `tau2_v` fixed.
pub fn posterior_location(
    y_v: &DVector<f64>,
    a: &DMatrix<f64>,
    tau2_v: f64,
    s0_v: &DVector<f64>,
    sigma2_v: &DVector<f64>,
) -> Result<LocationPosterior> {
    if a.nrows() != y_v.len() || a.ncols() != s0_v.len() || s0_v.len() != sigma2_v.len() {
        return Err(BbmError::DimensionMismatch(format!(
            "A is {:?}, y has {}, s0 has {}, sigma2 has {}",
            a.shape(),
            y_v.len(),
            s0_v.len(),
            sigma2_v.len()
        )));
    }
    if !(tau2_v > 0.0) {
        return Err(BbmError::InvalidArgument(format!(
            "tau2 must be positive, got {tau2_v}"
        )));
    }
    if sigma2_v.iter().any(|&s| !(s >= 0.0)) {
        return Err(BbmError::InvalidArgument("prior variance must be >= 0".into()));
    }
    Ok(posterior_from_moments(
        &a.tr_mul(a),
        &a.tr_mul(y_v),
        tau2_v,
        s0_v.as_slice(),
        sigma2_v.as_slice(),
    ))
}

struct Problem<'a> {
    y: &'a DMatrix<f64>,
    s0: &'a DMatrix<f64>,
    sigma2: &'a DMatrix<f64>,
    t: usize,
    q: usize,
    v: usize,
    tau2_floor: f64,
    noise_model: NoiseModel,
}

impl Problem<'_> {
    fn e_step(&self, ata: &DMatrix<f64>, aty: &DMatrix<f64>, tau2: &[f64]) -> Vec<LocationPosterior> {
        (0..self.v)
            .into_par_iter()
            .map(|v| {
                let s0 = self.s0.column(v);
                let sig = self.sigma2.column(v);
                posterior_from_moments(
                    ata,
                    &aty.column(v).into_owned(),
                    tau2[v],
                    s0.as_slice(),
                    sig.as_slice(),
                )
            })
            .collect()
    }

    /// `log p(Y | A, tau2)` with each `s_v` integrated over its prior.
    fn log_likelihood(&self, a: &DMatrix<f64>, tau2: &[f64]) -> f64 {
        let ata = a.tr_mul(a);
        let resid = self.y - a * self.s0;
        let atr = a.tr_mul(&resid);
        let tf = self.t as f64;
        let per_loc: Vec<f64> = (0..self.v)
            .into_par_iter()
            .map(|v| {
                let t2 = tau2[v];
                let rr = resid.column(v).norm_squared();
                let free: Vec<usize> = (0..self.q).filter(|&k| self.sigma2[(k, v)] > 0.0).collect();
                let mut ll = tf * (2.0 * PI).ln() + tf * t2.ln() + rr / t2;
                if !free.is_empty() {
                    let nf = free.len();
                    let mut m = DMatrix::zeros(nf, nf);
                    let mut b = DVector::zeros(nf);
                    for (i, &fi) in free.iter().enumerate() {
                        b[i] = atr[(fi, v)] / t2;
                        for (j, &fj) in free.iter().enumerate() {
                            m[(i, j)] = ata[(fi, fj)] / t2;
                        }
                        m[(i, i)] += 1.0 / self.sigma2[(fi, v)];
                        ll += self.sigma2[(fi, v)].ln();
                    }
                    let chol = m.cholesky().expect("posterior precision is positive definite");
                    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                    ll += logdet - b.dot(&chol.solve(&b));
                }
                -0.5 * ll
            })
            .collect();
        per_loc.iter().sum()
    }

    /// Expected squared residual per location, divided by T, with the noise
    /// model applied and the floor enforced.
    fn update_tau2(
        &self,
        posts: &[LocationPosterior],
        mean_a: &DMatrix<f64>,
        eata: &DMatrix<f64>,
    ) -> Vec<f64> {
        let aty = mean_a.tr_mul(self.y);
        let tf = self.t as f64;
        let raw: Vec<f64> = (0..self.v)
            .into_par_iter()
            .map(|v| {
                let p = &posts[v];
                let yy = self.y.column(v).norm_squared();
                let cross = p.mean.dot(&aty.column(v));
                let second = &p.cov + &p.mean * p.mean.transpose();
                let quad = eata.component_mul(&second).sum();
                ((yy - 2.0 * cross + quad) / tf).max(0.0)
            })
            .collect();
        match self.noise_model {
            NoiseModel::PerLocation => raw.into_iter().map(|x| x.max(self.tau2_floor)).collect(),
            NoiseModel::Global => {
                let m = (raw.iter().sum::<f64>() / self.v as f64).max(self.tau2_floor);
                vec![m; self.v]
            }
        }
    }

    /// `Y diag(w) M'` and `sum_v w_v E[s_v s_v']` for weights `w_v = 1 / tau2_v`.
    fn weighted_moments(&self, posts: &[LocationPosterior], tau2: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut means = DMatrix::zeros(self.q, self.v);
        let mut second = DMatrix::zeros(self.q, self.q);
        for (v, p) in posts.iter().enumerate() {
            let w = 1.0 / tau2[v];
            means.set_column(v, &(&p.mean * w));
            second += (&p.cov + &p.mean * p.mean.transpose()) * w;
        }
        symmetrize(&mut second);
        (self.y * means.transpose(), second)
    }
}

fn rescale_columns(a: &mut DMatrix<f64>) -> Vec<f64> {
    a.column_iter_mut()
        .map(|mut col| {
            let sd = sample_sd(col.as_slice());
            if sd > 0.0 {
                col /= sd;
                sd
            } else {
                1.0
            }
        })
        .collect()
}

fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let denom = old.norm();
    if denom > 0.0 {
        (new - old).norm() / denom
    } else {
        f64::INFINITY
    }
}

/// Fits one subject against a spatial prior and, optionally, an FC prior.
pub fn fit_subject(
    b: &BoldMatrix,
    prior: &SpatialPrior,
    fc: Option<&FcPrior>,
    cfg: &FitConfig,
) -> Result<SubjectFit> {
    if cfg.max_iters == 0 || !(cfg.tol > 0.0) {
        return Err(BbmError::InvalidArgument(
            "max_iters must be >= 1 and tol > 0".into(),
        ));
    }
    let y = b.data();
    let (t, v) = y.shape();
    let q = prior.q();
    if prior.v() != v {
        return Err(BbmError::DimensionMismatch(format!(
            "prior has {} locations, data has {v}",
            prior.v()
        )));
    }
    if t <= q {
        return Err(BbmError::InsufficientTimepoints { t, q });
    }
    if let Some(norm) = cfg.normalization {
        if norm != prior.provenance.normalization {
            return Err(BbmError::NormalizationMismatch(format!(
                "data has {norm}, prior has {}",
                prior.provenance.normalization
            )));
        }
    }
    let fc_kind = match cfg.fc_prior {
        FcPriorChoice::None => None,
        FcPriorChoice::Iw => Some(FcKind::InverseWishart),
        FcPriorChoice::Cholesky => Some(FcKind::Cholesky),
    };
    let fc = match (fc_kind, fc) {
        (None, _) => None,
        (Some(_), None) => {
            return Err(BbmError::InvalidArgument(
                "an FC prior was requested but none was supplied".into(),
            ))
        }
        (Some(kind), Some(p)) => {
            if p.q() != q {
                return Err(BbmError::DimensionMismatch(format!(
                    "FC prior is {0} x {0}, spatial prior has Q = {q}",
                    p.q()
                )));
            }
            if !p.kinds().contains(&kind) {
                return Err(BbmError::InvalidArgument(format!(
                    "FC prior bundle has no {kind:?} component"
                )));
            }
            Some((kind, p))
        }
    };

    // Initialize from dual regression against the prior mean maps.
    let init_template = Template::continuous(prior.mean.clone(), None)?;
    let a0 = stage1(b, &init_template)?;
    let dr = stage2(b, &a0)?;
    let data_scale = y.column_iter().map(|c| c.norm_squared()).sum::<f64>() / (t * v) as f64;
    let tau2_floor = (1e-10 * data_scale).max(f64::MIN_POSITIVE);
    let problem = Problem {
        y,
        s0: &prior.mean,
        sigma2: &prior.var,
        t,
        q,
        v,
        tau2_floor,
        noise_model: cfg.noise_model,
    };
    let mut tau2: Vec<f64> = dr.residual_var.iter().map(|&x| x.max(tau2_floor)).collect();
    if cfg.noise_model == NoiseModel::Global {
        let m = tau2.iter().sum::<f64>() / v as f64;
        tau2 = vec![m; v];
    }

    match fc {
        None => fit_em(&problem, a0, tau2, cfg),
        Some((kind, p)) => fit_vb(&problem, a0, tau2, kind, p, cfg),
    }
}

fn fit_em(p: &Problem, mut a: DMatrix<f64>, mut tau2: Vec<f64>, cfg: &FitConfig) -> Result<SubjectFit> {
    let mut objective_trace = Vec::new();
    let mut mstep_trace = Vec::new();
    let mut converged = false;
    let mut n_iters = 0;

    for _ in 0..cfg.max_iters {
        n_iters += 1;
        let ata = a.tr_mul(&a);
        let aty = a.tr_mul(p.y);
        let posts = p.e_step(&ata, &aty, &tau2);
        objective_trace.push(p.log_likelihood(&a, &tau2));

        let (cross, second) = p.weighted_moments(&posts, &tau2);
        let second_inv = spd_inverse(&second)
            .ok_or_else(|| BbmError::RankDeficient("posterior second moment of S".into()))?;
        let mut a_new = cross * second_inv;
        let tau2_new = p.update_tau2(&posts, &a_new, &a_new.tr_mul(&a_new));
        mstep_trace.push(p.log_likelihood(&a_new, &tau2_new));

        rescale_columns(&mut a_new);
        let change = relative_change(&a_new, &a);
        a = a_new;
        tau2 = tau2_new;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    let posts = p.e_step(&a.tr_mul(&a), &a.tr_mul(p.y), &tau2);
    let g_hat = column_correlation(&a).unwrap_or_else(|_| DMatrix::identity(p.q, p.q));
    Ok(assemble(
        p,
        posts,
        a,
        g_hat,
        tau2,
        n_iters,
        converged,
        objective_trace,
        mstep_trace,
    ))
}

fn fit_vb(
    p: &Problem,
    a0: DMatrix<f64>,
    mut tau2: Vec<f64>,
    kind: FcKind,
    fc: &FcPrior,
    cfg: &FitConfig,
) -> Result<SubjectFit> {
    let (t, q) = (p.t, p.q);
    let mut chol_post = match kind {
        FcKind::Cholesky => {
            if cfg.cholesky_k == 0 {
                return Err(BbmError::InvalidArgument("cholesky_k must be >= 1".into()));
            }
            let stats = fc
                .cholesky
                .as_ref()
                .ok_or_else(|| BbmError::InvalidArgument("prior has no Cholesky statistics".into()))?;
            Some(CholeskyPosterior::new(stats, cfg.cholesky_k, cfg.rng_seed))
        }
        FcKind::InverseWishart => None,
    };

    let mut m = a0;
    let mut a_cov = DMatrix::<f64>::zeros(q, q);
    let mut g = fc.emp_mean.clone();
    let mut objective_trace = Vec::new();
    let mut converged = false;
    let mut n_iters = 0;

    for _ in 0..cfg.max_iters {
        n_iters += 1;
        // q(s)
        let eata = m.tr_mul(&m) + &a_cov * t as f64;
        let posts = p.e_step(&eata, &m.tr_mul(p.y), &tau2);
        objective_trace.push(p.log_likelihood(&m, &tau2));

        // q(a): shared covariance, per-time-point means
        let (cross, second) = p.weighted_moments(&posts, &tau2);
        let g_inv = spd_inverse(&g).ok_or_else(|| BbmError::CholeskyFailure("G".into()))?;
        a_cov = spd_inverse(&(g_inv + second))
            .ok_or_else(|| BbmError::CholeskyFailure("q(a) precision".into()))?;
        symmetrize(&mut a_cov);
        let mut m_new = cross * &a_cov;

        let eata = m_new.tr_mul(&m_new) + &a_cov * t as f64;
        tau2 = p.update_tau2(&posts, &m_new, &eata);

        // G
        let scatter = eata;
        g = match kind {
            FcKind::InverseWishart => {
                let iw = fc.iw.as_ref().expect("checked by caller");
                to_unit_diagonal(&((&iw.psi + &scatter) / (iw.nu + t as f64 + q as f64 + 1.0)))
            }
            FcKind::Cholesky => chol_post.as_mut().expect("built above").update(&scatter, t)?,
        };

        let sds = rescale_columns(&mut m_new);
        for i in 0..q {
            for j in 0..q {
                a_cov[(i, j)] /= sds[i] * sds[j];
            }
        }
        let change = relative_change(&m_new, &m);
        m = m_new;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    let eata = m.tr_mul(&m) + &a_cov * t as f64;
    let posts = p.e_step(&eata, &m.tr_mul(p.y), &tau2);
    Ok(assemble(
        p,
        posts,
        m,
        g,
        tau2,
        n_iters,
        converged,
        objective_trace,
        Vec::new(),
    ))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    p: &Problem,
    posts: Vec<LocationPosterior>,
    a: DMatrix<f64>,
    g_hat: DMatrix<f64>,
    tau2: Vec<f64>,
    n_iters: usize,
    converged: bool,
    objective_trace: Vec<f64>,
    mstep_trace: Vec<f64>,
) -> SubjectFit {
    let mut s_mean = DMatrix::zeros(p.q, p.v);
    let mut s_var = DMatrix::zeros(p.q, p.v);
    for (v, post) in posts.iter().enumerate() {
        s_mean.set_column(v, &post.mean);
        s_var.set_column(v, &post.cov.diagonal());
    }
    SubjectFit {
        s_mean,
        s_var,
        a,
        g_hat,
        tau2,
        n_iters,
        converged,
        objective_trace,
        mstep_trace,
    }
}
