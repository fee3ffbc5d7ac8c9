//! Synthetic populations drawn from the generative model.
//!
//! Every random draw comes from a stream keyed by `(seed, subject, session,
//! role)`, so results do not depend on thread count or generation order.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BbmError, Result};
use crate::ingest::BoldMatrix;
use crate::linalg::{min_eigenvalue, nearest_correlation, SPD_EIGEN_FLOOR};
use crate::prior_spatial::{Provenance, SpatialPrior};
use crate::rng::stream;

const ROLE_DEVIATION: u64 = 1;
const ROLE_FC: u64 = 2;
const ROLE_TIMECOURSE: u64 = 3;
const ROLE_NOISE: u64 = 4;
/// Session index used for draws shared by both sessions of a subject.
const SHARED: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// One contiguous plateau per network, overlapping its neighbours by a quarter width.
    Blocks,
    /// One Gaussian bump per network along the location axis.
    GaussianBumps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub q: usize,
    pub v: usize,
    pub t: usize,
    pub n_subjects: usize,
    pub noise_sd: f64,
    pub geometry: Geometry,
    /// Between-subject variance is `var_scale * |s0| + var_floor`.
    pub var_scale: f64,
    pub var_floor: f64,
    /// Q x Q population correlation.
    pub fc_base: DMatrix<f64>,
    /// Q x Q standard deviations of symmetric off-diagonal perturbations.
    pub fc_perturbation: DMatrix<f64>,
    pub tr_seconds: f64,
    pub rng_seed: u64,
}

impl SynthConfig {
    /// Identity base FC with uniform perturbation scale and default variances.
    pub fn new(q: usize, v: usize, t: usize, n_subjects: usize, noise_sd: f64, rng_seed: u64) -> Self {
        SynthConfig {
            q,
            v,
            t,
            n_subjects,
            noise_sd,
            geometry: Geometry::Blocks,
            var_scale: 0.1,
            var_floor: 0.01,
            fc_base: DMatrix::identity(q, q),
            fc_perturbation: DMatrix::from_element(q, q, 0.1),
            tr_seconds: 0.72,
            rng_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.q == 0 || self.q >= self.t.min(self.v) {
            return Err(BbmError::InvalidArgument(format!(
                "need 0 < Q < min(T, V), got Q = {}, T = {}, V = {}",
                self.q, self.t, self.v
            )));
        }
        if !(self.noise_sd >= 0.0) || !(self.var_scale >= 0.0) || !(self.var_floor >= 0.0) {
            return Err(BbmError::InvalidArgument(
                "noise_sd, var_scale and var_floor must be >= 0".into(),
            ));
        }
        if self.fc_base.shape() != (self.q, self.q) || self.fc_perturbation.shape() != (self.q, self.q) {
            return Err(BbmError::DimensionMismatch(
                "FC base/perturbation must be Q x Q".into(),
            ));
        }
        if !(self.tr_seconds > 0.0) {
            return Err(BbmError::InvalidArgument("tr_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// One simulated subject. Sessions share maps and FC.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSubject {
    /// Q x V true maps.
    pub maps: DMatrix<f64>,
    /// Q x Q true FC.
    pub fc: DMatrix<f64>,
    /// T x Q true time courses per session.
    pub timecourses: [DMatrix<f64>; 2],
    pub sessions: [BoldMatrix; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPopulation {
    /// Generating prior: true mean maps and between-subject variances.
    pub prior: SpatialPrior,
    pub subjects: Vec<SynthSubject>,
}

/// Population mean maps for the given geometry.
pub fn mean_maps(q: usize, v: usize, geometry: Geometry) -> DMatrix<f64> {
    let width = v as f64 / q as f64;
    DMatrix::from_fn(q, v, |k, j| {
        let centre = (k as f64 + 0.5) * width;
        let x = j as f64 + 0.5;
        match geometry {
            Geometry::Blocks => {
                if (x - centre).abs() <= 0.625 * width {
                    1.0
                } else {
                    0.0
                }
            }
            Geometry::GaussianBumps => {
                let sd = 0.35 * width;
                (-0.5 * ((x - centre) / sd).powi(2)).exp()
            }
        }
    })
}

/// The generating spatial prior.
pub fn true_prior(cfg: &SynthConfig) -> Result<SpatialPrior> {
    cfg.validate()?;
    let mean = mean_maps(cfg.q, cfg.v, cfg.geometry);
    let var = mean.map(|m| cfg.var_scale * m.abs() + cfg.var_floor);
    SpatialPrior::new(
        mean,
        var,
        cfg.n_subjects,
        Provenance {
            template_name: "synthetic".into(),
            ..Provenance::default()
        },
    )
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Subject FC: nearest correlation to the base plus a symmetric perturbation.
fn draw_fc(cfg: &SynthConfig, subject: u64) -> DMatrix<f64> {
    let mut rng = stream(cfg.rng_seed, &[subject, SHARED, ROLE_FC]);
    let q = cfg.q;
    let mut m = cfg.fc_base.clone();
    for i in 0..q {
        for j in 0..i {
            let e = cfg.fc_perturbation[(i, j)] * gaussian(&mut rng);
            m[(i, j)] += e;
            m[(j, i)] += e;
        }
    }
    if min_eigenvalue(&m) < SPD_EIGEN_FLOOR {
        log::debug!("subject {subject}: FC perturbation not positive definite, clipping eigenvalues");
    }
    nearest_correlation(&m)
}

/// One session `Y = A S + E` with `a_t ~ N(0, fc)` and `E ~ N(0, noise_sd^2)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_session(
    maps: &DMatrix<f64>,
    fc: &DMatrix<f64>,
    t: usize,
    noise_sd: f64,
    tr_seconds: f64,
    seed: u64,
    subject: u64,
    session: u64,
) -> Result<(DMatrix<f64>, BoldMatrix)> {
    let q = maps.nrows();
    let chol = fc
        .clone()
        .cholesky()
        .ok_or_else(|| BbmError::CholeskyFailure("subject FC".into()))?
        .l();
    let mut rng = stream(seed, &[subject, session, ROLE_TIMECOURSE]);
    let z = DMatrix::from_fn(q, t, |_, _| gaussian(&mut rng));
    let a = (chol * z).transpose();
    let mut rng = stream(seed, &[subject, session, ROLE_NOISE]);
    let noise = DMatrix::from_fn(t, maps.ncols(), |_, _| gaussian(&mut rng));
    let y = &a * maps + noise * noise_sd;
    let b =
        BoldMatrix::new(y, tr_seconds)?.with_ids(format!("sub{subject:04}"), format!("ses{}", session + 1));
    Ok((a, b))
}

/// Draws subject `index` of the population defined by `cfg` and `prior`.
pub fn simulate_subject(cfg: &SynthConfig, prior: &SpatialPrior, index: usize) -> Result<SynthSubject> {
    let subject = index as u64;
    let mut rng = stream(cfg.rng_seed, &[subject, SHARED, ROLE_DEVIATION]);
    let maps = DMatrix::from_fn(cfg.q, cfg.v, |k, j| {
        prior.mean[(k, j)] + prior.var[(k, j)].sqrt() * gaussian(&mut rng)
    });
    let fc = draw_fc(cfg, subject);
    let (a1, b1) = simulate_session(
        &maps,
        &fc,
        cfg.t,
        cfg.noise_sd,
        cfg.tr_seconds,
        cfg.rng_seed,
        subject,
        0,
    )?;
    let (a2, b2) = simulate_session(
        &maps,
        &fc,
        cfg.t,
        cfg.noise_sd,
        cfg.tr_seconds,
        cfg.rng_seed,
        subject,
        1,
    )?;
    Ok(SynthSubject {
        maps,
        fc,
        timecourses: [a1, a2],
        sessions: [b1, b2],
    })
}

pub fn simulate_population(cfg: &SynthConfig) -> Result<SynthPopulation> {
    let prior = true_prior(cfg)?;
    let subjects = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| simulate_subject(cfg, &prior, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthPopulation { prior, subjects })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualreg::{dual_regression, stage2};
    use crate::ingest::{preprocess, ScaleMode, Template};
    use crate::linalg::sample_var;

    #[test]
    fn residual_variance_matches_noise() {
        let mut cfg = SynthConfig::new(3, 200, 400, 1, 0.7, 5);
        cfg.geometry = Geometry::GaussianBumps;
        let pop = simulate_population(&cfg).unwrap();
        let s = &pop.subjects[0];
        let resid = s.sessions[0].data() - &s.timecourses[0] * &s.maps;
        let want = 0.49;
        // sample variance of T normals has sd want * sqrt(2 / (T - 1))
        let se = want * (2.0 / 399.0f64).sqrt();
        let mut outside = 0;
        for col in resid.column_iter() {
            if (sample_var(col.as_slice()) - want).abs() > 3.0 * se {
                outside += 1;
            }
        }
        assert!(outside <= 3, "{outside} of 200 columns outside 3 SE");
    }

    #[test]
    fn noiseless_degenerate_population_is_recovered_by_dual_regression() {
        let mut cfg = SynthConfig::new(4, 80, 120, 1, 0.0, 6);
        cfg.var_scale = 0.0;
        cfg.var_floor = 0.0;
        let pop = simulate_population(&cfg).unwrap();
        let s = &pop.subjects[0];
        assert_eq!(s.maps, pop.prior.mean);
        let y = s.sessions[0].data();
        assert!((y - &s.timecourses[0] * &pop.prior.mean).amax() < 1e-12);
        // Stage 2 with the true time courses recovers the maps exactly.
        let dr = stage2(&s.sessions[0], &s.timecourses[0]).unwrap();
        assert!((&dr.maps - &pop.prior.mean).amax() < 1e-8);
        // After centering, full dual regression reproduces the data exactly.
        let t = Template::continuous(pop.prior.mean.clone(), None).unwrap();
        let centered = preprocess(&s.sessions[0], false, ScaleMode::None).unwrap();
        let full = dual_regression(&centered, &t).unwrap();
        assert!(full.residual_var.iter().all(|&r| r < 1e-20));
    }

    #[test]
    fn deterministic_and_order_independent() {
        let cfg = SynthConfig::new(3, 50, 60, 3, 0.5, 9);
        let a = simulate_population(&cfg).unwrap();
        let b = simulate_population(&cfg).unwrap();
        assert_eq!(a, b);
        let single = simulate_subject(&cfg, &a.prior, 2).unwrap();
        assert_eq!(single, a.subjects[2]);
    }

    #[test]
    fn zero_perturbation_gives_identical_fc() {
        let mut cfg = SynthConfig::new(3, 40, 60, 4, 0.5, 10);
        cfg.fc_perturbation.fill(0.0);
        cfg.fc_base = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 1.0]);
        let pop = simulate_population(&cfg).unwrap();
        for s in &pop.subjects {
            assert!((&s.fc - &cfg.fc_base).amax() < 1e-12);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(simulate_population(&SynthConfig::new(5, 4, 100, 1, 0.1, 0)).is_err());
        assert!(simulate_population(&SynthConfig::new(2, 40, 100, 1, -1.0, 0)).is_err());
    }
}
