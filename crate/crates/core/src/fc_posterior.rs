//! Subject FC update under the permuted-Cholesky prior.
//!
//! Each ordering carries a Gaussian prior on the lower-triangle factor
//! elements, `l = mean + B z` with `z ~ N(0, I)`. The factor maps to a
//! correlation matrix by normalizing its rows, `G = U U^T` with
//! `U = diag(1 / |l_i|) L`. Given a scatter matrix `S` summing `T` time
//! points, the log posterior of an ordering's coordinates is
//!
//! ```text
//! J(z) = -(T/2) log|G| - (1/2) tr(G^{-1} S) - (1/2) |z|^2
//! ```
//!
//! The update returns the posterior mean of `G` over the equal-weight mixture
//! of orderings, by self-normalized importance sampling. Drawing from the
//! prior itself collapses onto a single draw once `T` reaches the hundreds,
//! so each ordering instead samples a Student-t centred on its posterior mode.
//! The proposal scale, and the Newton metric used to find the mode, is
//! `I + B^T F B` with `F` the expected information of the Wishart likelihood
//! in the factor elements, which is positive definite everywhere. Pooling the
//! weights of all orderings weights each ordering by its marginal likelihood.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{BbmError, Result};
use crate::linalg::{from_lower_triangle, permute_symmetric, to_unit_diagonal, unpermute_symmetric};
use crate::prior_fc::CholeskyStats;
use crate::rng::stream;

const MAX_SEARCH_ITERS: usize = 100;
const SEARCH_GRAD_TOL: f64 = 1e-10;
/// Degrees of freedom of the Student-t proposal.
const PROPOSAL_DOF: f64 = 5.0;

/// Log importance weight and correlation matrix of one proposal draw.
type WeightedDraw = (f64, DMatrix<f64>);

/// Log posterior of one ordering's factor coordinates.
struct FactorPosterior<'a> {
    mean: DVector<f64>,
    scale: &'a DMatrix<f64>,
    /// Scatter in the ordering's network order.
    scatter: DMatrix<f64>,
    t: f64,
    q: usize,
}

struct Evaluation {
    value: f64,
    grad: DVector<f64>,
}

impl FactorPosterior<'_> {
    fn factor(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let l = &self.mean + self.scale * z;
        from_lower_triangle(self.q, l.as_slice())
    }

    fn correlation(&self, z: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut u = self.factor(z);
        for i in 0..self.q {
            let n = u.row(i).norm();
            if n == 0.0 || u[(i, i)] == 0.0 {
                return None;
            }
            u.row_mut(i).scale_mut(1.0 / n);
        }
        Some(&u * u.transpose())
    }

    /// Expected negative Hessian of `J` at `z`: `I + B^T F B`, where
    /// `F_ab = (T/2) tr(G^{-1} dG_a G^{-1} dG_b)` over factor elements.
    fn information(&self, z: &DVector<f64>) -> Option<DMatrix<f64>> {
        let q = self.q;
        let mut u = self.factor(z);
        let mut norms = vec![0.0; q];
        for i in 0..q {
            norms[i] = u.row(i).norm();
            if norms[i] == 0.0 || u[(i, i)] == 0.0 {
                return None;
            }
            u.row_mut(i).scale_mut(1.0 / norms[i]);
        }
        let g = &u * u.transpose();
        let g_inv = Cholesky::new(g.clone())?.inverse();

        // dG_a = e_i w_a^T + w_a e_i^T for element a = (i, j) of row i
        let n_el = q * (q + 1) / 2;
        let mut rows = Vec::with_capacity(n_el);
        let mut w = DMatrix::zeros(n_el, q);
        for i in 0..q {
            for j in 0..=i {
                let a = rows.len();
                for k in 0..q {
                    w[(a, k)] = (u[(k, j)] - u[(i, j)] * g[(k, i)]) / norms[i];
                }
                rows.push(i);
            }
        }
        let wk = &w * &g_inv;
        let wkw = &wk * w.transpose();
        let f = DMatrix::from_fn(n_el, n_el, |a, b| {
            let (i, k) = (rows[a], rows[b]);
            self.t * (wk[(a, k)] * wk[(b, i)] + g_inv[(i, k)] * wkw[(a, b)])
        });
        let mut h = self.scale.tr_mul(&(f * self.scale));
        for d in 0..h.nrows() {
            h[(d, d)] += 1.0;
        }
        Some(h.symmetric_part())
    }

    fn evaluate(&self, z: &DVector<f64>) -> Option<Evaluation> {
        let q = self.q;
        let l = self.factor(z);
        let norms: Vec<f64> = (0..q).map(|i| l.row(i).norm()).collect();
        if (0..q).any(|i| norms[i] == 0.0 || l[(i, i)] == 0.0) {
            return None;
        }
        let u = DMatrix::from_fn(q, q, |i, j| l[(i, j)] / norms[i]);
        let u_inv = u.solve_lower_triangular(&DMatrix::identity(q, q))?;
        let g_inv = u_inv.tr_mul(&u_inv);
        let log_det: f64 = (0..q).map(|i| 2.0 * u[(i, i)].abs().ln()).sum();
        let trace = g_inv.component_mul(&self.scatter).sum();
        let value = -0.5 * self.t * log_det - 0.5 * trace - 0.5 * z.norm_squared();

        // dJ/dG, then through G = U U^T and the row normalization
        let d_g = &g_inv * &self.scatter * &g_inv * 0.5 - &g_inv * (0.5 * self.t);
        let d_u = d_g * &u * 2.0;
        let mut d_l = Vec::with_capacity(q * (q + 1) / 2);
        for i in 0..q {
            let radial: f64 = (0..=i).map(|j| d_u[(i, j)] * u[(i, j)]).sum();
            for j in 0..=i {
                d_l.push((d_u[(i, j)] - radial * u[(i, j)]) / norms[i]);
            }
        }
        let grad = self.scale.tr_mul(&DVector::from_vec(d_l)) - z;
        Some(Evaluation { value, grad })
    }
}

/// Importance-sampled posterior mean of G, warm-starting each ordering's mode
/// search from the previous call.
pub struct CholeskyPosterior<'a> {
    stats: &'a CholeskyStats,
    n_draws: usize,
    seed: u64,
    /// Current whitened coordinates per ordering; `None` until the first update.
    coords: Option<Vec<DVector<f64>>>,
}

impl<'a> CholeskyPosterior<'a> {
    pub fn new(stats: &'a CholeskyStats, n_draws: usize, seed: u64) -> Self {
        CholeskyPosterior {
            stats,
            n_draws,
            seed,
            coords: None,
        }
    }

    fn posterior(&self, p: usize, scatter: &DMatrix<f64>, t: usize) -> FactorPosterior<'a> {
        let stats: &'a CholeskyStats = self.stats;
        FactorPosterior {
            mean: stats.mean.row(p).transpose(),
            scale: &stats.scale[p],
            scatter: permute_symmetric(scatter, &stats.permutations[p]),
            t: t as f64,
            q: stats.q(),
        }
    }

    /// Best of the prior mean and this ordering's share of the prior draws.
    fn initial(&self, post: &FactorPosterior, p: usize) -> DVector<f64> {
        let n_perm = self.stats.permutations.len();
        let n_el = post.mean.len();
        let score = |z: &DVector<f64>| post.evaluate(z).map_or(f64::NEG_INFINITY, |e| e.value);
        let mut best = DVector::zeros(n_el);
        let mut best_score = score(&best);
        for i in (p..self.n_draws).step_by(n_perm) {
            let mut rng = stream(self.seed, &[0xC403, i as u64]);
            let z = DVector::from_fn(n_el, |_, _| StandardNormal.sample(&mut rng));
            let s = score(&z);
            if s > best_score {
                best = z;
                best_score = s;
            }
        }
        best
    }

    /// Fisher scoring ascent on `J` with step halving.
    fn search(post: &FactorPosterior, start: DVector<f64>) -> Result<DVector<f64>> {
        let degenerate = || BbmError::Optimization("degenerate factor in mode search".into());
        let mut z = start;
        let mut current = post.evaluate(&z).ok_or_else(degenerate)?;
        for _ in 0..MAX_SEARCH_ITERS {
            if current.grad.norm() <= SEARCH_GRAD_TOL * (1.0 + current.value.abs()) {
                return Ok(z);
            }
            let info = post.information(&z).ok_or_else(degenerate)?;
            let step = Cholesky::new(info).ok_or_else(degenerate)?.solve(&current.grad);
            let mut scale = 1.0;
            let accepted = loop {
                let trial = &z + &step * scale;
                if let Some(e) = post.evaluate(&trial) {
                    if e.value >= current.value {
                        break Some((trial, e));
                    }
                }
                scale *= 0.5;
                if scale < 1e-10 {
                    break None;
                }
            };
            match accepted {
                Some((trial, e)) => {
                    z = trial;
                    current = e;
                }
                None => return Ok(z),
            }
        }
        log::debug!("FC mode search stopped at {MAX_SEARCH_ITERS} iterations");
        Ok(z)
    }

    /// Log importance weights and correlation draws for ordering `p`.
    fn weighted_draws(
        &self,
        post: &FactorPosterior,
        p: usize,
        mode: &DVector<f64>,
        n_draws: usize,
    ) -> Result<Vec<WeightedDraw>> {
        let degenerate = || BbmError::Optimization(format!("ordering {p}: degenerate factor at mode"));
        // proposal covariance C^{-T} C^{-1} for information C C^T
        let chol = post
            .information(mode)
            .and_then(Cholesky::new)
            .ok_or_else(degenerate)?;
        let c = chol.l();
        let log_det = -2.0 * c.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let n = mode.len() as f64;
        let chi = ChiSquared::new(PROPOSAL_DOF).expect("positive dof");
        let mut out = Vec::with_capacity(n_draws);
        for i in 0..n_draws {
            let mut rng = stream(self.seed, &[0xC404, p as u64, i as u64]);
            let x = DVector::from_fn(mode.len(), |_, _| StandardNormal.sample(&mut rng));
            let w: f64 = chi.sample(&mut rng);
            let stretch = (PROPOSAL_DOF / w).sqrt();
            let z = mode + c.tr_solve_lower_triangular(&x).expect("positive diagonal") * stretch;
            let Some(e) = post.evaluate(&z) else { continue };
            let dist2 = x.norm_squared() * stretch * stretch;
            let log_proposal = -0.5 * log_det - 0.5 * (PROPOSAL_DOF + n) * (1.0 + dist2 / PROPOSAL_DOF).ln();
            let g = post.correlation(&z).expect("evaluated above");
            out.push((
                e.value - log_proposal,
                unpermute_symmetric(&g, &self.stats.permutations[p]),
            ));
        }
        Ok(out)
    }

    /// Posterior mean of G given `scatter`, the sum of `t` outer products.
    pub fn update(&mut self, scatter: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
        let n_perm = self.stats.permutations.len();
        let q = self.stats.q();
        let per_ordering = self.n_draws.div_ceil(n_perm);
        let starts: Vec<DVector<f64>> = match self.coords.take() {
            Some(c) => c,
            None => (0..n_perm)
                .map(|p| self.initial(&self.posterior(p, scatter, t), p))
                .collect(),
        };
        let per: Vec<(DVector<f64>, Vec<WeightedDraw>)> = starts
            .into_par_iter()
            .enumerate()
            .map(|(p, start)| {
                let post = self.posterior(p, scatter, t);
                let mode = Self::search(&post, start.clone()).unwrap_or_else(|e| {
                    log::debug!("ordering {p}: {e}; keeping the start point");
                    start
                });
                let draws = self.weighted_draws(&post, p, &mode, per_ordering)?;
                Ok((mode, draws))
            })
            .collect::<Result<_>>()?;

        let max = per
            .iter()
            .flat_map(|(_, d)| d.iter().map(|(lw, _)| *lw))
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(BbmError::Optimization("no valid proposal draws".into()));
        }
        let mut acc = DMatrix::zeros(q, q);
        let (mut total, mut total_sq) = (0.0, 0.0);
        for (_, draws) in &per {
            for (lw, g) in draws {
                let w = (lw - max).exp();
                acc += g * w;
                total += w;
                total_sq += w * w;
            }
        }
        log::trace!(
            "FC importance sampling: effective sample size {:.1}",
            total * total / total_sq
        );
        self.coords = Some(per.into_iter().map(|(m, _)| m).collect());
        Ok(to_unit_diagonal(&(acc / total)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior_fc::{build_cholesky_prior, draw_moments, sample_fc_prior, FcKind, FcPrior};

    fn corr(q: usize, r: f64) -> DMatrix<f64> {
        DMatrix::from_fn(q, q, |i, j| if i == j { 1.0 } else { r })
    }

    /// Correlations spread in every direction around `corr(q, 0.3)`.
    fn training_q(q: usize) -> Vec<DMatrix<f64>> {
        let mut rng = stream(11, &[q as u64]);
        (0..40)
            .map(|_| {
                let mut m = corr(q, 0.3);
                for i in 0..q {
                    for j in 0..i {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let e = 0.15 * z;
                        m[(i, j)] += e;
                        m[(j, i)] += e;
                    }
                }
                crate::linalg::nearest_correlation(&m)
            })
            .collect()
    }

    fn training() -> Vec<DMatrix<f64>> {
        training_q(3)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for q in [3usize, 6] {
            let n_el = q * (q + 1) / 2;
            let stats = build_cholesky_prior(&training_q(q), 3, 1).unwrap();
            let scatter = DMatrix::from_fn(q, q, |i, j| if i == j { 50.0 } else { 8.0 + (i + 2 * j) as f64 })
                .symmetric_part();
            let est = CholeskyPosterior::new(&stats, 0, 0);
            for p in 0..3 {
                let post = est.posterior(p, &scatter, 50);
                let z = DVector::from_fn(n_el, |i, _| 0.3 * ((i % 6) as f64 - 2.5));
                let e = post.evaluate(&z).unwrap();
                for k in 0..n_el {
                    let h = 1e-6;
                    let mut zp = z.clone();
                    zp[k] += h;
                    let mut zm = z.clone();
                    zm[k] -= h;
                    let fd =
                        (post.evaluate(&zp).unwrap().value - post.evaluate(&zm).unwrap().value) / (2.0 * h);
                    assert!(
                        (fd - e.grad[k]).abs() < 1e-5 * (1.0 + fd.abs()),
                        "q {q} p {p} k {k}: {fd} vs {}",
                        e.grad[k]
                    );
                }
                let g = post.correlation(&z).unwrap();
                assert!((g.diagonal().add_scalar(-1.0)).abs().max() < 1e-12);
            }
        }
    }

    /// `-d^2 J / dz^2` by central differences of the analytic gradient.
    fn neg_hessian(post: &FactorPosterior, z: &DVector<f64>) -> DMatrix<f64> {
        let n = z.len();
        let step = 1e-5;
        let mut h = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut zp = z.clone();
            zp[k] += step;
            let mut zm = z.clone();
            zm[k] -= step;
            let d = (post.evaluate(&zm).unwrap().grad - post.evaluate(&zp).unwrap().grad) / (2.0 * step);
            h.set_column(k, &d);
        }
        h.symmetric_part()
    }

    // The observed information is linear in the scatter, so at S = T G it
    // equals the expected information.
    #[test]
    fn information_matches_hessian_at_expected_scatter() {
        for q in [3usize, 5] {
            let n_el = q * (q + 1) / 2;
            let stats = build_cholesky_prior(&training_q(q), 2, 1).unwrap();
            let est = CholeskyPosterior::new(&stats, 0, 0);
            let t = 40;
            for p in 0..2 {
                let z = DVector::from_fn(n_el, |i, _| 0.4 * ((i % 5) as f64 - 2.0));
                let probe = est.posterior(p, &DMatrix::zeros(q, q), t);
                let g = probe.correlation(&z).unwrap();
                let perm = &stats.permutations[p];
                let post = est.posterior(p, &(unpermute_symmetric(&g, perm) * t as f64), t);
                let fd = neg_hessian(&post, &z);
                let info = post.information(&z).unwrap();
                let err = (&fd - &info).abs().max();
                assert!(err < 1e-5 * (1.0 + fd.abs().max()), "q {q} p {p}: {err}");
            }
        }
    }

    #[test]
    fn zero_data_returns_prior_mean() {
        let stats = build_cholesky_prior(&training(), 4, 2).unwrap();
        let mut est = CholeskyPosterior::new(&stats, 4000, 0);
        let g = est.update(&DMatrix::zeros(3, 3), 0).unwrap();
        let prior = FcPrior {
            emp_mean: corr(3, 0.3),
            emp_var: DMatrix::zeros(3, 3),
            n_sessions: 40,
            iw: None,
            cholesky: Some(stats),
        };
        let (mean, _) = draw_moments(&sample_fc_prior(&prior, FcKind::Cholesky, 20_000, 9).unwrap());
        assert!((g - mean).abs().max() < 0.01);
    }

    #[test]
    fn zero_prior_variance_ignores_data() {
        let stats = build_cholesky_prior(&vec![corr(3, 0.4); 5], 2, 3).unwrap();
        let mut mode = CholeskyPosterior::new(&stats, 50, 0);
        let g = mode.update(&(corr(3, -0.3) * 1000.0), 1000).unwrap();
        assert!((g - corr(3, 0.4)).abs().max() < 1e-12);
    }

    #[test]
    fn long_scans_approach_the_sample_correlation() {
        let stats = build_cholesky_prior(&training(), 3, 4).unwrap();
        let target = DMatrix::from_row_slice(3, 3, &[1., 0.5, 0.1, 0.5, 1., 0.3, 0.1, 0.3, 1.]);
        let mut errors = Vec::new();
        for t in [10usize, 1_000, 100_000] {
            let mut mode = CholeskyPosterior::new(&stats, 100, 0);
            let g = mode.update(&(&target * t as f64), t).unwrap();
            errors.push((g - &target).abs().max());
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
        assert!(errors[2] < 1e-2, "{errors:?}");
    }
}
