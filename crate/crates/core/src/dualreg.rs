//! Two-stage dual regression.
//!
//! Stage 1 turns a template into subject time courses (least squares on the
//! template maps, or the within-parcel median for hard parcellations). Stage 2
//! regresses every location on those time courses to get engagement maps.
//! Neither stage has an intercept: data are column-centered beforehand.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{BbmError, Result};
use crate::ingest::{BoldMatrix, Template};
use crate::linalg::{is_rank_deficient, sample_sd};

#[derive(Debug, Clone, PartialEq)]
pub struct DualRegResult {
    /// T x Q, unit sample variance columns.
    pub timecourses: DMatrix<f64>,
    /// Q x V engagement estimates.
    pub maps: DMatrix<f64>,
    /// Residual variance per location, RSS / (T - Q).
    pub residual_var: Vec<f64>,
}

/// Network time courses from the template, centered and scaled to unit variance.
pub fn stage1(b: &BoldMatrix, template: &Template) -> Result<DMatrix<f64>> {
    let y = b.data();
    if template.v() != y.ncols() {
        return Err(BbmError::DimensionMismatch(format!(
            "template has {} locations, data has {}",
            template.v(),
            y.ncols()
        )));
    }
    let mut tc = match template {
        Template::ContinuousMaps { maps, .. } => {
            let gram = maps * maps.transpose();
            if is_rank_deficient(&gram) {
                return Err(BbmError::RankDeficient(
                    "template maps are linearly dependent".into(),
                ));
            }
            let chol = gram
                .cholesky()
                .ok_or_else(|| BbmError::RankDeficient("template Gram matrix".into()))?;
            // (S S')^{-1} S Y'  ->  Q x T, transposed to T x Q
            let rhs = maps * y.transpose();
            chol.solve(&rhs).transpose()
        }
        Template::Parcellation { labels, q, .. } => parcel_medians(y, labels, *q)?,
    };
    normalize_columns(&mut tc)?;
    Ok(tc)
}

fn parcel_medians(y: &DMatrix<f64>, labels: &[usize], q: usize) -> Result<DMatrix<f64>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); q];
    for (v, &l) in labels.iter().enumerate() {
        if l > 0 {
            members[l - 1].push(v);
        }
    }
    if let Some(k) = members.iter().position(|m| m.is_empty()) {
        return Err(BbmError::EmptyParcel(k + 1));
    }
    let t = y.nrows();
    let mut out = DMatrix::zeros(t, q);
    let mut buf = Vec::new();
    for (k, locs) in members.iter().enumerate() {
        for i in 0..t {
            buf.clear();
            buf.extend(locs.iter().map(|&v| y[(i, v)]));
            out[(i, k)] = median(&mut buf);
        }
    }
    Ok(out)
}

pub(crate) fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn normalize_columns(tc: &mut DMatrix<f64>) -> Result<()> {
    for (q, mut col) in tc.column_iter_mut().enumerate() {
        let mu = col.mean();
        col.add_scalar_mut(-mu);
        let sd = sample_sd(col.as_slice());
        if !(sd > 0.0) {
            return Err(BbmError::ZeroVariance(format!(
                "stage-1 time course {q} is constant"
            )));
        }
        col /= sd;
    }
    Ok(())
}

/// Per-location OLS of the data on the time courses.
pub fn stage2(b: &BoldMatrix, tc: &DMatrix<f64>) -> Result<DualRegResult> {
    let y = b.data();
    let (t, q) = tc.shape();
    if t != y.nrows() {
        return Err(BbmError::DimensionMismatch(format!(
            "time courses have {t} rows, data has {}",
            y.nrows()
        )));
    }
    if t <= q {
        return Err(BbmError::InsufficientTimepoints { t, q });
    }
    let gram = tc.tr_mul(tc);
    if is_rank_deficient(&gram) {
        return Err(BbmError::RankDeficient("time courses are collinear".into()));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| BbmError::RankDeficient("time-course Gram matrix".into()))?;
    let maps = chol.solve(&tc.tr_mul(y));
    let dof = (t - q) as f64;
    let residual_var: Vec<f64> = (0..y.ncols())
        .into_par_iter()
        .map(|v| {
            let fitted = tc * maps.column(v);
            let rss: f64 = y
                .column(v)
                .iter()
                .zip(fitted.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            rss / dof
        })
        .collect();
    Ok(DualRegResult {
        timecourses: tc.clone(),
        maps,
        residual_var,
    })
}

pub fn dual_regression(b: &BoldMatrix, template: &Template) -> Result<DualRegResult> {
    let tc = stage1(b, template)?;
    stage2(b, &tc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{pearson, sample_var};
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, &[]);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn orthogonal_maps(q: usize, v: usize) -> DMatrix<f64> {
        // disjoint supports are orthogonal
        DMatrix::from_fn(
            q,
            v,
            |i, j| if j % q == i { 1.0 + (j as f64 * 0.01) } else { 0.0 },
        )
    }

    #[test]
    fn noise_free_recovers_timecourses_up_to_scale() {
        let (t, q, v) = (40, 3, 30);
        let a = randn(t, q, 1);
        let s = orthogonal_maps(q, v);
        let b = BoldMatrix::new(&a * &s, 1.0).unwrap();
        let template = Template::continuous(s, None).unwrap();
        let tc = stage1(&b, &template).unwrap();
        for k in 0..q {
            let r = pearson(tc.column(k).as_slice(), a.column(k).as_slice()).unwrap();
            assert!(r > 1.0 - 1e-10, "network {k}: r = {r}");
            assert!((sample_var(tc.column(k).as_slice()) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn parcel_median_ignores_outlier() {
        let y = DMatrix::from_row_slice(3, 3, &[1.0, 5.0, 100.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        let m = parcel_medians(&y, &[1, 1, 1], 1).unwrap();
        assert_eq!(m[(0, 0)], 5.0);
        assert_eq!(m[(2, 0)], 2.0);
    }

    #[test]
    fn duplicated_template_rows_are_rank_deficient() {
        let maps = DMatrix::from_row_slice(2, 4, &[1., 2., 3., 4., 1., 2., 3., 4.]);
        let b = BoldMatrix::new(randn(10, 4, 2), 1.0).unwrap();
        let template = Template::continuous(maps, None).unwrap();
        assert!(matches!(stage1(&b, &template), Err(BbmError::RankDeficient(_))));
    }

    #[test]
    fn exact_regression_recovers_maps() {
        let (t, q, v) = (50, 3, 20);
        let mut a = randn(t, q, 3);
        normalize_columns(&mut a).unwrap();
        let s = randn(q, v, 4);
        let b = BoldMatrix::new(&a * &s, 1.0).unwrap();
        let dr = stage2(&b, &a).unwrap();
        for (x, y) in dr.maps.iter().zip(s.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
        assert!(dr.residual_var.iter().all(|&r| r < 1e-20));
    }

    #[test]
    fn t_equal_q_is_insufficient() {
        let a = randn(3, 3, 5);
        let b = BoldMatrix::new(randn(3, 4, 6), 1.0).unwrap();
        assert!(matches!(
            stage2(&b, &a),
            Err(BbmError::InsufficientTimepoints { t: 3, q: 3 })
        ));
    }

    #[test]
    fn parcel_median_equals_mean_when_parcels_are_homogeneous() {
        let (t, v) = (30, 6);
        let labels = vec![1, 1, 1, 2, 2, 2];
        let base = randn(t, 2, 7);
        let y = DMatrix::from_fn(t, v, |i, j| base[(i, labels[j] - 1)]);
        let b = BoldMatrix::new(y, 1.0).unwrap();
        let parc = Template::parcellation(labels.clone(), None).unwrap();
        let tc_median = stage1(&b, &parc).unwrap();
        // parcel-mean stage 1 is least squares on binary indicator maps
        let ind = DMatrix::from_fn(2, v, |k, j| if labels[j] == k + 1 { 1.0 } else { 0.0 });
        let tc_mean = stage1(&b, &Template::continuous(ind, None).unwrap()).unwrap();
        for (x, y) in tc_median.iter().zip(tc_mean.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn permuting_networks_permutes_maps() {
        let b = BoldMatrix::new(randn(60, 10, 8), 1.0).unwrap();
        let tc = randn(60, 3, 9);
        let perm = [2, 0, 1];
        let tc_p = DMatrix::from_fn(60, 3, |i, k| tc[(i, perm[k])]);
        let m = stage2(&b, &tc).unwrap().maps;
        let mp = stage2(&b, &tc_p).unwrap().maps;
        for k in 0..3 {
            for v in 0..10 {
                assert!((mp[(k, v)] - m[(perm[k], v)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn white_noise_coefficients_shrink_like_inverse_sqrt_t() {
        // Monte Carlo: 100 replicates per T, slope of log mean|coef| vs log T.
        let ts = [50usize, 200, 800];
        let mut logs = Vec::new();
        for (i, &t) in ts.iter().enumerate() {
            let mut acc = 0.0;
            for rep in 0..100u64 {
                let b = BoldMatrix::new(randn(t, 5, 1000 + rep * 10 + i as u64), 1.0).unwrap();
                let mut tc = randn(t, 2, 5000 + rep * 10 + i as u64);
                normalize_columns(&mut tc).unwrap();
                let dr = stage2(&b, &tc).unwrap();
                acc += dr.maps.iter().map(|x| x.abs()).sum::<f64>() / dr.maps.len() as f64;
            }
            logs.push(((t as f64).ln(), (acc / 100.0).ln()));
        }
        let slope = (logs[2].1 - logs[0].1) / (logs[2].0 - logs[0].0);
        assert!((slope + 0.5).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn dual_regression_recovers_maps_under_small_noise() {
        let (t, q, v) = (300, 4, 400);
        let a = randn(t, q, 11);
        let s = DMatrix::from_fn(q, v, |k, j| {
            let c = (k as f64 + 0.5) * v as f64 / q as f64;
            (-((j as f64 - c) / 40.0).powi(2)).exp()
        });
        let noise = randn(t, v, 12) * 0.05;
        let b = BoldMatrix::new(&a * &s + noise, 1.0).unwrap();
        let dr = dual_regression(&b, &Template::continuous(s.clone(), None).unwrap()).unwrap();
        for k in 0..q {
            let r = pearson(
                dr.maps.row(k).transpose().as_slice(),
                s.row(k).transpose().as_slice(),
            )
            .unwrap();
            assert!(r > 0.99, "network {k}: r = {r}");
        }
    }
}
