//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{BbmError, Result};

/// Eigenvalue floor used when repairing near-singular correlation matrices.
pub const SPD_EIGEN_FLOOR: f64 = 1e-8;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the n - 1 denominator. Zero for fewer than two values.
pub fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_var(xs).sqrt()
}

/// Pearson correlation of two equal-length slices. `None` when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

pub fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mu = col.mean();
        col.add_scalar_mut(-mu);
    }
}

pub fn column_sds(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| sample_sd(c.as_slice())).collect()
}

/// Pearson correlation matrix of the columns of `m`.
pub fn column_correlation(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n < 2 {
        return Err(BbmError::InvalidArgument(
            "correlation needs at least two rows".into(),
        ));
    }
    let mut c = m.clone();
    center_columns(&mut c);
    for (j, mut col) in c.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(BbmError::ZeroVariance(format!("column {j} is constant")));
        }
        col /= norm;
    }
    let mut r = c.tr_mul(&c);
    symmetrize(&mut r);
    r.fill_diagonal(1.0);
    Ok(r)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Clip eigenvalues below `floor` and re-symmetrize.
pub fn repair_spd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return s;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Rescale a covariance-like matrix to unit diagonal.
pub fn to_unit_diagonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d: Vec<f64> = (0..m.nrows())
        .map(|i| m[(i, i)].max(f64::MIN_POSITIVE).sqrt())
        .collect();
    let mut out = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / (d[i] * d[j]));
    symmetrize(&mut out);
    out.fill_diagonal(1.0);
    out
}

/// Eigenvalue clipping followed by unit-diagonal rescaling.
pub fn nearest_correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    to_unit_diagonal(&repair_spd(m, SPD_EIGEN_FLOOR))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Inverse of a symmetric positive-definite matrix, falling back to a
/// pseudo-inverse when Cholesky fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        let mut inv = ch.inverse();
        symmetrize(&mut inv);
        return Some(inv);
    }
    let svd = m.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(tol).ok()
}

/// Gram matrix rank check by relative eigenvalue size.
pub fn is_rank_deficient(gram: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(0.0f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    max <= 0.0 || min <= 1e-10 * max
}

/// `out[(i, j)] = m[(perm[i], perm[j])]`.
pub fn permute_symmetric(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], perm[j])])
}

/// Inverse of [`permute_symmetric`].
pub fn unpermute_symmetric(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(perm[i], perm[j])] = m[(i, j)];
        }
    }
    out
}

/// Row-major lower triangle (diagonal included) of a square matrix.
pub fn lower_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let q = m.nrows();
    let mut out = Vec::with_capacity(q * (q + 1) / 2);
    for i in 0..q {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_lower_triangle(q: usize, vals: &[f64]) -> DMatrix<f64> {
    assert_eq!(vals.len(), q * (q + 1) / 2);
    let mut m = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in 0..=i {
            m[(i, j)] = vals[k];
            k += 1;
        }
    }
    m
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let ch = m.clone().cholesky()?;
    Some(2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn row_vec(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}
