use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::BoldMatrix;
use crate::error::{BbmError, Result};
use crate::linalg::{center_columns, column_sds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Divide the whole matrix by the mean column standard deviation.
    Global,
    /// Divide each column by its own standard deviation.
    Local,
    None,
}

impl std::str::FromStr for ScaleMode {
    type Err = BbmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ScaleMode::Global),
            "local" => Ok(ScaleMode::Local),
            "none" => Ok(ScaleMode::None),
            other => Err(BbmError::InvalidArgument(format!("unknown scale mode {other}"))),
        }
    }
}

impl std::fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScaleMode::Global => "global",
            ScaleMode::Local => "local",
            ScaleMode::None => "none",
        })
    }
}

/// Preprocessing settings that must agree between prior training and fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub gsr: bool,
    pub scale: ScaleMode,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            gsr: false,
            scale: ScaleMode::None,
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gsr={} scale={}", self.gsr, self.scale)
    }
}

/// Optional global signal regression, then column centering, then scaling.
/// Prior training and subject fitting must use identical settings.
pub fn preprocess(b: &BoldMatrix, gsr: bool, scale: ScaleMode) -> Result<BoldMatrix> {
    let mut y = b.data().clone();
    if gsr {
        regress_global_signal(&mut y);
    }
    center_columns(&mut y);
    match scale {
        ScaleMode::None => {}
        ScaleMode::Global => {
            let sds = column_sds(&y);
            let mean_sd = sds.iter().sum::<f64>() / sds.len() as f64;
            if !(mean_sd > 0.0) {
                return Err(BbmError::ZeroVariance("all columns are constant".into()));
            }
            y /= mean_sd;
        }
        ScaleMode::Local => {
            let sds = column_sds(&y);
            if let Some(j) = sds.iter().position(|&s| !(s > 0.0)) {
                return Err(BbmError::ZeroVariance(format!(
                    "column {j} is constant; cannot scale locally"
                )));
            }
            for (mut col, sd) in y.column_iter_mut().zip(sds) {
                col /= sd;
            }
        }
    }
    Ok(b.replace_data(y))
}

fn regress_global_signal(y: &mut DMatrix<f64>) {
    let t = y.nrows();
    let mut g: Vec<f64> = (0..t).map(|i| y.row(i).mean()).collect();
    let gm = g.iter().sum::<f64>() / t as f64;
    g.iter_mut().for_each(|x| *x -= gm);
    let gg: f64 = g.iter().map(|x| x * x).sum();
    if gg <= 0.0 {
        return;
    }
    for mut col in y.column_iter_mut() {
        let beta = col.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / gg;
        for (x, gi) in col.iter_mut().zip(&g) {
            *x -= beta * gi;
        }
    }
}

/// Splits a scan into its first floor(T/2) rows and the remainder, each
/// re-centered. The kept masks partition the original mask.
pub fn split_pseudo_sessions(b: &BoldMatrix) -> Result<(BoldMatrix, BoldMatrix)> {
    let t = b.t();
    if t < 4 {
        return Err(BbmError::InsufficientTimepoints { t, q: 3 });
    }
    let half = t / 2;
    let mut first_mask = vec![false; b.kept_mask().len()];
    let mut second_mask = first_mask.clone();
    let mut seen = 0;
    for (i, &k) in b.kept_mask().iter().enumerate() {
        if k {
            if seen < half {
                first_mask[i] = true;
            } else {
                second_mask[i] = true;
            }
            seen += 1;
        }
    }
    let mut a = b.data().rows(0, half).into_owned();
    let mut c = b.data().rows(half, t - half).into_owned();
    center_columns(&mut a);
    center_columns(&mut c);
    let s1 = BoldMatrix::with_mask(a, b.tr_seconds(), first_mask)?
        .with_ids(b.subject_id.clone(), format!("{}-pseudo1", b.session_id));
    let s2 = BoldMatrix::with_mask(c, b.tr_seconds(), second_mask)?
        .with_ids(b.subject_id.clone(), format!("{}-pseudo2", b.session_id));
    Ok((s1, s2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mean, pearson, sample_sd};
    use proptest::prelude::*;

    fn pseudo_random(t: usize, v: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        DMatrix::from_fn(t, v, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        })
    }

    #[test]
    fn centered_input_unchanged_without_gsr_or_scaling() {
        let mut y = pseudo_random(20, 5, 1);
        center_columns(&mut y);
        let b = BoldMatrix::new(y.clone(), 1.0).unwrap();
        let out = preprocess(&b, false, ScaleMode::None).unwrap();
        for (a, c) in out.data().iter().zip(y.iter()) {
            assert!((a - c).abs() < 1e-14);
        }
    }

    #[test]
    fn gsr_output_is_orthogonal_to_global_signal() {
        let mut y = pseudo_random(50, 8, 2);
        for t in 0..50 {
            let shared = (t as f64 * 0.3).sin() * 5.0;
            for v in 0..8 {
                y[(t, v)] += shared;
            }
        }
        let g: Vec<f64> = (0..50).map(|t| y.row(t).mean()).collect();
        let b = BoldMatrix::new(y, 1.0).unwrap();
        let out = preprocess(&b, true, ScaleMode::None).unwrap();
        for col in out.data().column_iter() {
            assert!(mean(col.as_slice()).abs() < 1e-10);
            assert!(pearson(col.as_slice(), &g).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn global_scaling_of_sd_two_columns() {
        let y = DMatrix::from_fn(40, 4, |t, v| if (t + v) % 2 == 0 { 2.0 } else { -2.0 });
        let sd_in = sample_sd(y.column(0).as_slice());
        let y = y * (2.0 / sd_in);
        let b = BoldMatrix::new(y, 1.0).unwrap();
        let out = preprocess(&b, false, ScaleMode::Global).unwrap();
        for sd in column_sds(out.data()) {
            assert!((sd - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn local_scaling_rejects_constant_column() {
        let mut y = pseudo_random(10, 3, 3);
        y.column_mut(1).fill(4.0);
        let b = BoldMatrix::new(y, 1.0).unwrap();
        assert!(matches!(
            preprocess(&b, false, ScaleMode::Local),
            Err(BbmError::ZeroVariance(_))
        ));
    }

    #[test]
    fn pseudo_session_sizes() {
        for (t, a, c) in [(100, 50, 50), (101, 50, 51)] {
            let b = BoldMatrix::new(pseudo_random(t, 3, 4), 1.0).unwrap();
            let (s1, s2) = split_pseudo_sessions(&b).unwrap();
            assert_eq!((s1.t(), s2.t()), (a, c));
            for col in s1.data().column_iter().chain(s2.data().column_iter()) {
                assert!(mean(col.as_slice()).abs() < 1e-12);
            }
        }
        let b = BoldMatrix::new(pseudo_random(3, 3, 4), 1.0).unwrap();
        assert!(split_pseudo_sessions(&b).is_err());
    }

    proptest! {
        #[test]
        fn preprocess_is_identity_on_centered_data(seed in any::<u64>(), t in 3usize..30, v in 2usize..6) {
            let mut y = pseudo_random(t, v, seed);
            center_columns(&mut y);
            let b = BoldMatrix::new(y.clone(), 2.0).unwrap();
            let out = preprocess(&b, false, ScaleMode::None).unwrap();
            for (a, c) in out.data().iter().zip(y.iter()) {
                prop_assert!((a - c).abs() < 1e-12);
            }
        }
    }
}
