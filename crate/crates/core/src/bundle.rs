//! On-disk bundles: directories of bbm matrices plus JSON metadata.
//!
//! Prior bundle:
//!
//! ```text
//! manifest.json   template name, Q, V, subject count, normalization
//! mean.bbm        Q x V
//! var.bbm         Q x V
//! fc.json         session count, FC kinds, IW dof, Cholesky orderings
//! fc_emp_mean.bbm, fc_emp_var.bbm, fc_iw_psi.bbm, fc_chol_mean.bbm, fc_chol_var.bbm
//! fc_chol_scale.bbm  per-ordering covariance roots stacked by row, (P * n_el) x n_el
//! ```
//!
//! Fit bundle: `s_mean.bbm`, `s_var.bbm`, `A.bbm`, `G.bbm`, `tau2.bbm` (1 x V)
//! and `fit.json`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{BbmError, Result};
use crate::fit::{FitConfig, SubjectFit};
use crate::inference::{Correction, EngagementResult};
use crate::ingest::{read_bbm, write_bbm, Normalization};
use crate::prior_fc::{CholeskyStats, FcKind, FcPrior, IwParams};
use crate::prior_spatial::{Provenance, SpatialPrior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorManifest {
    pub template_name: String,
    pub q: usize,
    pub v: usize,
    pub n_subjects: usize,
    #[serde(flatten)]
    pub normalization: Normalization,
    pub network_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcManifest {
    pub n_sessions: usize,
    pub kinds: Vec<FcKind>,
    pub iw_nu: Option<f64>,
    pub permutations: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorBundle {
    pub spatial: SpatialPrior,
    pub fc: Option<FcPrior>,
    pub network_names: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| BbmError::Malformed(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| BbmError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| BbmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| BbmError::Malformed(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BbmError::io(dir, e))
}

fn expect_shape(name: &str, m: &DMatrix<f64>, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(BbmError::DimensionMismatch(format!(
            "{name} is {:?}, expected {shape:?}",
            m.shape()
        )));
    }
    Ok(())
}

impl PriorBundle {
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let s = &self.spatial;
        write_json(
            &dir.join("manifest.json"),
            &PriorManifest {
                template_name: s.provenance.template_name.clone(),
                q: s.q(),
                v: s.v(),
                n_subjects: s.n_subjects,
                normalization: s.provenance.normalization,
                network_names: self.network_names.clone(),
            },
        )?;
        write_bbm(&dir.join("mean.bbm"), &s.mean)?;
        write_bbm(&dir.join("var.bbm"), &s.var)?;
        let Some(fc) = &self.fc else {
            return Ok(());
        };
        write_json(
            &dir.join("fc.json"),
            &FcManifest {
                n_sessions: fc.n_sessions,
                kinds: fc.kinds(),
                iw_nu: fc.iw.as_ref().map(|iw| iw.nu),
                permutations: fc.cholesky.as_ref().map(|c| c.permutations.clone()),
            },
        )?;
        write_bbm(&dir.join("fc_emp_mean.bbm"), &fc.emp_mean)?;
        write_bbm(&dir.join("fc_emp_var.bbm"), &fc.emp_var)?;
        if let Some(iw) = &fc.iw {
            write_bbm(&dir.join("fc_iw_psi.bbm"), &iw.psi)?;
        }
        if let Some(ch) = &fc.cholesky {
            write_bbm(&dir.join("fc_chol_mean.bbm"), &ch.mean)?;
            write_bbm(&dir.join("fc_chol_var.bbm"), &ch.var)?;
            let n_el = ch.mean.ncols();
            let mut stacked = DMatrix::zeros(ch.scale.len() * n_el, n_el);
            for (p, b) in ch.scale.iter().enumerate() {
                stacked.rows_mut(p * n_el, n_el).copy_from(b);
            }
            write_bbm(&dir.join("fc_chol_scale.bbm"), &stacked)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let m: PriorManifest = read_json(&dir.join("manifest.json"))?;
        let mean = read_bbm(&dir.join("mean.bbm"))?;
        let var = read_bbm(&dir.join("var.bbm"))?;
        expect_shape("mean.bbm", &mean, (m.q, m.v))?;
        if m.network_names.len() != m.q {
            return Err(BbmError::DimensionMismatch(format!(
                "{} network names for Q = {}",
                m.network_names.len(),
                m.q
            )));
        }
        let spatial = SpatialPrior::new(
            mean,
            var,
            m.n_subjects,
            Provenance {
                template_name: m.template_name,
                normalization: m.normalization,
            },
        )?;
        let fc_path = dir.join("fc.json");
        let fc = if fc_path.exists() {
            Some(read_fc(dir, &read_json(&fc_path)?, m.q)?)
        } else {
            None
        };
        Ok(PriorBundle {
            spatial,
            fc,
            network_names: m.network_names,
        })
    }
}

fn read_fc(dir: &Path, fm: &FcManifest, q: usize) -> Result<FcPrior> {
    let emp_mean = read_bbm(&dir.join("fc_emp_mean.bbm"))?;
    let emp_var = read_bbm(&dir.join("fc_emp_var.bbm"))?;
    expect_shape("fc_emp_mean.bbm", &emp_mean, (q, q))?;
    expect_shape("fc_emp_var.bbm", &emp_var, (q, q))?;
    let iw = if fm.kinds.contains(&FcKind::InverseWishart) {
        let nu = fm
            .iw_nu
            .ok_or_else(|| BbmError::Malformed("fc.json lists iw but has no iw_nu".into()))?;
        let psi = read_bbm(&dir.join("fc_iw_psi.bbm"))?;
        expect_shape("fc_iw_psi.bbm", &psi, (q, q))?;
        Some(IwParams { nu, psi })
    } else {
        None
    };
    let cholesky = if fm.kinds.contains(&FcKind::Cholesky) {
        let permutations = fm
            .permutations
            .clone()
            .ok_or_else(|| BbmError::Malformed("fc.json lists cholesky but has no permutations".into()))?;
        let n_el = q * (q + 1) / 2;
        let mean = read_bbm(&dir.join("fc_chol_mean.bbm"))?;
        let var = read_bbm(&dir.join("fc_chol_var.bbm"))?;
        expect_shape("fc_chol_mean.bbm", &mean, (permutations.len(), n_el))?;
        expect_shape("fc_chol_var.bbm", &var, (permutations.len(), n_el))?;
        let stacked = read_bbm(&dir.join("fc_chol_scale.bbm"))?;
        expect_shape("fc_chol_scale.bbm", &stacked, (permutations.len() * n_el, n_el))?;
        let scale = (0..permutations.len())
            .map(|p| stacked.rows(p * n_el, n_el).into_owned())
            .collect();
        if permutations.iter().any(|p| p.len() != q) {
            return Err(BbmError::Malformed("permutation length differs from Q".into()));
        }
        Some(CholeskyStats {
            permutations,
            mean,
            var,
            scale,
        })
    } else {
        None
    };
    Ok(FcPrior {
        emp_mean,
        emp_var,
        n_sessions: fm.n_sessions,
        iw,
        cholesky,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    pub config: FitConfig,
    pub n_iters: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub mstep_trace: Vec<f64>,
}

pub fn write_fit_bundle(dir: &Path, fit: &SubjectFit, cfg: &FitConfig) -> Result<()> {
    create_dir(dir)?;
    write_bbm(&dir.join("s_mean.bbm"), &fit.s_mean)?;
    write_bbm(&dir.join("s_var.bbm"), &fit.s_var)?;
    write_bbm(&dir.join("A.bbm"), &fit.a)?;
    write_bbm(&dir.join("G.bbm"), &fit.g_hat)?;
    write_bbm(
        &dir.join("tau2.bbm"),
        &DMatrix::from_row_slice(1, fit.tau2.len(), &fit.tau2),
    )?;
    write_json(
        &dir.join("fit.json"),
        &FitManifest {
            config: cfg.clone(),
            n_iters: fit.n_iters,
            converged: fit.converged,
            objective_trace: fit.objective_trace.clone(),
            mstep_trace: fit.mstep_trace.clone(),
        },
    )
}

pub fn read_fit_bundle(dir: &Path) -> Result<(SubjectFit, FitConfig)> {
    let m: FitManifest = read_json(&dir.join("fit.json"))?;
    let s_mean = read_bbm(&dir.join("s_mean.bbm"))?;
    let s_var = read_bbm(&dir.join("s_var.bbm"))?;
    let a = read_bbm(&dir.join("A.bbm"))?;
    let g_hat = read_bbm(&dir.join("G.bbm"))?;
    let tau2 = read_bbm(&dir.join("tau2.bbm"))?;
    let (q, v) = s_mean.shape();
    expect_shape("s_var.bbm", &s_var, (q, v))?;
    expect_shape("G.bbm", &g_hat, (q, q))?;
    expect_shape("tau2.bbm", &tau2, (1, v))?;
    if a.ncols() != q {
        return Err(BbmError::DimensionMismatch(format!(
            "A.bbm has {} columns, Q = {q}",
            a.ncols()
        )));
    }
    let fit = SubjectFit {
        s_mean,
        s_var,
        a,
        g_hat,
        tau2: tau2.iter().copied().collect(),
        n_iters: m.n_iters,
        converged: m.converged,
        objective_trace: m.objective_trace,
        mstep_trace: m.mstep_trace,
    };
    Ok((fit, m.config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementLevel {
    pub z: f64,
    pub file: String,
    pub thresholds: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementReport {
    pub alpha: f64,
    pub correction: Correction,
    pub critical_z: f64,
    pub network_names: Vec<String>,
    pub levels: Vec<EngagementLevel>,
}

/// Writes one 0/1 mask per z level plus `engagements.json`.
pub fn write_engagements(dir: &Path, r: &EngagementResult, names: &[String]) -> Result<EngagementReport> {
    create_dir(dir)?;
    let mut levels = Vec::with_capacity(r.zs.len());
    for (k, &z) in r.zs.iter().enumerate() {
        let file = format!("mask_z{k}.bbm");
        let m = r.masks[k].map(|b| if b { 1.0 } else { 0.0 });
        write_bbm(&dir.join(&file), &m)?;
        levels.push(EngagementLevel {
            z,
            file,
            thresholds: r.thresholds[k].clone(),
            counts: r.counts(k),
        });
    }
    let report = EngagementReport {
        alpha: r.alpha,
        correction: r.correction,
        critical_z: r.critical_z,
        network_names: names.to_vec(),
        levels,
    };
    write_json(&dir.join("engagements.json"), &report)?;
    Ok(report)
}
