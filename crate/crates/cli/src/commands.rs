use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bbm_core::bundle::{read_fit_bundle, write_engagements, write_fit_bundle, PriorBundle};
use bbm_core::ingest::{load_template, save_bold, write_bbm, write_sidecar, Sidecar};
use bbm_core::metrics::{OverlapMatrix, OverlapSource};
use bbm_core::prior_fc::{FcKind, FcPrior};
use bbm_core::prior_spatial::Provenance;
use bbm_core::synth::{simulate_subject, true_prior, SynthConfig};
use bbm_core::{
    dual_regression, engagements, estimate_spatial_prior, fit_subject, BbmError, FcPriorChoice, FitConfig,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{
    EngagementArgs, EstimatePriorArgs, FcFitArg, FcTrainArg, FitArgs, OverlapArgs, OverlapSourceArg,
    SimulateArgs,
};
use crate::ingest::{load_scan, load_subject, parse_subjects};

/// Inputs and seed recorded in the run manifest.
pub struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub seed: Option<u64>,
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct Screening {
    included: Vec<usize>,
    excluded: Vec<usize>,
}

pub fn estimate_prior(a: &EstimatePriorArgs) -> Result<RunRecord> {
    let template = load_template(&a.template, a.template_kind.into())
        .with_context(|| format!("loading template {}", a.template.display()))?;
    let subjects = parse_subjects(&a.subjects, &a.motion, a.split_sessions)?;

    let loaded = subjects
        .par_iter()
        .map(|s| load_subject(s, a.split_sessions, &a.ingest))
        .collect::<Result<Vec<_>>>()?;
    let mut screening = Screening {
        included: Vec::new(),
        excluded: Vec::new(),
    };
    let mut pairs = Vec::new();
    for (i, l) in loaded.into_iter().enumerate() {
        match l {
            Some(p) => {
                screening.included.push(i);
                pairs.push(p);
            }
            None => screening.excluded.push(i),
        }
    }
    if pairs.len() < 2 {
        return Err(BbmError::TooFewSubjects(pairs.len()).into());
    }
    log::info!(
        "{} subjects retained, {} excluded",
        pairs.len(),
        screening.excluded.len()
    );

    let regressions = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (s1, s2))| {
            let subject = screening.included[i];
            let r1 = dual_regression(s1, &template)
                .with_context(|| format!("dual regression, subject {subject} session 1"))?;
            let r2 = dual_regression(s2, &template)
                .with_context(|| format!("dual regression, subject {subject} session 2"))?;
            Ok((r1, r2))
        })
        .collect::<Result<Vec<_>>>()?;

    let template_name = a
        .template
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "template".into());
    let spatial = estimate_spatial_prior(
        &regressions,
        Provenance {
            template_name,
            normalization: a.ingest.normalization(),
        },
    )?;

    let kinds: Vec<FcKind> = match a.fc_prior {
        FcTrainArg::Iw => vec![FcKind::InverseWishart],
        FcTrainArg::Cholesky => vec![FcKind::Cholesky],
        FcTrainArg::Both => vec![FcKind::InverseWishart, FcKind::Cholesky],
        FcTrainArg::None => Vec::new(),
    };
    let fc = if kinds.is_empty() {
        None
    } else {
        let tcs: Vec<_> = regressions
            .iter()
            .flat_map(|(r1, r2)| [r1.timecourses.clone(), r2.timecourses.clone()])
            .collect();
        Some(FcPrior::estimate(&tcs, &kinds, a.permutations, a.seed).context("estimating FC prior")?)
    };

    let bundle = PriorBundle {
        spatial,
        fc,
        network_names: template.network_names().to_vec(),
    };
    bundle.write(&a.out)?;
    write_json(&a.out.join("screening.json"), &screening)?;

    let mut inputs = vec![a.template.clone()];
    for s in &subjects {
        inputs.extend(s.sessions.iter().cloned());
        inputs.extend(s.motion.iter().flatten().cloned());
    }
    Ok(RunRecord {
        inputs,
        seed: Some(a.seed),
    })
}

pub fn fit(a: &FitArgs) -> Result<RunRecord> {
    let bundle =
        PriorBundle::read(&a.prior).with_context(|| format!("reading prior bundle {}", a.prior.display()))?;
    let mut inputs = vec![a.prior.clone(), a.bold.clone()];
    if let Some(t) = &a.template {
        let template = load_template(t, a.template_kind.into())
            .with_context(|| format!("loading template {}", t.display()))?;
        if template.q() != bundle.spatial.q() {
            return Err(BbmError::DimensionMismatch(format!(
                "template has {} networks, prior has {}",
                template.q(),
                bundle.spatial.q()
            ))
            .into());
        }
        inputs.push(t.clone());
    }
    let b = load_scan(&a.bold, a.motion.as_deref(), &a.ingest)
        .with_context(|| format!("loading {}", a.bold.display()))?;
    if let Some(m) = &a.motion {
        inputs.push(m.clone());
    }
    let cfg = FitConfig {
        max_iters: a.max_iters,
        tol: a.tol,
        fc_prior: match a.fc_prior {
            FcFitArg::None => FcPriorChoice::None,
            FcFitArg::Iw => FcPriorChoice::Iw,
            FcFitArg::Cholesky => FcPriorChoice::Cholesky,
        },
        cholesky_k: a.cholesky_k,
        noise_model: a.noise_model.into(),
        rng_seed: a.seed,
        normalization: Some(a.ingest.normalization()),
    };
    let result = fit_subject(&b, &bundle.spatial, bundle.fc.as_ref(), &cfg)?;
    if !result.converged {
        log::warn!("fit stopped at max_iters = {} without converging", cfg.max_iters);
    }
    write_fit_bundle(&a.out, &result, &cfg)?;
    Ok(RunRecord {
        inputs,
        seed: Some(a.seed),
    })
}

pub fn engagements_cmd(a: &EngagementArgs) -> Result<RunRecord> {
    let bundle =
        PriorBundle::read(&a.prior).with_context(|| format!("reading prior bundle {}", a.prior.display()))?;
    let (fit, _) =
        read_fit_bundle(&a.fit).with_context(|| format!("reading fit bundle {}", a.fit.display()))?;
    let r = engagements(&fit, &bundle.spatial, &a.zs, a.alpha, a.correction.into())?;
    let report = write_engagements(&a.out, &r, &bundle.network_names)?;
    for level in &report.levels {
        log::info!("z = {}: {:?} locations per network", level.z, level.counts);
    }
    Ok(RunRecord {
        inputs: vec![a.fit.clone(), a.prior.clone()],
        seed: None,
    })
}

pub fn overlap(a: &OverlapArgs) -> Result<RunRecord> {
    let (o, names) = match a.source {
        OverlapSourceArg::Template => {
            let t = load_template(&a.input, a.template_kind.into())
                .with_context(|| format!("loading template {}", a.input.display()))?;
            (OverlapMatrix::from_template(&t, a.z)?, t.network_names().to_vec())
        }
        OverlapSourceArg::PriorMean => {
            let b = PriorBundle::read(&a.input)
                .with_context(|| format!("reading prior bundle {}", a.input.display()))?;
            (
                OverlapMatrix::from_maps(&b.spatial.mean, a.z, OverlapSource::PriorMean)?,
                b.network_names,
            )
        }
        OverlapSourceArg::Subject => {
            let (fit, _) = read_fit_bundle(&a.input)
                .with_context(|| format!("reading fit bundle {}", a.input.display()))?;
            let names = (1..=fit.s_mean.nrows()).map(|i| format!("network{i}")).collect();
            (
                OverlapMatrix::from_maps(&fit.s_mean, a.z, OverlapSource::Subject)?,
                names,
            )
        }
    };
    create_out(&a.out)?;
    o.write_csv(&a.out.join("overlap.csv"), &names)?;
    Ok(RunRecord {
        inputs: vec![a.input.clone()],
        seed: None,
    })
}

pub fn simulate(a: &SimulateArgs) -> Result<RunRecord> {
    let mut cfg = SynthConfig::new(a.q, a.v, a.t, a.n_subjects, a.noise_sd, a.seed);
    cfg.geometry = a.geometry.into();
    cfg.tr_seconds = a.tr;
    let prior = true_prior(&cfg)?;
    create_out(&a.out)?;

    let names: Vec<String> = (1..=a.q).map(|i| format!("network{i}")).collect();
    let template = a.out.join("template.bbm");
    write_bbm(&template, &prior.mean)?;
    write_sidecar(
        &template,
        &Sidecar {
            network_names: Some(names),
            ..Sidecar::default()
        },
    )?;
    let truth = a.out.join("truth");
    create_out(&truth)?;
    write_bbm(&truth.join("mean.bbm"), &prior.mean)?;
    write_bbm(&truth.join("var.bbm"), &prior.var)?;

    let lines = (0..a.n_subjects)
        .into_par_iter()
        .map(|i| -> Result<String> {
            let s = simulate_subject(&cfg, &prior, i)?;
            let dir = a.out.join(format!("sub{i:04}"));
            create_out(&dir)?;
            write_bbm(&dir.join("maps.bbm"), &s.maps)?;
            write_bbm(&dir.join("fc.bbm"), &s.fc)?;
            let mut paths = Vec::new();
            for (k, b) in s.sessions.iter().enumerate() {
                let p = dir.join(format!("ses{}.bbm", k + 1));
                save_bold(&p, b)?;
                write_bbm(
                    &dir.join(format!("ses{}_timecourses.bbm", k + 1)),
                    &s.timecourses[k],
                )?;
                paths.push(p.display().to_string());
            }
            Ok(paths.join(","))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut listing = lines.join("\n");
    listing.push('\n');
    fs::write(a.out.join("subjects.txt"), listing).context("writing subjects.txt")?;
    Ok(RunRecord {
        inputs: Vec::new(),
        seed: Some(a.seed),
    })
}
