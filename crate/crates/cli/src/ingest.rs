//! Loading and screening of subject scans.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bbm_core::ingest::{
    censor, compute_fd, load_bold, load_motion, preprocess, split_pseudo_sessions, BoldFormat, CensorConfig,
    Normalization, DEFAULT_HEAD_RADIUS_MM,
};
use bbm_core::{BbmError, BoldMatrix};

use crate::args::IngestArgs;

impl IngestArgs {
    pub fn normalization(&self) -> Normalization {
        Normalization {
            gsr: self.gsr,
            scale: self.scale.into(),
        }
    }

    fn censor_config(&self) -> CensorConfig {
        CensorConfig {
            threshold_mm: self.fd_threshold,
            drop_initial: self.drop_initial,
            min_duration_s: self.min_duration_s,
        }
    }
}

/// Load, censor and preprocess one scan.
pub fn load_scan(path: &Path, motion: Option<&Path>, args: &IngestArgs) -> bbm_core::Result<BoldMatrix> {
    let mut b = load_bold(path, BoldFormat::from_path(path))?;
    if let Some(tr) = args.tr {
        let (subject, session) = (b.subject_id.clone(), b.session_id.clone());
        b = BoldMatrix::new(b.into_data(), tr)?.with_ids(subject, session);
    }
    let fd = match motion {
        Some(m) => compute_fd(&load_motion(m)?, DEFAULT_HEAD_RADIUS_MM, 1)?,
        None => vec![0.0; b.t()],
    };
    let kept = censor(&b, &fd, &args.censor_config())?;
    let n = args.normalization();
    preprocess(&kept, n.gsr, n.scale)
}

/// Paths of one training subject: its sessions and optional motion files.
#[derive(Debug, Clone)]
pub struct SubjectInputs {
    pub sessions: Vec<PathBuf>,
    pub motion: Vec<Option<PathBuf>>,
}

fn split_list(s: &str) -> Vec<PathBuf> {
    s.split(',').map(|p| PathBuf::from(p.trim())).collect()
}

pub fn parse_subjects(subjects: &[String], motion: &[String], split: bool) -> Result<Vec<SubjectInputs>> {
    if !motion.is_empty() && motion.len() != subjects.len() {
        bail!(BbmError::InvalidArgument(format!(
            "{} --motion entries for {} --subject entries",
            motion.len(),
            subjects.len()
        )));
    }
    let want = if split { 1 } else { 2 };
    subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sessions = split_list(s);
            if sessions.len() != want {
                bail!(BbmError::InvalidArgument(format!(
                    "subject {i}: expected {want} scan path(s){}, got `{s}`",
                    if split { " with --split-sessions" } else { "" }
                )));
            }
            let motion = match motion.get(i) {
                Some(m) => {
                    let m = split_list(m);
                    if m.len() != want {
                        bail!(BbmError::InvalidArgument(format!(
                            "subject {i}: expected {want} motion path(s)"
                        )));
                    }
                    m.into_iter().map(Some).collect()
                }
                None => vec![None; want],
            };
            Ok(SubjectInputs { sessions, motion })
        })
        .collect()
}

/// Two preprocessed sessions for a subject, or `None` when screening rejects it.
pub fn load_subject(
    inputs: &SubjectInputs,
    split: bool,
    args: &IngestArgs,
) -> Result<Option<(BoldMatrix, BoldMatrix)>> {
    let mut scans = Vec::with_capacity(2);
    for (path, motion) in inputs.sessions.iter().zip(&inputs.motion) {
        match load_scan(path, motion.as_deref(), args) {
            Ok(b) => scans.push(b),
            Err(e @ BbmError::InsufficientDuration { .. }) => {
                log::warn!("excluding subject with {}: {e}", path.display());
                return Ok(None);
            }
            Err(e) => return Err(e).with_context(|| format!("loading {}", path.display())),
        }
    }
    if split {
        let b = scans.pop().expect("one scan");
        let pair = split_pseudo_sessions(&b)
            .with_context(|| format!("splitting {}", inputs.sessions[0].display()))?;
        return Ok(Some(pair));
    }
    let second = scans.pop().expect("two scans");
    let first = scans.pop().expect("two scans");
    Ok(Some((first, second)))
}
