use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::args::Command;

#[derive(Debug, Serialize)]
pub struct Versions {
    pub bbm_cli: &'static str,
    pub bbm_core: &'static str,
}

/// Written as `run_manifest.json` next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub versions: Versions,
    /// SHA-256 of every file under the output directory, keyed by relative path.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_seconds: f64,
}

impl RunManifest {
    pub fn new(
        cmd: &Command,
        inputs: Vec<PathBuf>,
        seed: Option<u64>,
        threads: Option<usize>,
        out_dir: &Path,
        wall: Duration,
    ) -> Result<Self> {
        let config = serde_json::to_value(cmd).context("serializing command configuration")?;
        let canonical = serde_json::to_vec(&config)?;
        Ok(RunManifest {
            command: cmd.name(),
            config_hash: hex::encode(Sha256::digest(&canonical)),
            config,
            inputs,
            seed,
            threads,
            versions: Versions {
                bbm_cli: env!("CARGO_PKG_VERSION"),
                bbm_core: bbm_core::VERSION,
            },
            outputs: hash_outputs(out_dir)?,
            wall_time_seconds: wall.as_secs_f64(),
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("run_manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn hash_outputs(out_dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![out_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(out_dir).unwrap_or(&path);
            if rel == Path::new("run_manifest.json") {
                continue;
            }
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            out.insert(rel.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(out)
}
