mod args;
mod commands;
mod ingest;
mod manifest;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use bbm_core::BbmError;
use clap::Parser;

use args::{Cli, Command};
use manifest::RunManifest;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::EstimatePrior(a) => &a.out,
        Command::Fit(a) => &a.out,
        Command::Engagements(a) => &a.out,
        Command::Overlap(a) => &a.out,
        Command::Simulate(a) => &a.out,
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| BbmError::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let start = Instant::now();
    let record = match &cli.command {
        Command::EstimatePrior(a) => commands::estimate_prior(a)?,
        Command::Fit(a) => commands::fit(a)?,
        Command::Engagements(a) => commands::engagements_cmd(a)?,
        Command::Overlap(a) => commands::overlap(a)?,
        Command::Simulate(a) => commands::simulate(a)?,
    };
    let out = out_dir(&cli.command);
    RunManifest::new(
        &cli.command,
        record.inputs,
        record.seed,
        cli.threads,
        out,
        start.elapsed(),
    )?
    .write(out)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<BbmError>()) {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
