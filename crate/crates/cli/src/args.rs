use std::path::PathBuf;

use bbm_core::inference::Correction;
use bbm_core::synth::Geometry;
use bbm_core::{NoiseModel, ScaleMode, TemplateKind};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "bbm",
    version,
    about = "Bayesian brain mapping: population priors and subject-level posterior maps"
)]
pub struct Cli {
    /// Worker threads for parallel loops (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Train spatial and FC priors from test-retest sessions.
    EstimatePrior(EstimatePriorArgs),
    /// Fit one subject against a prior bundle.
    Fit(FitArgs),
    /// Threshold a fit into nested significant-engagement masks.
    Engagements(EngagementArgs),
    /// Dice overlap between the networks of a set of maps.
    Overlap(OverlapArgs),
    /// Write a synthetic population drawn from the generative model.
    Simulate(SimulateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::EstimatePrior(_) => "estimate-prior",
            Command::Fit(_) => "fit",
            Command::Engagements(_) => "engagements",
            Command::Overlap(_) => "overlap",
            Command::Simulate(_) => "simulate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KindArg {
    Parcellation,
    ContinuousMaps,
}

impl From<KindArg> for TemplateKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Parcellation => TemplateKind::Parcellation,
            KindArg::ContinuousMaps => TemplateKind::ContinuousMaps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleArg {
    Global,
    Local,
    None,
}

impl From<ScaleArg> for ScaleMode {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Global => ScaleMode::Global,
            ScaleArg::Local => ScaleMode::Local,
            ScaleArg::None => ScaleMode::None,
        }
    }
}

/// Ingest settings shared by prior training and fitting.
#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// Regress the global signal out of every location.
    #[arg(long)]
    pub gsr: bool,
    #[arg(long, value_enum, default_value = "none")]
    pub scale: ScaleArg,
    /// Framewise displacement threshold in mm.
    #[arg(long, default_value_t = 0.5)]
    pub fd_threshold: f64,
    /// Volumes dropped from the start of every scan.
    #[arg(long, default_value_t = 15)]
    pub drop_initial: usize,
    /// Minimum retained scan duration in seconds.
    #[arg(long, default_value_t = 600.0)]
    pub min_duration_s: f64,
    /// Repetition time in seconds; overrides sidecars.
    #[arg(long)]
    pub tr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FcTrainArg {
    Iw,
    Cholesky,
    Both,
    None,
}

#[derive(Debug, Args, Serialize)]
pub struct EstimatePriorArgs {
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long, value_enum, default_value = "continuous-maps")]
    pub template_kind: KindArg,
    /// One subject: `ses1.bbm,ses2.bbm`, or a single scan with --split-sessions. Repeatable.
    #[arg(long = "subject", required = true)]
    pub subjects: Vec<String>,
    /// Motion parameter files, comma-separated in the same layout as --subject. Repeatable.
    #[arg(long = "motion")]
    pub motion: Vec<String>,
    /// Treat the two halves of each scan as sessions.
    #[arg(long)]
    pub split_sessions: bool,
    #[arg(long, value_enum, default_value = "both")]
    pub fc_prior: FcTrainArg,
    /// Orderings used by the Cholesky FC prior.
    #[arg(long, default_value_t = bbm_core::prior_fc::DEFAULT_PERMUTATIONS)]
    pub permutations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub ingest: IngestArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FcFitArg {
    None,
    Iw,
    Cholesky,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseArg {
    PerLocation,
    Global,
}

impl From<NoiseArg> for NoiseModel {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::PerLocation => NoiseModel::PerLocation,
            NoiseArg::Global => NoiseModel::Global,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Prior bundle directory.
    #[arg(long)]
    pub prior: PathBuf,
    /// Subject scan.
    #[arg(long)]
    pub bold: PathBuf,
    #[arg(long)]
    pub motion: Option<PathBuf>,
    /// Template to check against the prior's network count.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "continuous-maps")]
    pub template_kind: KindArg,
    #[arg(long, value_enum, default_value = "none")]
    pub fc_prior: FcFitArg,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Importance-sampling draws per Cholesky FC update.
    #[arg(long, default_value_t = 1000)]
    pub cholesky_k: usize,
    #[arg(long, value_enum, default_value = "per-location")]
    pub noise_model: NoiseArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub ingest: IngestArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionArg {
    Bonferroni,
    None,
}

impl From<CorrectionArg> for Correction {
    fn from(c: CorrectionArg) -> Self {
        match c {
            CorrectionArg::Bonferroni => Correction::Bonferroni,
            CorrectionArg::None => Correction::None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EngagementArgs {
    /// Fit bundle directory.
    #[arg(long)]
    pub fit: PathBuf,
    /// Prior bundle directory.
    #[arg(long)]
    pub prior: PathBuf,
    /// Effect sizes in prior standard deviations. Repeatable.
    #[arg(long = "z", default_values_t = vec![0.0, 1.0, 2.0, 3.0])]
    pub zs: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "bonferroni")]
    pub correction: CorrectionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapSourceArg {
    Template,
    PriorMean,
    Subject,
}

#[derive(Debug, Args, Serialize)]
pub struct OverlapArgs {
    /// Template file, prior bundle directory or fit bundle directory, per --source.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "template")]
    pub source: OverlapSourceArg,
    #[arg(long, value_enum, default_value = "continuous-maps")]
    pub template_kind: KindArg,
    /// z-score threshold for continuous maps.
    #[arg(long, default_value_t = 2.0)]
    pub z: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryArg {
    Blocks,
    GaussianBumps,
}

impl From<GeometryArg> for Geometry {
    fn from(g: GeometryArg) -> Self {
        match g {
            GeometryArg::Blocks => Geometry::Blocks,
            GeometryArg::GaussianBumps => Geometry::GaussianBumps,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 5)]
    pub q: usize,
    #[arg(long, default_value_t = 1000)]
    pub v: usize,
    #[arg(long, default_value_t = 1200)]
    pub t: usize,
    #[arg(long, default_value_t = 10)]
    pub n_subjects: usize,
    #[arg(long, default_value_t = 1.5)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 0.72)]
    pub tr: f64,
    #[arg(long, value_enum, default_value = "blocks")]
    pub geometry: GeometryArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}
