//! Bayesian brain mapping: population-derived priors on network topography
//! and functional connectivity, and single-subject posterior estimation.
//!
//! The pipeline is
//!
//! 1. [`ingest`]: load BOLD matrices, censor high-motion volumes, preprocess.
//! 2. [`dualreg`]: noisy per-session maps and time courses from a template.
//! 3. [`prior_spatial`] and [`prior_fc`]: population priors from training sessions.
//! 4. [`fit`]: EM / variational fit of one subject against the priors.
//! 5. [`inference`]: significant engagement masks from posterior moments.
//!
//! [`metrics`] holds overlap and reliability utilities and [`synth`]
//! simulates populations from the generative model.

// Negated comparisons in this crate double as NaN checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod dualreg;
pub mod error;
pub mod fc_posterior;
pub mod fit;
pub mod inference;
pub mod ingest;
pub mod linalg;
pub mod metrics;
pub mod prior_fc;
pub mod prior_spatial;
pub mod rng;
pub mod synth;

pub use dualreg::{dual_regression, stage1, stage2, DualRegResult};
pub use error::{BbmError, Result};
pub use fit::{fit_subject, posterior_location, FcPriorChoice, FitConfig, NoiseModel, SubjectFit};
pub use inference::{engagements, Correction, EngagementResult};
pub use ingest::{BoldMatrix, MotionParams, ScaleMode, Template, TemplateKind};
pub use metrics::{dice, reliability, threshold_zmap, OverlapMatrix, OverlapSource};
pub use prior_fc::{CholeskyStats, FcKind, FcPrior, IwParams};
pub use prior_spatial::{estimate_spatial_prior, SpatialPrior};
pub use synth::{simulate_population, SynthConfig, SynthPopulation};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
