//! Experiment orchestration: configuration files, the compounding-error
//! study, normalized scoring against calibrated references, wall-clock
//! timing benchmarks, and CSV/SVG report emission.

mod bench;
mod config;
mod experiment;
mod rmsd;
mod score;
mod svg;

pub use bench::{bench_timing, TimingResult, WARMUP_STEPS};
pub use config::{ConfigMap, ExperimentConfig, PlannerChoice};
pub use experiment::{
    run_experiment, with_agent, EpisodeResult, ExperimentAssets, ExperimentReport,
};
pub use rmsd::{rmsd_defaults, rmsd_per_horizon, rmsd_study, RmsdCurve};
pub use score::{
    calibrate_refs, load_refs, normalized_score, save_refs, RandomAgent, ScoreRefs,
    ScriptedAgent, REF_EPISODES,
};
pub use svg::LinePlot;

use crate::adapt::AdaptError;
use crate::data::DataError;
use crate::envs::EnvError;
use crate::models::ModelError;
use crate::planners::PlannerError;
use thiserror::Error;

/// Errors from experiment orchestration.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// Propagated planning failure.
    #[error(transparent)]
    Planner(#[from] PlannerError),
    /// Propagated model failure.
    #[error(transparent)]
    Model(#[from] ModelError),
    /// Propagated dataset failure.
    #[error(transparent)]
    Data(#[from] DataError),
    /// Propagated environment failure.
    #[error(transparent)]
    Env(#[from] EnvError),
    /// Propagated adaptation failure.
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    /// File-system failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A config file line that does not parse, with its location.
    #[error("{path} line {line}: {message}")]
    ConfigSyntax {
        /// Offending file.
        path: String,
        /// 1-based line number.
        line: usize,
        /// What went wrong.
        message: String,
    },
    /// A config key that is missing or holds an unusable value.
    #[error("config key `{key}`: {message}")]
    ConfigKey {
        /// Qualified `section.key` name.
        key: String,
        /// What went wrong.
        message: String,
    },
    /// Score references for an env are not calibrated yet.
    #[error(
        "no score references for `{env}` in {path}; run `dmpc calibrate-refs` first"
    )]
    MissingRefs {
        /// Env whose references are absent.
        env: String,
        /// Reference file that was consulted.
        path: String,
    },
    /// Anything else.
    #[error("{0}")]
    Invalid(String),
}
