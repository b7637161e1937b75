//! Configuration, scenario runner and the published-value validation suite
//! behind the command-line front end.

mod config;
mod scenario;
mod validate;

use std::path::PathBuf;

use thiserror::Error;

use crate::comb::CombError;
use crate::dd::DdError;
use crate::experiment::ExperimentError;
use crate::pulses::PulseError;
use crate::spectra::SpectraError;

pub use config::{
    Config, FieldPreset, PipelinePreset, TensorPair, TensorPreset, TransportPreset, CONFIG_ROOT_ENV,
    DEFAULT_CONFIG,
};
pub use scenario::{
    builtin_scenarios, derive_seed, load_scenario, run_scenario, write_outputs, Axis, RunOptions,
    Scenario, ScenarioKind, ScenarioOptions, ScenarioOutput, ScenarioPresets, Sweep,
};
pub use validate::{
    registry, validate, Check, PaperConstant, Quantity, TolerancePolicy, ValidationEntry,
    ValidationReport,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("schema error in {origin}: {message}")]
    Schema { origin: String, message: String },
    #[error("{kind} preset `{name}` not found")]
    PresetNotFound { kind: &'static str, name: String },
    #[error("invalid scenario `{id}`: {message}")]
    InvalidScenario { id: String, message: String },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    Comb(#[from] CombError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Dd(#[from] DdError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
