//! Run configuration: a JSON document validated strictly (unknown keys are
//! rejected) before any work starts.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use slicerec_core::evaluation::Method;
use slicerec_core::model::ModelConfig;
use slicerec_core::synthgen::GenSpec;
use slicerec_core::training::{AugmentSpec, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gen: Option<GenSection>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub volumes: Vec<GenEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenEntry {
    /// Output file stem; the volume lands in `<out>/<name>.vol`.
    pub name: String,
    pub spec: GenSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Volume files (with ID sections) forming the training pool.
    pub volumes: Vec<PathBuf>,
    pub config: TrainConfig,
    #[serde(default)]
    pub augment: Option<AugmentSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Volume files (with ID sections) to partition and score.
    pub volumes: Vec<PathBuf>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub segment_shape: Option<[usize; 3]>,
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Runtime(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn default_empty() -> RunConfig {
        RunConfig {
            seed: 0,
            gen: None,
            model: None,
            train: None,
            eval: None,
        }
    }
}
