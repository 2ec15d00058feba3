//! Declarative run configuration: one TOML file covering data synthesis,
//! model shape, training schedule, and artifact paths. Command-line flags
//! override file values; file values override defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// `[model]` section. Mirrors the model configuration except that
/// `ffn_hidden` may be omitted, in which case it follows `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub num_conv_layers: usize,
    pub conv_kernel: usize,
    pub num_heads: usize,
    pub ffn_hidden: Option<usize>,
    pub param_init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d: m.d,
            num_conv_layers: m.num_conv_layers,
            conv_kernel: m.conv_kernel,
            num_heads: m.num_heads,
            ffn_hidden: None,
            param_init_seed: m.param_init_seed,
        }
    }
}

impl ModelSection {
    /// Concrete model configuration; an absent `ffn_hidden` matches `d`.
    pub fn resolve(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            num_conv_layers: self.num_conv_layers,
            conv_kernel: self.conv_kernel,
            num_heads: self.num_heads,
            ffn_hidden: self.ffn_hidden.unwrap_or(self.d),
            param_init_seed: self.param_init_seed,
        }
    }
}

/// `[paths]` section: where artifacts live. Any entry may instead be given
/// on the command line.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset manifest (JSONL) for training or evaluation.
    pub dataset: Option<PathBuf>,
    /// Model checkpoint to load or resume from.
    pub checkpoint: Option<PathBuf>,
    /// Output directory for generated artifacts.
    pub out_dir: Option<PathBuf>,
}

/// Complete declarative run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SyntheticSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Parse a TOML config file. Unknown keys are rejected so typos cannot
    /// silently fall back to defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// File config when a path is given, defaults otherwise.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => Self::from_file(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.resolve().validate()?;
        self.train.validate()
    }
}
