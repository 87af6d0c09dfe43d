//! The run configuration file.
//!
//! One TOML file drives a whole experiment. Every section and key is
//! optional; missing values take the defaults below. Precedence is file,
//! then `MVITIME_DATA_DIR` / `MVITIME_OUT_DIR`, then command-line flags.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::ingest::{IngestOptions, Subset};
use crate::model::{CombineMode, ModelConfig};
use crate::train::{StageConfig, TrainConfig};

use super::PipelineError;

pub const DATA_DIR_ENV: &str = "MVITIME_DATA_DIR";
pub const OUT_DIR_ENV: &str = "MVITIME_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub ingest: IngestSection,
    pub augment: AugmentConfig,
    pub contrastive: ContrastiveSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Run on one thread and leave wall-clock times out of reports, so
    /// re-running reproduces every report byte for byte.
    pub deterministic: bool,
    pub subset: Subset,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            deterministic: true,
            subset: Subset::Edf20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub channel: String,
    /// Trim leading and trailing Wake down to `trim_min` minutes.
    pub trim: bool,
    pub trim_min: usize,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            channel: "EEG Fpz-Cz".into(),
            trim: true,
            trim_min: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveSection {
    pub temperature: f64,
    /// Length of the cross-subject feature; the epoch length when absent.
    pub pca_dim: Option<usize>,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            pca_dim: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Xs,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub projection_dim: Option<usize>,
}

impl ModelSection {
    pub fn build(&self, input_length: usize) -> ModelConfig {
        let mut c = match self.preset {
            Preset::Xs => ModelConfig::xs(input_length),
            Preset::Tiny => ModelConfig::tiny(input_length),
        };
        if let Some(d) = self.projection_dim {
            c.projection_dim = d;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub momentum: f64,
    pub weight_decay: f64,
    pub combine_alpha: f64,
    pub combine_mode: CombineMode,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Save a resumable checkpoint every this many steps; 0 only saves at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            pretrain: t.pretrain,
            finetune: t.finetune,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            combine_alpha: t.combine_alpha,
            combine_mode: CombineMode::Full,
            grad_clip: t.grad_clip.unwrap_or(0.0),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Subject-wise folds for cross-validated experiments.
    pub folds: usize,
    /// Subjects kept out of every training stage and used for testing.
    pub held_out: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            folds: 20,
            held_out: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Subjects the three configurations are cross-validated on; every
    /// subject not in `extra_subjects` when empty.
    pub eval_subjects: Vec<String>,
    /// Disjoint subjects used only for the large pre-training set.
    pub extra_subjects: Vec<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply the data and output directory environment overrides.
    pub fn apply_env(&mut self) {
        if let Some(v) = std::env::var_os(DATA_DIR_ENV) {
            self.run.data_dir = v.into();
        }
        if let Some(v) = std::env::var_os(OUT_DIR_ENV) {
            self.run.out_dir = v.into();
        }
    }

    /// SHA-256 over the configuration with the output directory blanked, so
    /// moving the output tree keeps run names stable.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.run.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !self.run.data_dir.is_dir() {
            return bad(format!("data directory {} does not exist", self.run.data_dir.display()));
        }
        if self.eval.folds < 2 {
            return bad(format!("eval.folds must be at least 2, got {}", self.eval.folds));
        }
        if self.contrastive.pca_dim == Some(0) {
            return bad("contrastive.pca_dim must be positive".into());
        }
        if !(self.train.grad_clip >= 0.0) {
            return bad(format!("train.grad_clip must be non-negative, got {}", self.train.grad_clip));
        }
        self.train_config().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        // length-dependent checks happen once the data is loaded
        self.augment
            .validate(usize::MAX)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            channel: self.ingest.channel.clone(),
            trim_min: self.ingest.trim.then_some(self.ingest.trim_min),
            subset: self.run.subset.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            pretrain: t.pretrain,
            finetune: t.finetune,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            temperature: self.contrastive.temperature,
            combine_alpha: t.combine_alpha,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            seed: self.run.seed,
        }
    }
}
