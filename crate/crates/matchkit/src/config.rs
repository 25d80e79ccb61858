//! Run configuration files: strict TOML with every default materialized.
//!
//! A parsed file is resolved into a [`ResolvedConfig`] in which no value is
//! implicit; serializing that back to TOML gives the canonical text whose
//! hash ties checkpoints to the run that produced them. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use matchkit_core::context::FceConfig;
use matchkit_core::encoder::{ConvEmbedConfig, EncoderConfig, MlpEmbedConfig, ModelSpec};
use matchkit_core::train::{BaselineConfig, OptimConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

// ---------------------------------------------------------------------------
// On-disk schema (everything optional, strict keys)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// "synthetic", "synthetic-file" or "image-tree".
    pub kind: Option<String>,
    pub path: Option<String>,
    pub classes: Option<u32>,
    pub dim: Option<u32>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
    pub augment_rotations: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_classes: Option<u32>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub ways: Option<u32>,
    pub shots: Option<u32>,
    pub batch_per_class: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "mlp" or "conv".
    pub encoder: Option<String>,
    pub hidden_dims: Option<Vec<u32>>,
    pub embed_dim: Option<u32>,
    pub fce: Option<bool>,
    pub fce_steps: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// "matching" or "baseline-classifier".
    pub objective: Option<String>,
    pub episodes: Option<u64>,
    pub epochs: Option<u32>,
    pub minibatch: Option<u32>,
    pub learning_rate: Option<f64>,
    pub eval_every: Option<u64>,
    pub eval_episodes: Option<u32>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<u64>,
}

// ---------------------------------------------------------------------------
// Resolved (canonical) schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    SyntheticFile,
    ImageTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum Objective {
    Matching,
    BaselineClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub dataset: ResolvedDataset,
    pub split: ResolvedSplit,
    pub task: ResolvedTask,
    pub model: ResolvedModel,
    pub train: ResolvedTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedDataset {
    pub kind: DatasetKind,
    pub path: String,
    pub classes: u32,
    pub dim: u32,
    pub noise: f64,
    pub seed: u64,
    pub augment_rotations: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedSplit {
    pub train_classes: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedTask {
    pub ways: u32,
    pub shots: u32,
    pub batch_per_class: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedModel {
    pub encoder: String,
    pub hidden_dims: Vec<u32>,
    pub embed_dim: u32,
    pub fce: bool,
    pub fce_steps: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedTrain {
    pub objective: Objective,
    pub episodes: u64,
    pub epochs: u32,
    pub minibatch: u32,
    pub learning_rate: f64,
    pub eval_every: u64,
    pub eval_episodes: u32,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(toml::from_str(&text)?)
    }

    /// Fills every default and validates cross-field constraints.
    pub fn resolve(&self) -> Result<ResolvedConfig, ConfigError> {
        let kind = match self.dataset.kind.as_deref() {
            None | Some("synthetic") => DatasetKind::Synthetic,
            Some("synthetic-file") => DatasetKind::SyntheticFile,
            Some("image-tree") => DatasetKind::ImageTree,
            Some(other) => return Err(invalid(format!("unknown dataset kind `{other}`"))),
        };
        match kind {
            DatasetKind::Synthetic => {
                if self.dataset.path.is_some() {
                    return Err(invalid("dataset.path is not used for synthetic data"));
                }
            }
            DatasetKind::SyntheticFile | DatasetKind::ImageTree => {
                if self.dataset.path.is_none() {
                    return Err(invalid("dataset.path is required for this dataset kind"));
                }
                for (field, set) in [
                    ("classes", self.dataset.classes.is_some()),
                    ("dim", self.dataset.dim.is_some()),
                    ("noise", self.dataset.noise.is_some()),
                    ("seed", self.dataset.seed.is_some()),
                ] {
                    if set {
                        return Err(invalid(format!(
                            "dataset.{field} only applies to generated synthetic data"
                        )));
                    }
                }
            }
        }
        if kind != DatasetKind::ImageTree && self.dataset.augment_rotations == Some(true) {
            return Err(invalid("rotation augmentation needs an image dataset"));
        }

        let encoder = match self.model.encoder.as_deref() {
            None | Some("mlp") => "mlp",
            Some("conv") => "conv",
            Some(other) => return Err(invalid(format!("unknown encoder `{other}`"))),
        };
        if encoder == "conv" && kind != DatasetKind::ImageTree {
            return Err(invalid("the conv encoder needs an image dataset"));
        }
        if encoder == "mlp" && kind == DatasetKind::ImageTree {
            return Err(invalid("the mlp encoder needs a vector dataset"));
        }

        let objective = match self.train.objective.as_deref() {
            None | Some("matching") => Objective::Matching,
            Some("baseline-classifier") => Objective::BaselineClassifier,
            Some(other) => return Err(invalid(format!("unknown objective `{other}`"))),
        };

        let dim = self.dataset.dim.unwrap_or(16);
        let resolved = ResolvedConfig {
            dataset: ResolvedDataset {
                kind,
                path: self.dataset.path.clone().unwrap_or_default(),
                classes: self.dataset.classes.unwrap_or(40),
                dim,
                noise: self.dataset.noise.unwrap_or(0.1),
                seed: self.dataset.seed.unwrap_or(7),
                augment_rotations: self.dataset.augment_rotations.unwrap_or(false),
            },
            split: ResolvedSplit {
                train_classes: self.split.train_classes.unwrap_or(30),
                seed: self.split.seed.unwrap_or(0),
            },
            task: ResolvedTask {
                ways: self.task.ways.unwrap_or(5),
                shots: self.task.shots.unwrap_or(1),
                batch_per_class: self.task.batch_per_class.unwrap_or(2),
            },
            model: ResolvedModel {
                encoder: encoder.to_string(),
                hidden_dims: self.model.hidden_dims.clone().unwrap_or_else(|| vec![64]),
                embed_dim: self.model.embed_dim.unwrap_or(64),
                fce: self.model.fce.unwrap_or(false),
                fce_steps: self.model.fce_steps.unwrap_or(5),
            },
            train: ResolvedTrain {
                objective,
                episodes: self.train.episodes.unwrap_or(2000),
                epochs: self.train.epochs.unwrap_or(5),
                minibatch: self.train.minibatch.unwrap_or(64),
                learning_rate: self.train.learning_rate.unwrap_or(1e-3),
                eval_every: self.train.eval_every.unwrap_or(0),
                eval_episodes: self.train.eval_episodes.unwrap_or(200),
                seed: self.train.seed.unwrap_or(0),
                checkpoint_every: self.train.checkpoint_every.unwrap_or(0),
            },
        };
        resolved.validate()?;
        Ok(resolved)
    }
}

impl ResolvedConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_spec()
            .validate()
            .and(self.train_config().validate())
            .map_err(|e| invalid(e.to_string()))
    }

    /// Canonical text: serialized resolved configuration.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }

    /// Hash of the trajectory-relevant configuration: the stopping and
    /// reporting knobs (episode budget, evaluation cadence, checkpoint
    /// cadence) are zeroed first, so a checkpoint can be resumed with a
    /// longer budget but never under a different dataset, split, task,
    /// model, optimizer or seed.
    pub fn trajectory_hash(&self) -> u64 {
        let mut c = self.clone();
        c.train.episodes = 0;
        c.train.eval_every = 0;
        c.train.eval_episodes = 0;
        c.train.checkpoint_every = 0;
        matchkit_core::checkpoint::fnv1a64(c.canonical_text().as_bytes())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let encoder = if self.model.encoder == "conv" {
            EncoderConfig::Conv(ConvEmbedConfig {
                in_channels: 1,
                input_hw: 28,
                blocks: 4,
                filters: self.model.embed_dim as usize,
            })
        } else {
            EncoderConfig::Mlp(MlpEmbedConfig {
                input_dim: self.dataset.dim as usize,
                hidden_dims: self.model.hidden_dims.iter().map(|&d| d as usize).collect(),
                output_dim: self.model.embed_dim as usize,
            })
        };
        ModelSpec {
            encoder,
            fce: self.model.fce.then_some(FceConfig {
                steps: self.model.fce_steps as usize,
            }),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            ways: self.task.ways as usize,
            shots: self.task.shots as usize,
            batch_per_class: self.task.batch_per_class as usize,
            episodes_total: self.train.episodes,
            optim: OptimConfig {
                lr: self.train.learning_rate as matchkit_core::Real,
                ..OptimConfig::default()
            },
            eval_every: self.train.eval_every,
            eval_episodes: self.train.eval_episodes as usize,
            seed: self.train.seed,
            model: self.model_spec(),
            eval_ways: None,
            eval_shots: None,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            epochs: self.train.epochs as usize,
            minibatch: self.train.minibatch as usize,
            optim: OptimConfig {
                lr: self.train.learning_rate as matchkit_core::Real,
                ..OptimConfig::default()
            },
            seed: self.train.seed,
        }
    }
}

/// Parses canonical text back into a resolved configuration (used when
/// rebuilding a model from a checkpoint).
pub fn parse_canonical(text: &str) -> Result<ResolvedConfig, ConfigError> {
    let resolved: ResolvedConfig = toml::from_str(text)?;
    resolved.validate()?;
    Ok(resolved)
}
