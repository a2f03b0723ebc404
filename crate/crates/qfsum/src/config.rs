//! Session configuration: one TOML file covering every tunable, with each
//! section mirroring the corresponding config struct's field names exactly.
//!
//! ```toml
//! [model]        # architecture (ModelConfig)
//! [train]        # optimization (TrainConfig); `temperature` is the single τ
//! [segmenter]    # windowing (SegmenterConfig)
//! [contrastive]  # batch-building extras (everything but τ)
//! [data]         # dataset and artifact locations
//! [validation]   # per-epoch greedy-generation settings
//! ```
//!
//! Every field has a default, so an empty file (or no file) is a complete
//! configuration. Unknown keys are rejected — a typo fails loudly instead of
//! silently falling back to a default. Command-line flags override file
//! values, which override defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveOptions, EmbeddingSource};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::segmenter::{SegmenterConfig, RESERVED_TOKENS};
use crate::trainer::TrainConfig;

fn default_train_path() -> PathBuf {
    PathBuf::from("data/train.jsonl")
}
fn default_validation_path() -> PathBuf {
    PathBuf::from("data/validation.jsonl")
}
fn default_labels_path() -> PathBuf {
    PathBuf::from("data/labels.jsonl")
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Dataset and artifact locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Normalized training split (line-delimited instances).
    pub train_path: PathBuf,
    /// Normalized validation split.
    pub validation_path: PathBuf,
    /// Segment labels for the training split.
    pub labels_path: PathBuf,
    /// Optional vocabulary file (one token per line, id order). When absent,
    /// commands build the vocabulary from the training data they operate on.
    pub vocabulary_path: Option<PathBuf>,
    /// Where checkpoints, reports, logs, and manifests land.
    pub output_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            train_path: default_train_path(),
            validation_path: default_validation_path(),
            labels_path: default_labels_path(),
            vocabulary_path: None,
            output_dir: default_output_dir(),
        }
    }
}

fn default_max_length() -> usize {
    128
}

/// Greedy-generation settings for validation and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    /// Token cap for generated summaries.
    pub max_length: usize,
}

impl Default for ValidationConfig {
    fn default() -> ValidationConfig {
        ValidationConfig {
            max_length: default_max_length(),
        }
    }
}

fn default_generation_cap() -> usize {
    128
}

/// Contrastive batch-building knobs. The temperature τ is deliberately not
/// here — it lives in `[train]` as `temperature`, the single source of τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Optional probability floor for negative candidates.
    pub negative_min_prob: Option<f64>,
    /// Where instance embeddings come from: the teacher-forced pass or a
    /// fresh greedy generation.
    pub embedding_source: EmbeddingSource,
    /// Generation cap when `embedding_source` is `generated`.
    pub generation_cap: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> ContrastiveConfig {
        ContrastiveConfig {
            negative_min_prob: None,
            embedding_source: EmbeddingSource::TeacherForced,
            generation_cap: default_generation_cap(),
        }
    }
}

impl ContrastiveConfig {
    /// Combine with the configured temperature into runtime options.
    pub fn to_options(&self, temperature: f64) -> ContrastiveOptions {
        ContrastiveOptions {
            temperature,
            negative_min_prob: self.negative_min_prob,
            embedding_source: self.embedding_source,
            generation_cap: self.generation_cap,
        }
    }
}

/// The complete session configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub segmenter: SegmenterConfig,
    pub contrastive: ContrastiveConfig,
    pub data: DataConfig,
    pub validation: ValidationConfig,
}

impl SessionConfig {
    /// Parse a TOML document; `origin` names the source in error messages.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<SessionConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    /// Read and parse a configuration file.
    pub fn load(path: &Path) -> Result<SessionConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SessionConfig::from_toml_str(&text, &path.display().to_string())
    }

    /// Serialize back to TOML (used for resolved-config snapshots).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("a config that deserialized also serializes")
    }

    /// Check every invariant that does not depend on the corpus. A
    /// `vocab_size` of 0 means "resolve from the vocabulary at run time"
    /// and is validated against a placeholder here.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.segmenter.validate()?;
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = RESERVED_TOKENS.len();
        }
        model.validate()?;
        if let Some(min_prob) = self.contrastive.negative_min_prob {
            if !(0.0..=1.0).contains(&min_prob) {
                return Err(Error::Config(format!(
                    "negative_min_prob must lie in [0, 1], got {min_prob}"
                )));
            }
        }
        if self.contrastive.generation_cap == 0 {
            return Err(Error::Config("generation_cap must be at least 1".into()));
        }
        if self.validation.max_length == 0 {
            return Err(Error::Config(
                "validation max_length must be at least 1".into(),
            ));
        }
        let longest = self.segmenter.max_input_length();
        if longest > self.model.max_positions {
            return Err(Error::Config(format!(
                "segment_length {} + max_query_length {} + 3 markers = {longest} tokens \
                 exceeds max_positions {}",
                self.segmenter.segment_length,
                self.segmenter.max_query_length,
                self.model.max_positions
            )));
        }
        Ok(())
    }
}
