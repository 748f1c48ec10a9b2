use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::{Arch, MergeKind, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Translate,
}

/// Model shape without the vocabulary and class counts, which come from the
/// data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    SyntheticClassification {
        num_classes: usize,
        per_class: usize,
        seed: u64,
    },
    SyntheticTranslation {
        n: usize,
        seed: u64,
    },
    /// JSONL splits; lines are `{"text", "label"}` for classification and
    /// `{"source", "target"}` for translation. Relative paths resolve
    /// against the config file's directory.
    Jsonl {
        train: PathBuf,
        valid: PathBuf,
        test: PathBuf,
    },
}

fn default_epochs() -> usize {
    10
}

fn default_batch_size() -> usize {
    16
}

fn default_learning_rate() -> f64 {
    3e-4
}

fn default_vocab_size() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelHyper,
    #[serde(default)]
    pub strategies: Vec<MergeKind>,
    /// Merge positions; `null` stands for the unmerged baseline, which every
    /// sweep runs regardless.
    #[serde(default)]
    pub positions: Vec<Option<usize>>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// BPE vocabulary budget, special tokens included.
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    pub data: DataSource,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate, resolving relative data paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let DataSource::Jsonl { train, valid, test } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [train, valid, test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if let Some(p) = self.merge_positions().into_iter().find(|&p| p > self.model.layers) {
            return Err(Error::config(format!(
                "merge position {p} exceeds the layer count {}",
                self.model.layers
            )));
        }
        if !self.merge_positions().is_empty() && self.strategies.is_empty() {
            return Err(Error::config("merge positions given without any strategy"));
        }
        match (&self.task, &self.data) {
            (Task::Classify, DataSource::SyntheticTranslation { .. })
            | (Task::Translate, DataSource::SyntheticClassification { .. }) => {
                return Err(Error::config("the data source does not match the task"));
            }
            _ => {}
        }
        self.model_config(self.vocab_size, 2).validate()
    }

    /// Distinct merge positions in the order given, without the baseline.
    pub fn merge_positions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for p in self.positions.iter().flatten() {
            if !out.contains(p) {
                out.push(*p);
            }
        }
        out
    }

    pub fn model_config(&self, vocab_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            arch: match self.task {
                Task::Classify => Arch::EncoderOnly,
                Task::Translate => Arch::EncoderDecoder,
            },
            layers: self.model.layers,
            d_model: self.model.d_model,
            heads: self.model.heads,
            d_ff: self.model.d_ff,
            vocab_size,
            max_len: self.model.max_len,
            num_classes: match self.task {
                Task::Classify => num_classes,
                Task::Translate => 0,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{
        "task": "classify",
        "model": {"layers": 2, "d_model": 16, "heads": 2, "d_ff": 32, "max_len": 64},
        "strategies": ["mean", "learnable"],
        "positions": [0, 1, 2, null],
        "seeds": [1, 2, 3],
        "data": {"kind": "synthetic_classification", "num_classes": 4, "per_class": 40, "seed": 7}
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_json(EXAMPLE).unwrap();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (10, 16, 3e-4));
        assert_eq!(c.merge_positions(), vec![0, 1, 2]);
        assert_eq!(c.model_config(100, 4).arch, Arch::EncoderOnly);
    }

    #[test]
    fn rejects_bad_grids() {
        let bad = EXAMPLE.replace("[0, 1, 2, null]", "[3]");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config(_))));
        let bad = EXAMPLE.replace("[1, 2, 3]", "[]");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = EXAMPLE.replace("\"classify\"", "\"translate\"");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }
}
