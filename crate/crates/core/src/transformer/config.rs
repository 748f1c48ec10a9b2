use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    EncoderOnly,
    EncoderDecoder,
}

/// Shape of the model. The decoder of an encoder-decoder model has as many
/// layers as the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Classification classes; ignored by encoder-decoder models.
    #[serde(default)]
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layers must be >= 1"));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::config("d_ff, vocab_size and max_len must be >= 1"));
        }
        if self.arch == Arch::EncoderOnly && self.num_classes < 2 {
            return Err(Error::config("an encoder-only classifier needs num_classes >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    Mean,
    Learnable,
}

impl MergeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeKind::Mean => "mean",
            MergeKind::Learnable => "learnable",
        }
    }
}

impl std::str::FromStr for MergeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(MergeKind::Mean),
            "learnable" => Ok(MergeKind::Learnable),
            other => Err(Error::config(format!(
                "unknown merge strategy {other:?} (expected mean or learnable)"
            ))),
        }
    }
}

/// Where and how to merge. `position` 0 merges the embeddings; `l >= 1`
/// merges the output of encoder layer `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub strategy: MergeKind,
    pub position: usize,
}

impl MergeSpec {
    pub fn new(strategy: MergeKind, position: usize) -> Self {
        Self { strategy, position }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.position > config.layers {
            return Err(Error::config(format!(
                "merge position {} exceeds the layer count {}",
                self.position, config.layers
            )));
        }
        Ok(())
    }
}
