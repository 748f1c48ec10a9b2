//! JSON checkpoints: the model configuration, merge placement and every
//! parameter tensor keyed by name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{MergeSpec, ModelConfig};
use super::model::Transformer;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "subtoken-merge-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub merge: Option<MergeSpec>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Transformer) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            merge: model.merge,
            tensors: model
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn into_model(mut self) -> Result<Transformer> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let template = Transformer::new(self.config.clone(), self.merge, 0)?;
        let mut missing = Vec::new();
        let mut params = template.params.clone();
        params.for_each_mut(|name, slot| match self.tensors.remove(name) {
            Some(t) => *slot = t,
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::Parse(format!("checkpoint lacks tensors {missing:?}")));
        }
        if let Some(extra) = self.tensors.keys().next() {
            return Err(Error::Parse(format!("checkpoint has unknown tensor {extra}")));
        }
        Transformer::from_parts(self.config, self.merge, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::config::{Arch, MergeKind};

    fn model() -> Transformer {
        let config = ModelConfig {
            arch: Arch::EncoderDecoder,
            layers: 1,
            d_model: 4,
            heads: 2,
            d_ff: 8,
            vocab_size: 9,
            max_len: 6,
            num_classes: 0,
        };
        Transformer::new(config, Some(MergeSpec::new(MergeKind::Learnable, 1)), 11).unwrap()
    }

    #[test]
    fn round_trip_through_file() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::from_model(&m).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn missing_and_extra_tensors_are_errors() {
        let mut c = Checkpoint::from_model(&model());
        let w = c.tensors.remove("merge_w").unwrap();
        assert!(matches!(c.clone().into_model(), Err(Error::Parse(_))));
        c.tensors.insert("merge_w".into(), w);
        c.tensors.insert("bogus".into(), Tensor::scalar(1.0));
        assert!(matches!(c.into_model(), Err(Error::Parse(_))));
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mut c = Checkpoint::from_model(&model());
        c.tensors.insert("merge_w".into(), Tensor::zeros(&[5]));
        assert!(c.into_model().is_err());
    }
}
