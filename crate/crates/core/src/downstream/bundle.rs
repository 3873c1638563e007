use std::path::Path;

use serde_json::json;

use super::classify::LabelMaps;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ModelConfig, ModelView, ParameterStore};
use crate::pretrain::{store_from, vocab_from_checkpoint};
use crate::textpipe::Vocabulary;

/// Inference-side view of a checkpoint: the online parameters, vocabulary and, for
/// classifiers, the label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    /// `pretrain`, `retrieval`, `classify` or `tmir`.
    pub kind: String,
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub vocab: Vocabulary,
    pub labels: Option<LabelMaps>,
}

impl ModelBundle {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let params = store_from(ck.section("online."));
        if params.is_empty() {
            return Err(Error::Format("checkpoint holds no online parameters".into()));
        }
        let kind = ck.metadata.get("kind").and_then(|v| v.as_str()).unwrap_or("pretrain").to_string();
        let labels = match ck.metadata.get("labels") {
            Some(v) => Some(serde_json::from_value(v.clone())?),
            None => None,
        };
        Ok(Self {
            kind,
            config: ck.config.clone(),
            params,
            vocab: vocab_from_checkpoint(ck)?,
            labels,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.config.clone());
        ck.put_section("online.", self.params.iter());
        ck.metadata.insert("kind".into(), json!(self.kind));
        ck.metadata.insert("vocab".into(), json!(self.vocab.tokens()));
        if let Some(l) = &self.labels {
            ck.metadata.insert("labels".into(), serde_json::to_value(l)?);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn view(&self) -> ModelView<'_> {
        ModelView::new(&self.config, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let vocab = Vocabulary::build("a b c".split(' '));
        let config = ModelConfig { vocab_size: vocab.len(), ..ModelConfig::tiny() };
        let params = ParameterStore::init(&config, &mut ChaCha8Rng::seed_from_u64(1));
        let b = ModelBundle {
            kind: "classify".into(),
            config,
            params,
            vocab,
            labels: Some(LabelMaps { categories: vec!["a".into()], subcategories: vec!["b".into(), "c".into()] }),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fsap");
        b.save(&p).unwrap();
        assert_eq!(ModelBundle::load(&p).unwrap(), b);
    }
}
