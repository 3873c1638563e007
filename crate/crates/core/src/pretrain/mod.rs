//! Pre-training: batch assembly, the five-loss step, momentum encoder, feature queue,
//! AdamW and checkpointed training runs.

mod batch;
mod momentum;
mod optim;
mod queue;
mod step;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use batch::{build_batch, BatchBundle, Target, TextResources};
pub use momentum::{momentum_update, MomentumPair};
pub use optim::{decays, AdamW, AdamWConfig};
pub use queue::FeatureQueue;
pub use step::{
    forward_losses, global_features, image_refs, in_batch_r1, momentum_features, pretrain_step, sample_negatives,
    itm_part, ForwardOutput, ItmNegatives, LossSet, MomentumFeatures, NegativeSampling, StepSettings, StepState, TEMP_MAX, TEMP_MIN,
};

use crate::data_io::{FashionRecord, RawImage, Split};
use crate::error::{bail, Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ModelConfig, ParameterStore};
use crate::objectives::{FsisForm, LossReport};
use crate::taxonomy::CategoryTable;
use crate::textpipe::{LexicalResource, Vocabulary};

/// Optimization and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: final checkpoint only).
    pub checkpoint_every: usize,
    pub fsis_form: FsisForm,
    pub negative_sampling: NegativeSampling,
    pub prompts_per_record: usize,
    pub mlm_ratio: f64,
    /// Train the contrastive temperature; fixed at `tau_init` otherwise.
    pub learn_temperature: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// CPU-scale run used with [`ModelConfig::desk`].
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            fsis_form: FsisForm::PerSample,
            negative_sampling: NegativeSampling::Similarity,
            prompts_per_record: 1,
            mlm_ratio: 0.15,
            learn_temperature: true,
        }
    }

    /// Published optimizer settings.
    pub fn full_scale() -> Self {
        Self {
            lr: 6e-5,
            batch_size: 16,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(InvalidConfig, "lr must be positive, got {}", self.lr);
        }
        if self.batch_size < 2 {
            bail!(InvalidConfig, "batch_size must be >= 2, got {}", self.batch_size);
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(InvalidConfig, "invalid weight decay or betas");
        }
        if self.adam_eps <= 0.0 {
            bail!(InvalidConfig, "adam_eps must be positive");
        }
        if self.prompts_per_record == 0 {
            bail!(InvalidConfig, "prompts_per_record must be >= 1");
        }
        if !(self.mlm_ratio > 0.0 && self.mlm_ratio < 1.0) {
            bail!(InvalidConfig, "mlm_ratio must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Per-step generator: the global seed with the step as stream id.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Everything a training run carries between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub state: StepState,
    pub step: u64,
}

impl Trainer {
    /// Fresh parameters drawn from `train.seed`; `model.vocab_size` is taken from `vocab`.
    pub fn new(mut model: ModelConfig, train: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        model.vocab_size = vocab.len();
        model.validate()?;
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let online = ParameterStore::init(&model, &mut rng);
        let optimizer = AdamW::new(train.adamw(), &online);
        let state = StepState {
            pair: MomentumPair::new(online, model.momentum),
            queue: FeatureQueue::new(model.queue_size, model.d),
            optimizer,
        };
        Ok(Self {
            model,
            train,
            vocab,
            state,
            step: 0,
        })
    }

    /// Starts a fresh optimizer and queue from existing online parameters; the momentum
    /// encoder starts as a copy of them.
    pub fn from_params(model: ModelConfig, train: TrainConfig, vocab: Vocabulary, online: ParameterStore) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let optimizer = AdamW::new(train.adamw(), &online);
        let state = StepState {
            pair: MomentumPair::new(online, model.momentum),
            queue: FeatureQueue::new(model.queue_size, model.d),
            optimizer,
        };
        Ok(Self {
            model,
            train,
            vocab,
            state,
            step: 0,
        })
    }

    pub fn settings(&self) -> StepSettings {
        StepSettings {
            fsis_form: self.train.fsis_form,
            negatives: self.train.negative_sampling,
            distill_weight: self.model.distill_weight,
            losses: LossSet::ALL,
            learn_temperature: self.train.learn_temperature,
        }
    }

    /// Draws `batch_size` distinct records for the current step and builds their streams.
    /// Returns the batch and the step generator positioned after batch assembly.
    pub fn next_batch(
        &self,
        records: &[FashionRecord],
        images: &[RawImage],
        lex: &LexicalResource,
        table: &CategoryTable,
    ) -> Result<(BatchBundle, ChaCha8Rng)> {
        if records.len() < 2 || records.len() != images.len() {
            bail!(InvalidInput, "need at least 2 records with one image each");
        }
        let mut rng = step_rng(self.train.seed, self.step);
        let b = self.train.batch_size.min(records.len());
        let pick = sample(&mut rng, records.len(), b).into_vec();
        let recs: Vec<&FashionRecord> = pick.iter().map(|&i| &records[i]).collect();
        let imgs: Vec<&RawImage> = pick.iter().map(|&i| &images[i]).collect();
        let res = TextResources {
            vocab: &self.vocab,
            lex,
            table,
            max_len: self.model.max_text_len,
            mlm_ratio: self.train.mlm_ratio,
            prompts_per_record: self.train.prompts_per_record,
        };
        let batch = build_batch(&recs, &imgs, &res, &mut rng)?;
        Ok((batch, rng))
    }

    /// One optimization step on a freshly drawn batch.
    pub fn step(
        &mut self,
        records: &[FashionRecord],
        images: &[RawImage],
        lex: &LexicalResource,
        table: &CategoryTable,
    ) -> Result<LossReport> {
        let (batch, mut rng) = self.next_batch(records, images, lex, table)?;
        let settings = self.settings();
        let report = pretrain_step(&mut self.state, &self.model, &batch, &settings, &mut rng)?;
        self.step += 1;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.model.clone());
        ck.put_section("online.", self.state.pair.online.iter());
        ck.put_section("momentum.", self.state.pair.momentum.iter());
        ck.put_section("adam.m.", self.state.optimizer.m.iter());
        ck.put_section("adam.v.", self.state.optimizer.v.iter());
        ck.tensors.insert("queue.text".into(), self.state.queue.raw_text().clone());
        ck.tensors.insert("queue.image".into(), self.state.queue.raw_image().clone());
        ck.metadata.insert("kind".into(), json!("pretrain"));
        ck.metadata.insert("step".into(), json!(self.step));
        ck.metadata.insert("adam_t".into(), json!(self.state.optimizer.t));
        ck.metadata.insert("queue_cursor".into(), json!(self.state.queue.cursor()));
        ck.metadata.insert("queue_occupancy".into(), json!(self.state.queue.occupancy()));
        ck.metadata.insert("train_config".into(), serde_json::to_value(&self.train)?);
        ck.metadata.insert("vocab".into(), json!(self.vocab.tokens()));
        ck.metadata.insert("momentum".into(), json!(self.state.pair.m));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.metadata
                .get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{k}`")))
        };
        let as_u64 = |k: &str| -> Result<u64> {
            meta(k)?
                .as_u64()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata `{k}` is not an integer")))
        };
        let train: TrainConfig = serde_json::from_value(meta("train_config")?.clone())?;
        let vocab = vocab_from_checkpoint(ck)?;
        let online = store_from(ck.section("online."));
        let momentum = store_from(ck.section("momentum."));
        let mut optimizer = AdamW::new(train.adamw(), &online);
        optimizer.m = store_from(ck.section("adam.m."));
        optimizer.v = store_from(ck.section("adam.v."));
        optimizer.t = as_u64("adam_t")?;
        let qt = ck.tensors.get("queue.text").cloned();
        let qi = ck.tensors.get("queue.image").cloned();
        let (Some(qt), Some(qi)) = (qt, qi) else {
            return Err(Error::Format("checkpoint lacks the feature queue".into()));
        };
        let queue = FeatureQueue::from_parts(qt, qi, as_u64("queue_cursor")? as usize, as_u64("queue_occupancy")? as usize)?;
        if !online.same_layout(&momentum) || !online.same_layout(&optimizer.m) {
            bail!(InvalidState, "checkpoint parameter sections disagree");
        }
        let m = meta("momentum")?.as_f64().unwrap_or(ck.config.momentum);
        Ok(Self {
            model: ck.config.clone(),
            train,
            vocab,
            state: StepState {
                pair: MomentumPair { online, momentum, m },
                queue,
                optimizer,
            },
            step: as_u64("step")?,
        })
    }
}

pub fn store_from(tensors: std::collections::BTreeMap<String, crate::graph::Mat>) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (k, v) in tensors {
        s.insert(k, v);
    }
    s
}

pub fn vocab_from_checkpoint(ck: &Checkpoint) -> Result<Vocabulary> {
    let tokens: Vec<String> = serde_json::from_value(
        ck.metadata
            .get("vocab")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint metadata lacks `vocab`".into()))?,
    )?;
    Vocabulary::from_tokens(tokens)
}

/// Inputs of a pre-training run.
pub struct PretrainInputs<'a> {
    pub records: &'a [FashionRecord],
    pub images: &'a [RawImage],
    pub vocab: Vocabulary,
    pub lex: &'a LexicalResource,
    pub table: &'a CategoryTable,
}

/// Name of the checkpoint written after `step` steps.
pub fn checkpoint_name(step: u64) -> String {
    format!("step{step:06}.fsap")
}

/// Runs (or resumes) pre-training on the train split, appending one JSON line per step to
/// `out_dir/loss.jsonl` and writing checkpoints. Returns the final checkpoint path.
pub fn pretrain(
    model: ModelConfig,
    train: TrainConfig,
    inputs: PretrainInputs<'_>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let (records, images): (Vec<FashionRecord>, Vec<RawImage>) = inputs
        .records
        .iter()
        .zip(inputs.images)
        .filter(|(r, _)| r.split == Split::Train)
        .map(|(r, i)| (r.clone(), i.clone()))
        .unzip();
    if records.len() < 2 {
        bail!(InvalidInput, "pre-training needs at least 2 training records, found {}", records.len());
    }
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(p)?)?;
            Trainer { train: TrainConfig { steps: train.steps, ..t.train }, ..t }
        }
        None => Trainer::new(model, train, inputs.vocab)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("loss.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let every = trainer.train.checkpoint_every as u64;
    while trainer.step < trainer.train.steps as u64 {
        let step = trainer.step;
        let report = trainer.step(&records, &images, inputs.lex, inputs.table)?;
        writeln!(log, "{}", report.to_json_line(step)).map_err(|e| Error::io(&log_path, e))?;
        if step % 50 == 0 {
            log::info!("step {step}: total {:.4}", report.total);
        }
        if every > 0 && trainer.step % every == 0 && trainer.step < trainer.train.steps as u64 {
            trainer.to_checkpoint()?.save(&out_dir.join(checkpoint_name(trainer.step)))?;
        }
    }
    let path = out_dir.join(checkpoint_name(trainer.step));
    trainer.to_checkpoint()?.save(&path)?;
    Ok(path)
}
