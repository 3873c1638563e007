//! Fine-tuning and inference for retrieval, category recognition, text-modified image
//! retrieval and cross-attention Grad-CAM. Symbols, prompts and token replacement are off here.

pub mod bundle;
pub mod classify;
pub mod gradcam;
pub mod retrieval;
pub mod retrieval_ft;
pub mod tmir;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bundle::ModelBundle;
pub use classify::{
    classification_metrics, evaluate_classifier, finetune_classify, init_classifier_heads, predict_classes,
    ClassMetrics, ClassifierReport, LabelMaps,
};
pub use gradcam::{grad_cam, rectified_map, AttentionMap};
pub use retrieval::{
    full_protocol_eval, rank, recall_at_k, subset_protocol_eval, Direction, ProtocolConfig, RetrievalIndex,
    RetrievalReport,
};
pub use retrieval_ft::{finetune_retrieval, retrieval_batch};
pub use tmir::{finetune_tmir, init_tmir_head, tmir_evaluate, tmir_retrieve, tmir_score, TmirSample};

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::model::ParameterStore;
use crate::pretrain::{step_rng, AdamW, AdamWConfig, TEMP_MAX, TEMP_MIN};

/// Optimizer and schedule of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Temperature of the TMIR in-batch contrastive loss.
    pub tmir_tau: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.02,
            batch_size: 8,
            steps: 300,
            seed: 0,
            tmir_tau: 0.07,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(InvalidConfig, "lr must be positive, got {}", self.lr);
        }
        if self.batch_size < 2 {
            bail!(InvalidConfig, "batch_size must be at least 2, got {}", self.batch_size);
        }
        if !(self.tmir_tau > 0.0 && self.tmir_tau.is_finite()) {
            bail!(InvalidConfig, "tmir_tau must be positive, got {}", self.tmir_tau);
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Runs `cfg.steps` AdamW steps; each draws `batch_size` distinct example indices from `n`
/// and asks `loss` for a scalar. Returns the per-step loss values.
pub(crate) fn run_finetune<F>(params: &mut ParameterStore, n: usize, cfg: &FinetuneConfig, mut loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&mut Graph, &ParameterStore, &[usize], &mut ChaCha8Rng) -> Result<Var>,
{
    cfg.validate()?;
    if n < 2 {
        bail!(InvalidInput, "fine-tuning needs at least 2 examples, got {n}");
    }
    let mut opt = AdamW::new(cfg.adamw(), params);
    let mut out = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let pick = sample(&mut rng, n, cfg.batch_size.min(n)).into_vec();
        let mut g = Graph::new();
        let l = loss(&mut g, params, &pick, &mut rng)?;
        let value = g.scalar(l);
        if !value.is_finite() {
            return Err(crate::Error::Divergence { part: "finetune", value });
        }
        let grads = g.param_grads(&g.backward(l));
        opt.step(params, &grads)?;
        if let Some(t) = params.get_mut("temp") {
            t.mapv_inplace(|x| x.clamp(TEMP_MIN, TEMP_MAX));
        }
        log::debug!("finetune step {step}: loss {value:.5}");
        out.push(value);
    }
    Ok(out)
}
