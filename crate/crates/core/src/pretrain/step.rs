use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::{BatchBundle, Target};
use super::momentum::{momentum_update, MomentumPair};
use super::optim::AdamW;
use super::queue::FeatureQueue;
use crate::data_io::RawImage;
use crate::error::{bail, Result};
use crate::graph::{Graph, Mat, Var};
use crate::model::{HybridFeatures, ImageFeatures, ModelView, Side, TextFeatures};
use crate::objectives::{
    fsis_loss, its_distributions, its_loss, its_similarities, itm_loss, ptp_loss, soft_targets, total_loss,
    trp_loss, FsisForm, LossReport,
};

pub const TEMP_MIN: f64 = 0.001;
pub const TEMP_MAX: f64 = 0.5;

/// How the mismatched pairs of the matching loss are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    Uniform,
    /// Proportional to `exp(sim / τ)` over the other in-batch items.
    #[default]
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub fsis_form: FsisForm,
    pub negatives: NegativeSampling,
    pub distill_weight: f64,
    pub losses: LossSet,
    /// When false the temperature keeps its current value.
    pub learn_temperature: bool,
}

/// Which parts of the objective are computed; disabled parts are constant zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSet {
    pub fsis: bool,
    pub ptp: bool,
    pub trp: bool,
    pub its: bool,
    pub itm: bool,
}

impl LossSet {
    pub const ALL: LossSet = LossSet {
        fsis: true,
        ptp: true,
        trp: true,
        its: true,
        itm: true,
    };
    /// The retrieval fine-tuning objective.
    pub const RETRIEVAL: LossSet = LossSet {
        fsis: false,
        ptp: false,
        trp: false,
        its: true,
        itm: true,
    };
}

impl Default for LossSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// Projected, normalized momentum-encoder features of the clean batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumFeatures {
    pub text: Mat,
    pub image: Mat,
    pub temp: f64,
}

/// In-batch negatives of the matching loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItmNegatives {
    /// A mismatched text for each image.
    pub text_for_image: Vec<usize>,
    /// A mismatched image for each text.
    pub image_for_text: Vec<usize>,
}

pub fn image_refs(batch: &BatchBundle) -> Vec<&RawImage> {
    batch.images.iter().collect()
}

/// Global text and image features `(v_cls, v_img)` projected by the transfer weights.
pub fn global_features(view: ModelView<'_>, batch: &BatchBundle) -> Result<(Mat, Mat)> {
    let mut g = Graph::frozen();
    let t = view.text_features(&mut g, &batch.clean)?;
    let i = view.encode_image(&mut g, &image_refs(batch))?;
    let n = batch.len();
    let cls = t.rows(&mut g, &(0..n).map(|b| (b, 0)).collect::<Vec<_>>());
    let img = i.rows(&mut g, &(0..n).map(|b| (b, 0)).collect::<Vec<_>>());
    let pt = view.project(&mut g, cls, Side::Text);
    let pi = view.project(&mut g, img, Side::Image);
    Ok((g.value(pt).clone(), g.value(pi).clone()))
}

pub fn momentum_features(view: ModelView<'_>, batch: &BatchBundle) -> Result<MomentumFeatures> {
    let (text, image) = global_features(view, batch)?;
    Ok(MomentumFeatures {
        text,
        image,
        temp: view.temperature(),
    })
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], skip: usize, tau: f64, mode: NegativeSampling, rng: &mut R) -> usize {
    let logits: Vec<f64> = row.iter().map(|s| s / tau).collect();
    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, l)| match (j == skip, mode) {
            (true, _) => 0.0,
            (false, NegativeSampling::Uniform) => 1.0,
            (false, NegativeSampling::Similarity) => (l - mx).exp().max(1e-300),
        })
        .collect();
    WeightedIndex::new(&weights).expect("at least one other candidate").sample(rng)
}

/// One negative per query from the in-batch columns of the similarity rows, never the query itself.
pub fn sample_negatives<R: Rng + ?Sized>(
    sim_i2t: &Mat,
    sim_t2i: &Mat,
    tau: f64,
    mode: NegativeSampling,
    rng: &mut R,
) -> ItmNegatives {
    let b = sim_i2t.nrows();
    let pick = |m: &Mat, rng: &mut R| -> Vec<usize> {
        (0..b)
            .map(|r| {
                let row: Vec<f64> = m.row(r).iter().take(b).copied().collect();
                sample_row(&row, r, tau, mode, rng)
            })
            .collect()
    };
    let text_for_image = pick(sim_i2t, rng);
    let image_for_text = pick(sim_t2i, rng);
    ItmNegatives {
        text_for_image,
        image_for_text,
    }
}

/// Loss nodes of one forward pass.
pub struct ForwardOutput {
    /// fsis, ptp, trp, its, itm
    pub parts: [Var; 5],
    pub total: Var,
    pub report: LossReport,
    pub negatives: ItmNegatives,
}

fn supervised_rows(g: &mut Graph, h: &HybridFeatures, targets: &[Target]) -> (Var, Vec<usize>) {
    let at: Vec<(usize, usize)> = targets.iter().map(|&(gr, p, _)| (gr, p)).collect();
    (h.rows(g, &at), targets.iter().map(|t| t.2).collect())
}

/// Builds all five losses on `g` from the online parameters in `view`.
/// `negatives` fixes the matching pairs; otherwise they are sampled with `rng`.
#[allow(clippy::too_many_arguments)]
pub fn forward_losses<R: Rng + ?Sized>(
    g: &mut Graph,
    view: ModelView<'_>,
    batch: &BatchBundle,
    mom: &MomentumFeatures,
    queue: &FeatureQueue,
    settings: &StepSettings,
    negatives: Option<&ItmNegatives>,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let n = batch.len();
    if n < 2 {
        bail!(InvalidInput, "a pre-training batch needs at least 2 usable records, got {n}");
    }
    let images = image_refs(batch);
    let t = view.text_features(g, &batch.clean)?;
    let i = view.encode_image(g, &images)?;
    let at = |pos: usize| (0..n).map(|b| (b, pos)).collect::<Vec<_>>();
    let cls = t.rows(g, &at(0));
    let sym = t.rows(g, &at(1));
    let img = i.rows(g, &at(0));

    let on = settings.losses;
    let fsis = if on.fsis {
        let a_sym = view.adapt(g, sym, Side::Text);
        let a_img = view.adapt(g, img, Side::Image);
        fsis_loss(g, a_img, a_sym, settings.fsis_form)?
    } else {
        g.scalar_constant(0.0)
    };

    let q_t = view.project(g, cls, Side::Text);
    let q_i = view.project(g, img, Side::Image);
    let cand_text = FeatureQueue::candidates(&mom.text, &queue.text());
    let cand_img = FeatureQueue::candidates(&mom.image, &queue.image());
    let m = cand_text.nrows();
    let ct = g.constant(cand_text.clone());
    let ci = g.constant(cand_img.clone());
    let sim_i2t = its_similarities(g, q_i, ct)?;
    let sim_t2i = its_similarities(g, q_t, ci)?;
    let positives: Vec<usize> = (0..n).collect();
    let (y_i2t, y_t2i) = if settings.distill_weight > 0.0 {
        let d_i2t = its_distributions(&mom.image.dot(&cand_text.t()), mom.temp)?;
        let d_t2i = its_distributions(&mom.text.dot(&cand_img.t()), mom.temp)?;
        (
            soft_targets(&positives, m, Some(&d_i2t), settings.distill_weight)?,
            soft_targets(&positives, m, Some(&d_t2i), settings.distill_weight)?,
        )
    } else {
        (soft_targets(&positives, m, None, 0.0)?, soft_targets(&positives, m, None, 0.0)?)
    };
    let temp = g.param(view.params, "temp");
    let its = if on.its {
        its_loss(g, sim_i2t, sim_t2i, temp, y_i2t, y_t2i)?
    } else {
        g.scalar_constant(0.0)
    };

    let negatives = match negatives {
        Some(neg) => neg.clone(),
        None => {
            let tau = g.scalar(temp);
            sample_negatives(g.value(sim_i2t), g.value(sim_t2i), tau, settings.negatives, rng)
        }
    };
    let itm = if on.itm {
        itm_part(g, view, &t, &i, &negatives)?
    } else {
        g.scalar_constant(0.0)
    };

    let mut ptp_rows = Vec::new();
    let mut ptp_targets = Vec::new();
    if on.ptp && !batch.mlm_targets.is_empty() {
        let tm = view.text_features(g, &batch.mlm)?;
        let hm = view.fuse(g, &tm, &i)?;
        let (rows, tg) = supervised_rows(g, &hm, &batch.mlm_targets);
        ptp_rows.push(rows);
        ptp_targets.extend(tg);
    }
    if on.ptp && !batch.ptp_targets.is_empty() {
        let tp = view.text_features(g, &batch.prompt)?;
        let ip = i.select(g, &batch.prompt_groups);
        let hp = view.fuse(g, &tp, &ip)?;
        let (rows, tg) = supervised_rows(g, &hp, &batch.ptp_targets);
        ptp_rows.push(rows);
        ptp_targets.extend(tg);
    }
    let ptp = if on.ptp {
        let ptp_logits = if ptp_rows.is_empty() {
            None
        } else {
            let rows = g.concat_rows(&ptp_rows);
            Some(view.prompt_head(g, rows))
        };
        ptp_loss(g, ptp_logits, &ptp_targets)?
    } else {
        g.scalar_constant(0.0)
    };

    let trp = if on.trp {
        let trp_logits = if batch.trp_labels.is_empty() {
            None
        } else {
            let tr = view.text_features(g, &batch.trp)?;
            let hr = view.fuse(g, &tr, &i)?;
            let (rows, _) = supervised_rows(g, &hr, &batch.trp_labels);
            Some(view.trp_head(g, rows))
        };
        let trp_labels: Vec<usize> = batch.trp_labels.iter().map(|t| t.2).collect();
        trp_loss(g, trp_logits, &trp_labels)?
    } else {
        g.scalar_constant(0.0)
    };

    let parts = [fsis, ptp, trp, its, itm];
    let (total, report) = total_loss(g, parts)?;
    Ok(ForwardOutput {
        parts,
        total,
        report,
        negatives,
    })
}

/// Matching loss over `B` positive pairs and `2B` sampled mismatches.
pub fn itm_part(
    g: &mut Graph,
    view: ModelView<'_>,
    t: &TextFeatures,
    i: &ImageFeatures,
    negatives: &ItmNegatives,
) -> Result<Var> {
    let n = t.groups;
    let idx: Vec<usize> = (0..n).collect();
    let text_idx: Vec<usize> = [&idx[..], &negatives.text_for_image, &idx[..]].concat();
    let img_idx: Vec<usize> = [&idx[..], &idx[..], &negatives.image_for_text].concat();
    let tt = t.select(g, &text_idx);
    let ii = i.select(g, &img_idx);
    let h = view.fuse(g, &tt, &ii)?;
    let h0 = h.rows(g, &(0..3 * n).map(|k| (k, 0)).collect::<Vec<_>>());
    let itm_logits = view.itm_head(g, h0);
    let itm_labels: Vec<usize> = (0..3 * n).map(|k| usize::from(k < n)).collect();
    itm_loss(g, itm_logits, &itm_labels)
}

/// Mutable training state touched by one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub pair: MomentumPair,
    pub queue: FeatureQueue,
    pub optimizer: AdamW,
}

/// Forward, backward, AdamW update, temperature clamp, EMA update and enqueue.
pub fn pretrain_step<R: Rng + ?Sized>(
    state: &mut StepState,
    cfg: &crate::model::ModelConfig,
    batch: &BatchBundle,
    settings: &StepSettings,
    rng: &mut R,
) -> Result<LossReport> {
    let mom = momentum_features(ModelView::new(cfg, &state.pair.momentum), batch)?;
    let mut g = Graph::new();
    let out = forward_losses(
        &mut g,
        ModelView::new(cfg, &state.pair.online),
        batch,
        &mom,
        &state.queue,
        settings,
        None,
        rng,
    )?;
    let mut grads = g.param_grads(&g.backward(out.total));
    if !settings.learn_temperature {
        grads.remove("temp");
    }
    state.optimizer.step(&mut state.pair.online, &grads)?;
    if let Some(t) = state.pair.online.get_mut("temp") {
        t.mapv_inplace(|x| x.clamp(TEMP_MIN, TEMP_MAX));
    }
    momentum_update(&mut state.pair)?;
    state.queue.enqueue(&mom.text, &mom.image)?;
    Ok(out.report)
}

/// In-batch retrieval accuracy (R@1, text-to-image) of the online encoders.
pub fn in_batch_r1(view: ModelView<'_>, batch: &BatchBundle) -> Result<f64> {
    let (t, i) = global_features(view, batch)?;
    let sims = t.dot(&i.t());
    let hits = sims
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(r, row)| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 == *r)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}
