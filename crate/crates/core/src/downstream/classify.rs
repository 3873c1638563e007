use std::collections::{BTreeMap, BTreeSet};

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::retrieval::caption_sequences;
use super::{run_finetune, FinetuneConfig};
use crate::data_io::{FashionRecord, RawImage};
use crate::error::{bail, Result};
use crate::graph::{Graph, Mat, Var};
use crate::model::{ModelConfig, ModelView, ParameterStore};
use crate::textpipe::Vocabulary;

const CATEGORY_HEAD: &str = "head.category";
const SUBCATEGORY_HEAD: &str = "head.subcategory";
const EVAL_CHUNK: usize = 16;

/// Sorted label lists for the category and subcategory heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMaps {
    pub categories: Vec<String>,
    pub subcategories: Vec<String>,
}

impl LabelMaps {
    pub fn from_records(records: &[FashionRecord]) -> Self {
        let cats: BTreeSet<&str> = records.iter().map(|r| r.category.as_str()).collect();
        let subs: BTreeSet<&str> = records.iter().map(|r| r.subcategory.as_str()).collect();
        Self {
            categories: cats.into_iter().map(String::from).collect(),
            subcategories: subs.into_iter().map(String::from).collect(),
        }
    }

    pub fn category(&self, label: &str) -> Option<usize> {
        self.categories.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    pub fn subcategory(&self, label: &str) -> Option<usize> {
        self.subcategories.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }
}

/// Adds the two linear heads on `H_0`.
pub fn init_classifier_heads<R: Rng + ?Sized>(params: &mut ParameterStore, cfg: &ModelConfig, labels: &LabelMaps, rng: &mut R) {
    for (head, n) in [(CATEGORY_HEAD, labels.categories.len()), (SUBCATEGORY_HEAD, labels.subcategories.len())] {
        params.init_weight(&format!("{head}.w"), cfg.d, n, cfg.init_std, rng);
        params.init_zeros(&format!("{head}.b"), 1, n);
    }
}

fn head(g: &mut Graph, view: ModelView<'_>, name: &str, h0: Var) -> Var {
    let w = g.param(view.params, &format!("{name}.w"));
    let b = g.param(view.params, &format!("{name}.b"));
    g.linear(h0, w, Some(b))
}

/// Category and subcategory logits of each (caption, image) pair.
pub fn classifier_logits(
    g: &mut Graph,
    view: ModelView<'_>,
    records: &[FashionRecord],
    images: &[&RawImage],
    vocab: &Vocabulary,
) -> Result<(Var, Var)> {
    if !view.params.contains(&format!("{CATEGORY_HEAD}.w")) {
        bail!(InvalidState, "the parameter store has no classification heads");
    }
    let seqs = caption_sequences(records, vocab, view.cfg.max_text_len)?;
    let t = view.text_features(g, &seqs)?;
    let i = view.encode_image(g, images)?;
    let h = view.fuse(g, &t, &i)?;
    let h0 = h.position(g, 0);
    Ok((head(g, view, CATEGORY_HEAD, h0), head(g, view, SUBCATEGORY_HEAD, h0)))
}

/// Cross-entropy fine-tuning of both heads and the whole network on labelled pairs.
/// Records with labels outside `labels` are dropped with a warning.
pub fn finetune_classify(
    cfg: &ModelConfig,
    params: &mut ParameterStore,
    vocab: &Vocabulary,
    labels: &LabelMaps,
    records: &[FashionRecord],
    images: &[RawImage],
    ft: &FinetuneConfig,
) -> Result<Vec<f64>> {
    if records.len() != images.len() {
        bail!(InvalidInput, "{} records but {} images", records.len(), images.len());
    }
    let mut usable = Vec::new();
    for (k, r) in records.iter().enumerate() {
        match (labels.category(&r.category), labels.subcategory(&r.subcategory)) {
            (Some(c), Some(s)) => usable.push((k, c, s)),
            _ => log::warn!("{}: label outside the label maps, skipped", r.item_id),
        }
    }
    run_finetune(params, usable.len(), ft, |g, p, pick, _| {
        let view = ModelView::new(cfg, p);
        let recs: Vec<FashionRecord> = pick.iter().map(|&k| records[usable[k].0].clone()).collect();
        let imgs: Vec<&RawImage> = pick.iter().map(|&k| &images[usable[k].0]).collect();
        let (lc, ls) = classifier_logits(g, view, &recs, &imgs, vocab)?;
        let cats: Vec<usize> = pick.iter().map(|&k| usable[k].1).collect();
        let subs: Vec<usize> = pick.iter().map(|&k| usable[k].2).collect();
        let a = g.cross_entropy_indices(lc, &cats);
        let b = g.cross_entropy_indices(ls, &subs);
        Ok(g.add(a, b))
    })
}

fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0)
        .collect()
}

/// Predicted (category, subcategory) indices.
pub fn predict_classes(
    view: ModelView<'_>,
    records: &[FashionRecord],
    images: &[RawImage],
    vocab: &Vocabulary,
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(records.len());
    for (c, chunk) in records.chunks(EVAL_CHUNK).enumerate() {
        let imgs: Vec<&RawImage> = images[c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.len()].iter().collect();
        let mut g = Graph::frozen();
        let (lc, ls) = classifier_logits(&mut g, view, chunk, &imgs, vocab)?;
        out.extend(argmax_rows(g.value(lc)).into_iter().zip(argmax_rows(g.value(ls))));
    }
    Ok(out)
}

/// Accuracy and macro-averaged F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub macro_f: f64,
}

/// Macro-F averages per-class F1 over classes that occur among golds or predictions;
/// classes with neither are excluded.
pub fn classification_metrics(preds: &[usize], golds: &[usize]) -> Result<ClassMetrics> {
    if preds.len() != golds.len() || preds.is_empty() {
        bail!(InvalidInput, "{} predictions for {} golds", preds.len(), golds.len());
    }
    // (tp, fp, fn) per class
    let mut counts: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
    for (&p, &t) in preds.iter().zip(golds) {
        if p == t {
            counts.entry(t).or_default()[0] += 1;
        } else {
            counts.entry(p).or_default()[1] += 1;
            counts.entry(t).or_default()[2] += 1;
        }
    }
    let f1 = |[tp, fp, fneg]: [usize; 3]| 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
    let macro_f = counts.values().map(|&c| f1(c)).sum::<f64>() / counts.len() as f64;
    let correct = preds.iter().zip(golds).filter(|(p, t)| p == t).count();
    Ok(ClassMetrics {
        accuracy: correct as f64 / preds.len() as f64,
        macro_f,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub category: ClassMetrics,
    pub subcategory: ClassMetrics,
}

/// Gold labels unknown to `labels` count as their own class that is never predicted.
pub fn evaluate_classifier(
    view: ModelView<'_>,
    labels: &LabelMaps,
    records: &[FashionRecord],
    images: &[RawImage],
    vocab: &Vocabulary,
) -> Result<ClassifierReport> {
    let preds = predict_classes(view, records, images, vocab)?;
    let unknown_cat = labels.categories.len();
    let unknown_sub = labels.subcategories.len();
    let mut unknown = 0;
    let golds: Vec<(usize, usize)> = records
        .iter()
        .map(|r| {
            let c = labels.category(&r.category);
            let s = labels.subcategory(&r.subcategory);
            if c.is_none() || s.is_none() {
                unknown += 1;
            }
            (c.unwrap_or(unknown_cat), s.unwrap_or(unknown_sub))
        })
        .collect();
    if unknown > 0 {
        log::warn!("{unknown} evaluation records carry labels unseen in training");
    }
    let (pc, ps): (Vec<usize>, Vec<usize>) = preds.into_iter().unzip();
    let (gc, gs): (Vec<usize>, Vec<usize>) = golds.into_iter().unzip();
    Ok(ClassifierReport {
        category: classification_metrics(&pc, &gc)?,
        subcategory: classification_metrics(&ps, &gs)?,
    })
}
