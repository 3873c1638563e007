use ndarray::Axis;
use rand::Rng;

use super::retrieval::rank_of;
use super::{run_finetune, FinetuneConfig};
use crate::data_io::RawImage;
use crate::error::{bail, Result};
use crate::graph::{Graph, Mat, Var};
use crate::model::{ModelConfig, ModelView, ParameterStore, Side, NORM_EPS};
use crate::textpipe::{layout_sequence, Vocabulary};

/// Query projection `W_q` applied to `H_f[0]`.
pub const TMIR_HEAD: &str = "head.tmir.w";
const EVAL_CHUNK: usize = 16;

/// A candidate image, the modification text and the wanted target.
#[derive(Debug, Clone, Copy)]
pub struct TmirSample<'a> {
    pub text: &'a str,
    pub candidate: &'a RawImage,
    pub target: &'a RawImage,
    pub target_id: &'a str,
}

pub fn init_tmir_head<R: Rng + ?Sized>(params: &mut ParameterStore, cfg: &ModelConfig, rng: &mut R) {
    params.init_weight(TMIR_HEAD, cfg.d, cfg.d, cfg.init_std, rng);
}

/// `unit(W_q H_f[0])` for fused (modification text, candidate image) pairs.
fn queries(g: &mut Graph, view: ModelView<'_>, vocab: &Vocabulary, texts: &[&str], cands: &[&RawImage]) -> Result<Var> {
    if !view.params.contains(TMIR_HEAD) {
        bail!(InvalidState, "the parameter store has no TMIR query projection");
    }
    let seqs = texts
        .iter()
        .map(|t| Ok(layout_sequence(t, None, None, vocab, view.cfg.max_text_len)?.seq))
        .collect::<Result<Vec<_>>>()?;
    let t = view.text_features(g, &seqs)?;
    let i = view.encode_image(g, cands)?;
    let h = view.fuse(g, &t, &i)?;
    let h0 = h.position(g, 0);
    let w = g.param(view.params, TMIR_HEAD);
    let q = g.matmul(h0, w);
    Ok(g.l2_normalize_rows(q, NORM_EPS))
}

/// `unit(W_I v_img)` of target images.
fn targets(g: &mut Graph, view: ModelView<'_>, images: &[&RawImage]) -> Result<Var> {
    let i = view.encode_image(g, images)?;
    let v = i.position(g, 0);
    Ok(view.project(g, v, Side::Image))
}

/// Cosine between the projected hybrid query and the projected target image.
pub fn tmir_score(view: ModelView<'_>, vocab: &Vocabulary, text: &str, candidate: &RawImage, target: &RawImage) -> Result<f64> {
    let mut g = Graph::frozen();
    let q = queries(&mut g, view, vocab, &[text], &[candidate])?;
    let t = targets(&mut g, view, &[target])?;
    Ok(g.value(q).row(0).dot(&g.value(t).row(0)))
}

/// In-batch softmax contrastive fine-tuning: each query's target is the positive, the
/// other targets of the batch are negatives.
pub fn finetune_tmir(
    cfg: &ModelConfig,
    params: &mut ParameterStore,
    vocab: &Vocabulary,
    samples: &[TmirSample<'_>],
    ft: &FinetuneConfig,
) -> Result<Vec<f64>> {
    run_finetune(params, samples.len(), ft, |g, p, pick, _| {
        let view = ModelView::new(cfg, p);
        let texts: Vec<&str> = pick.iter().map(|&k| samples[k].text).collect();
        let cands: Vec<&RawImage> = pick.iter().map(|&k| samples[k].candidate).collect();
        let tgts: Vec<&RawImage> = pick.iter().map(|&k| samples[k].target).collect();
        let q = queries(g, view, vocab, &texts, &cands)?;
        let t = targets(g, view, &tgts)?;
        let sims = g.matmul_nt(q, t);
        let logits = g.scale(sims, 1.0 / ft.tmir_tau);
        let diag: Vec<usize> = (0..pick.len()).collect();
        Ok(g.cross_entropy_indices(logits, &diag))
    })
}

fn encode_gallery(view: ModelView<'_>, gallery: &[(&str, &RawImage)]) -> Result<Mat> {
    let mut rows = Vec::with_capacity(gallery.len());
    for chunk in gallery.chunks(EVAL_CHUNK) {
        let mut g = Graph::frozen();
        let imgs: Vec<&RawImage> = chunk.iter().map(|&(_, i)| i).collect();
        let t = targets(&mut g, view, &imgs)?;
        rows.extend(g.value(t).axis_iter(Axis(0)).map(|r| r.to_owned()));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("equal widths"))
}

/// Gallery ids by descending score; ties by ascending id.
pub fn tmir_retrieve(
    view: ModelView<'_>,
    vocab: &Vocabulary,
    text: &str,
    candidate: &RawImage,
    gallery: &[(&str, &RawImage)],
) -> Result<Vec<String>> {
    if gallery.is_empty() {
        bail!(InvalidInput, "empty TMIR gallery");
    }
    let feats = encode_gallery(view, gallery)?;
    let mut g = Graph::frozen();
    let q = queries(&mut g, view, vocab, &[text], &[candidate])?;
    let scores: Vec<f64> = feats.dot(&g.value(q).row(0)).to_vec();
    let ids: Vec<&str> = gallery.iter().map(|&(id, _)| id).collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&j| rank_of(&scores, &ids, j));
    Ok(order.into_iter().map(|j| ids[j].to_string()).collect())
}

/// Recall@K of each query's `target_id` within `gallery`.
pub fn tmir_evaluate(
    view: ModelView<'_>,
    vocab: &Vocabulary,
    queries_in: &[TmirSample<'_>],
    gallery: &[(&str, &RawImage)],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if gallery.is_empty() || queries_in.is_empty() {
        bail!(InvalidInput, "TMIR evaluation needs queries and a gallery");
    }
    let feats = encode_gallery(view, gallery)?;
    let ids: Vec<&str> = gallery.iter().map(|&(id, _)| id).collect();
    let mut ranks = Vec::with_capacity(queries_in.len());
    for chunk in queries_in.chunks(EVAL_CHUNK) {
        let mut g = Graph::frozen();
        let texts: Vec<&str> = chunk.iter().map(|s| s.text).collect();
        let cands: Vec<&RawImage> = chunk.iter().map(|s| s.candidate).collect();
        let q = queries(&mut g, view, vocab, &texts, &cands)?;
        let sims = g.value(q).dot(&feats.t());
        for (s, row) in chunk.iter().zip(sims.axis_iter(Axis(0))) {
            let Some(pos) = ids.iter().position(|&id| id == s.target_id) else {
                bail!(InvalidInput, "target {} is not in the gallery", s.target_id);
            };
            ranks.push(rank_of(&row.to_vec(), &ids, pos));
        }
    }
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect())
}
