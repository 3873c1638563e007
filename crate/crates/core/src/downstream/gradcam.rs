use std::path::Path;

use crate::data_io::{write_pgm, RawImage};
use crate::error::{bail, Result};
use crate::graph::{Graph, Mat};
use crate::model::ModelView;
use crate::textpipe::TokenSequence;

/// Rectified gradient-weighted cross-attention of one text position over the image patches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub grid: usize,
    /// `grid * grid` values, row-major over the patch grid.
    pub values: Vec<f64>,
    pub text_position: usize,
    /// 1-based fusion layer.
    pub layer: usize,
}

impl AttentionMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid + col]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.grid).map(<[f64]>::to_vec).collect()
    }

    /// Min-max normalized 8-bit plain PGM.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, &self.rows())
    }
}

/// Head mean of `relu(dA * A)` in row `text_position`, over key columns `1..=grid²`.
pub fn rectified_map(probs: &[Mat], dprobs: &[Mat], text_position: usize, grid: usize) -> Vec<f64> {
    let mut values = vec![0.0; grid * grid];
    for (a, da) in probs.iter().zip(dprobs) {
        for (j, v) in values.iter_mut().enumerate() {
            *v += (da[[text_position, j + 1]] * a[[text_position, j + 1]]).max(0.0);
        }
    }
    let heads = probs.len().max(1) as f64;
    values.iter_mut().for_each(|v| *v /= heads);
    values
}

/// Readout is the matching logit of `H_0`; the map at `text_position` is the head mean of
/// `relu(dReadout/dA * A)` over image patches, the global image position dropped.
/// `layer` counts fusion layers from 1.
pub fn grad_cam(
    view: ModelView<'_>,
    text: &TokenSequence,
    image: &RawImage,
    layer: usize,
    text_position: usize,
) -> Result<AttentionMap> {
    let cfg = view.cfg;
    if layer == 0 || layer > cfg.fusion_layers {
        bail!(InvalidInput, "fusion layer {layer} out of range 1..={}", cfg.fusion_layers);
    }
    if text_position >= text.len() {
        bail!(InvalidInput, "text position {text_position} beyond length {}", text.len());
    }
    let mut g = Graph::new();
    let t = view.text_features(&mut g, std::slice::from_ref(text))?;
    let i = view.encode_image(&mut g, &[image])?;
    let h = view.fuse(&mut g, &t, &i)?;
    let h0 = h.position(&mut g, 0);
    let logits = view.itm_head(&mut g, h0);
    let readout = g.select_col(logits, 1);
    let grads = g.backward(readout);
    let node = h.cross_attention[layer - 1];
    let probs = g.attention_probs(node).expect("cross-attention node");
    let Some(dprobs) = grads.attention_probs(node) else {
        bail!(InvalidState, "no gradient reached fusion layer {layer}");
    };
    let grid = cfg.grid();
    Ok(AttentionMap {
        grid,
        values: rectified_map(probs, dprobs, text_position, grid),
        text_position,
        layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParameterStore};
    use crate::textpipe::{layout_sequence, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ParameterStore, TokenSequence) {
        let vocab = Vocabulary::build("red shirt with a pocket".split(' '));
        let cfg = ModelConfig { vocab_size: vocab.len(), ..ModelConfig::desk() };
        let p = ParameterStore::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let seq = layout_sequence("red shirt with a pocket", None, None, &vocab, cfg.max_text_len).unwrap().seq;
        (cfg, p, seq)
    }

    fn striped() -> RawImage {
        let mut img = RawImage::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                img.set(y, x, [(x as f32) / 31.0, (y % 3) as f32 / 2.0, 0.5]);
            }
        }
        img
    }

    #[test]
    fn shape_and_sign() {
        let (cfg, p, seq) = setup();
        let m = grad_cam(ModelView::new(&cfg, &p), &seq, &striped(), 1, 1).unwrap();
        assert_eq!(m.values.len(), 16);
        assert_eq!(m.rows().len(), 4);
        assert!(m.values.iter().all(|&v| v >= 0.0 && v.is_finite()));
        assert!(m.values.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn layer_and_position_bounds() {
        let (cfg, p, seq) = setup();
        let view = ModelView::new(&cfg, &p);
        assert!(grad_cam(view, &seq, &striped(), 0, 1).is_err());
        assert!(grad_cam(view, &seq, &striped(), cfg.fusion_layers + 1, 1).is_err());
        assert!(grad_cam(view, &seq, &striped(), cfg.fusion_layers, 1).is_ok());
        assert!(grad_cam(view, &seq, &striped(), 1, seq.len()).is_err());
    }

    #[test]
    fn uninformative_image_gives_constant_map() {
        let (cfg, mut p, seq) = setup();
        p.get_mut("image.patch.b").unwrap().fill(0.0);
        // patches only differ through their position embeddings
        p.get_mut("image.pos_emb").unwrap().fill(0.0);
        let m = grad_cam(ModelView::new(&cfg, &p), &seq, &RawImage::zeros(32, 32), 1, 2).unwrap();
        for &v in &m.values {
            assert!((v - m.values[0]).abs() < 1e-12);
        }
    }
}
