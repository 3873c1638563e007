//! Text encoder, patch image encoder, cross-attention fusion, adapters and task heads.
//!
//! All forward functions record onto a [`Graph`] and read weights from a
//! [`ParameterStore`]; running the same functions against the momentum copy of the store
//! yields the momentum encoders.

pub mod checkpoint;
mod config;
mod params;

use ndarray::Array2;

pub use config::ModelConfig;
pub use params::ParameterStore;

use crate::data_io::RawImage;
use crate::error::{bail, Result};
use crate::graph::{AttentionShape, Graph, Var};
use crate::taxonomy::FashionSymbol;
use crate::textpipe::vocab::symbol_id;
use crate::textpipe::TokenSequence;

pub const LN_EPS: f64 = 1e-6;
/// Added to vector norms before division.
pub const NORM_EPS: f64 = 1e-12;

/// Encoded text: `groups` sequences of `len` rows each, stacked.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub var: Var,
    pub groups: usize,
    pub len: usize,
    /// `groups * len` flags, false at padded positions.
    pub key_mask: Vec<bool>,
}

/// Encoded images: `groups` blocks of `num_patches + 1` rows; row 0 of each is the global feature.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub var: Var,
    pub groups: usize,
    pub len: usize,
}

/// Fusion output, one block of text length per (text, image) pair. Row 0 is `H_0`.
#[derive(Debug, Clone)]
pub struct HybridFeatures {
    pub var: Var,
    pub groups: usize,
    pub len: usize,
    /// Cross-attention probability nodes, one per fusion layer.
    pub cross_attention: Vec<Var>,
}

fn group_rows(groups: &[usize], len: usize) -> Vec<usize> {
    groups.iter().flat_map(|&g| g * len..(g + 1) * len).collect()
}

macro_rules! row_access {
    ($t:ty) => {
        impl $t {
            /// Row `pos` of every group, `groups x d`.
            pub fn position(&self, g: &mut Graph, pos: usize) -> Var {
                let idx: Vec<usize> = (0..self.groups).map(|b| b * self.len + pos).collect();
                g.gather_rows(self.var, &idx)
            }

            /// Arbitrary `(group, position)` rows.
            pub fn rows(&self, g: &mut Graph, at: &[(usize, usize)]) -> Var {
                let idx: Vec<usize> = at.iter().map(|&(b, p)| b * self.len + p).collect();
                g.gather_rows(self.var, &idx)
            }
        }
    };
}
row_access!(TextFeatures);
row_access!(ImageFeatures);
row_access!(HybridFeatures);

impl TextFeatures {
    /// Re-stacks whole groups in the given order (repeats allowed).
    pub fn select(&self, g: &mut Graph, groups: &[usize]) -> TextFeatures {
        let idx = group_rows(groups, self.len);
        TextFeatures {
            var: g.gather_rows(self.var, &idx),
            groups: groups.len(),
            len: self.len,
            key_mask: idx.iter().map(|&i| self.key_mask[i]).collect(),
        }
    }
}

impl ImageFeatures {
    pub fn select(&self, g: &mut Graph, groups: &[usize]) -> ImageFeatures {
        let idx = group_rows(groups, self.len);
        ImageFeatures {
            var: g.gather_rows(self.var, &idx),
            groups: groups.len(),
            len: self.len,
        }
    }
}

/// Which side an adapter or ITS projection belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Text,
    Image,
}

impl Side {
    fn name(self) -> &'static str {
        match self {
            Side::Text => "text",
            Side::Image => "image",
        }
    }
}

/// Forward functions over one parameter store.
#[derive(Clone, Copy)]
pub struct ModelView<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParameterStore,
}

impl<'a> ModelView<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParameterStore) -> Self {
        Self { cfg, params }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        g.param(self.params, name)
    }

    fn linear(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let w = self.p(g, &format!("{prefix}.w"));
        let bname = format!("{prefix}.b");
        let b = self.params.contains(&bname).then(|| self.p(g, &bname));
        g.linear(x, w, b)
    }

    fn layer_norm(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let gamma = self.p(g, &format!("{prefix}.g"));
        let beta = self.p(g, &format!("{prefix}.b"));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn ffn(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let h = self.linear(g, &format!("{prefix}.fc1"), x);
        let h = g.gelu(h);
        self.linear(g, &format!("{prefix}.fc2"), h)
    }

    /// Multi-head attention; returns (attention node, output-projected result).
    fn attention_block(&self, g: &mut Graph, prefix: &str, xq: Var, xkv: Var, shape: AttentionShape) -> (Var, Var) {
        let q = self.linear(g, &format!("{prefix}.q"), xq);
        let k = self.linear(g, &format!("{prefix}.k"), xkv);
        let v = self.linear(g, &format!("{prefix}.v"), xkv);
        let a = g.attention(q, k, v, shape);
        let o = self.linear(g, &format!("{prefix}.o"), a);
        (a, o)
    }

    fn self_attention_shape(&self, groups: usize, len: usize, key_mask: Option<Vec<bool>>) -> AttentionShape {
        AttentionShape {
            groups,
            q_len: len,
            k_len: len,
            heads: self.cfg.heads,
            key_mask,
        }
    }

    /// Pre-norm transformer encoder layer.
    fn encoder_layer(&self, g: &mut Graph, prefix: &str, x: Var, shape: AttentionShape) -> Var {
        let h = self.layer_norm(g, &format!("{prefix}.ln1"), x);
        let (_, o) = self.attention_block(g, &format!("{prefix}.attn"), h, h, shape);
        let x = g.add(x, o);
        let h = self.layer_norm(g, &format!("{prefix}.ln2"), x);
        let f = self.ffn(g, &format!("{prefix}.ffn"), h);
        g.add(x, f)
    }

    fn check_text(&self, seqs: &[TokenSequence]) -> Result<usize> {
        let Some(first) = seqs.first() else {
            bail!(InvalidInput, "empty text batch");
        };
        let len = first.len();
        if len == 0 || len > self.cfg.max_text_len {
            bail!(InvalidInput, "sequence length {len} outside 1..={}", self.cfg.max_text_len);
        }
        for s in seqs {
            if s.len() != len || s.attention_mask.len() != len {
                bail!(InvalidInput, "text batch has ragged sequence lengths");
            }
            if let Some(&bad) = s.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
                bail!(InvalidInput, "token id {bad} >= vocab_size {}", self.cfg.vocab_size);
            }
        }
        Ok(len)
    }

    /// Token plus position embeddings, layer-normalized: `(groups * len) x d_e`.
    /// When `symbols` is given, position 1 of each sequence is set to that symbol's token.
    pub fn embed_text(&self, g: &mut Graph, seqs: &[TokenSequence], symbols: Option<&[FashionSymbol]>) -> Result<Var> {
        let len = self.check_text(seqs)?;
        if let Some(sy) = symbols {
            if sy.len() != seqs.len() || len < 2 {
                bail!(InvalidInput, "one symbol per sequence of length >= 2 is required");
            }
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for (b, s) in seqs.iter().enumerate() {
            ids.extend(s.ids.iter().enumerate().map(|(i, &id)| match symbols {
                Some(sy) if i == 1 => symbol_id(sy[b]) as usize,
                _ => id as usize,
            }));
        }
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let tok_table = self.p(g, "text.tok_emb");
        let pos_table = self.p(g, "text.pos_emb");
        let tok = g.gather_rows(tok_table, &ids);
        let pos = g.gather_rows(pos_table, &positions);
        let e = g.add(tok, pos);
        Ok(self.layer_norm(g, "text.emb_ln", e))
    }

    /// Self-attention text encoder over an embedded batch.
    pub fn encode_text(&self, g: &mut Graph, embedded: Var, masks: &[Vec<u8>]) -> Result<TextFeatures> {
        let groups = masks.len();
        let len = masks.first().map_or(0, Vec::len);
        if groups == 0 || g.shape(embedded) != (groups * len, self.cfg.d_e) {
            bail!(InvalidInput, "embedded text does not match the mask layout");
        }
        if masks.iter().any(|m| m.iter().all(|&x| x == 0)) {
            bail!(InvalidInput, "a text sequence has an all-zero attention mask");
        }
        let key_mask: Vec<bool> = masks.iter().flatten().map(|&m| m == 1).collect();
        let mut x = if self.params.contains("text.proj.w") {
            self.linear(g, "text.proj", embedded)
        } else {
            embedded
        };
        for i in 0..self.cfg.text_layers {
            let shape = self.self_attention_shape(groups, len, Some(key_mask.clone()));
            x = self.encoder_layer(g, &format!("text.layer{i}"), x, shape);
        }
        let x = self.layer_norm(g, "text.ln_f", x);
        Ok(TextFeatures {
            var: x,
            groups,
            len,
            key_mask,
        })
    }

    /// `embed_text` followed by `encode_text`.
    pub fn text_features(&self, g: &mut Graph, seqs: &[TokenSequence]) -> Result<TextFeatures> {
        let e = self.embed_text(g, seqs, None)?;
        let masks: Vec<Vec<u8>> = seqs.iter().map(|s| s.attention_mask.clone()).collect();
        self.encode_text(g, e, &masks)
    }

    /// Flattened non-overlapping patches, `(images * num_patches) x (3 p²)`, grid row-major.
    pub fn patchify(&self, images: &[&RawImage]) -> Result<Array2<f64>> {
        let (size, p) = (self.cfg.image_size, self.cfg.patch_size);
        let grid = self.cfg.grid();
        let mut out = Array2::zeros((images.len() * grid * grid, self.cfg.patch_dim()));
        for (b, img) in images.iter().enumerate() {
            if img.height() != size || img.width() != size {
                bail!(
                    InvalidInput,
                    "image is {}x{}, expected {size}x{size}",
                    img.height(),
                    img.width()
                );
            }
            for gy in 0..grid {
                for gx in 0..grid {
                    let mut row = out.row_mut(b * grid * grid + gy * grid + gx);
                    let mut j = 0;
                    for y in gy * p..(gy + 1) * p {
                        for x in gx * p..(gx + 1) * p {
                            for c in img.get(y, x) {
                                row[j] = c as f64;
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Linear patch embeddings before the global token and positions are added.
    pub fn embed_patches(&self, g: &mut Graph, images: &[&RawImage]) -> Result<Var> {
        let patches = self.patchify(images)?;
        let x = g.constant(patches);
        Ok(self.linear(g, "image.patch", x))
    }

    /// Patch embedding, prepended global token, position embedding and transformer layers.
    pub fn encode_image(&self, g: &mut Graph, images: &[&RawImage]) -> Result<ImageFeatures> {
        if images.is_empty() {
            bail!(InvalidInput, "empty image batch");
        }
        let n = images.len();
        let np = self.cfg.num_patches();
        let len = np + 1;
        let patches = self.embed_patches(g, images)?;
        let cls_table = self.p(g, "image.cls");
        let cls = g.gather_rows(cls_table, &vec![0; n]);
        let stacked = g.concat_rows(&[cls, patches]);
        let order: Vec<usize> = (0..n)
            .flat_map(|b| std::iter::once(b).chain((0..np).map(move |j| n + b * np + j)))
            .collect();
        let x = g.gather_rows(stacked, &order);
        let pos_table = self.p(g, "image.pos_emb");
        let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let pos = g.gather_rows(pos_table, &pos_idx);
        let mut x = g.add(x, pos);
        for i in 0..self.cfg.image_layers {
            let shape = self.self_attention_shape(n, len, None);
            x = self.encoder_layer(g, &format!("image.layer{i}"), x, shape);
        }
        let x = self.layer_norm(g, "image.ln_f", x);
        Ok(ImageFeatures { var: x, groups: n, len })
    }

    /// Cross-attention of layer `k`: text queries against image keys and values,
    /// `softmax((T W_T)(I W_I1)ᵀ / √d_h)(I W_I2)`, per head. Returns the attention node,
    /// whose value is the attended matrix (before the output projection).
    pub fn cross_attention_layer(&self, g: &mut Graph, k: usize, text: Var, image: &ImageFeatures) -> Result<Var> {
        let (tq, tc) = g.shape(text);
        let (ir, ic) = g.shape(image.var);
        if tc != self.cfg.d || ic != self.cfg.d || ir != image.groups * image.len || tq % image.groups != 0 {
            bail!(InvalidInput, "cross-attention dimension mismatch");
        }
        if k >= self.cfg.fusion_layers {
            bail!(InvalidInput, "fusion layer {k} out of range");
        }
        let prefix = format!("fusion.layer{k}.cross");
        let q = self.linear(g, &format!("{prefix}.q"), text);
        let kk = self.linear(g, &format!("{prefix}.k"), image.var);
        let v = self.linear(g, &format!("{prefix}.v"), image.var);
        let shape = AttentionShape {
            groups: image.groups,
            q_len: tq / image.groups,
            k_len: image.len,
            heads: self.cfg.heads,
            key_mask: None,
        };
        Ok(g.attention(q, kk, v, shape))
    }

    /// Fusion blocks: masked text self-attention, cross-attention to the image, feed-forward.
    pub fn fuse(&self, g: &mut Graph, text: &TextFeatures, image: &ImageFeatures) -> Result<HybridFeatures> {
        if text.groups != image.groups {
            bail!(InvalidInput, "{} texts paired with {} images", text.groups, image.groups);
        }
        let mut x = text.var;
        let mut cross = Vec::with_capacity(self.cfg.fusion_layers);
        for k in 0..self.cfg.fusion_layers {
            let pre = format!("fusion.layer{k}");
            let h = self.layer_norm(g, &format!("{pre}.ln_self"), x);
            let shape = self.self_attention_shape(text.groups, text.len, Some(text.key_mask.clone()));
            let (_, o) = self.attention_block(g, &format!("{pre}.self"), h, h, shape);
            x = g.add(x, o);
            let h = self.layer_norm(g, &format!("{pre}.ln_cross"), x);
            let a = self.cross_attention_layer(g, k, h, image)?;
            let o = self.linear(g, &format!("{pre}.cross.o"), a);
            x = g.add(x, o);
            cross.push(a);
            let h = self.layer_norm(g, &format!("{pre}.ln_ffn"), x);
            let f = self.ffn(g, &format!("{pre}.ffn"), h);
            x = g.add(x, f);
        }
        let x = self.layer_norm(g, "fusion.ln_f", x);
        Ok(HybridFeatures {
            var: x,
            groups: text.groups,
            len: text.len,
            cross_attention: cross,
        })
    }

    /// Adapter projection into the `d_1` latent space followed by L2 normalization.
    pub fn adapt(&self, g: &mut Graph, v: Var, side: Side) -> Var {
        let h = self.linear(g, &format!("adapter.{}", side.name()), v);
        g.l2_normalize_rows(h, NORM_EPS)
    }

    /// `norm(W v)` with `W` the text- or image-side transfer weight.
    pub fn project(&self, g: &mut Graph, v: Var, side: Side) -> Var {
        let h = self.linear(g, &format!("proj.{}", side.name()), v);
        g.l2_normalize_rows(h, NORM_EPS)
    }

    /// Multi-layer prompt/MLM token predictor: rows -> vocabulary logits.
    pub fn prompt_head(&self, g: &mut Graph, rows: Var) -> Var {
        let h = self.linear(g, "head.ptp.fc", rows);
        let h = g.gelu(h);
        let h = self.layer_norm(g, "head.ptp.ln", h);
        self.linear(g, "head.ptp.out", h)
    }

    /// Replaced / original logits per row.
    pub fn trp_head(&self, g: &mut Graph, rows: Var) -> Var {
        self.linear(g, "head.trp", rows)
    }

    /// Mismatch / match logits per `H_0` row; column 1 is the match class.
    pub fn itm_head(&self, g: &mut Graph, h0: Var) -> Var {
        self.linear(g, "head.itm", h0)
    }

    pub fn temperature(&self) -> f64 {
        self.params.get("temp").map_or(self.cfg.tau_init, |t| t[[0, 0]])
    }
}

#[cfg(test)]
mod tests;
