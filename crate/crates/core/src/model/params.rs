use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::graph::{Mat, ParamSource};

/// Named parameter tensors. Iteration order is the sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Mat>,
}

/// Normal(0, std) truncated to two standard deviations.
fn truncated_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break x;
        }
    })
}

impl ParamSource for ParameterStore {
    fn get_param(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Option<Mat> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, x), (b, y))| a == b && x.dim() == y.dim())
    }

    /// Truncated normal weight with standard deviation `std`.
    pub fn init_weight<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) {
        self.insert(name, truncated_normal(rows, cols, std, rng));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    fn init_linear<R: Rng + ?Sized>(&mut self, prefix: &str, inp: usize, out: usize, bias: bool, std: f64, rng: &mut R) {
        self.init_weight(&format!("{prefix}.w"), inp, out, std, rng);
        if bias {
            self.init_zeros(&format!("{prefix}.b"), 1, out);
        }
    }

    fn init_layer_norm(&mut self, prefix: &str, d: usize) {
        self.insert(format!("{prefix}.g"), Array2::ones((1, d)));
        self.init_zeros(&format!("{prefix}.b"), 1, d);
    }

    fn init_attention<R: Rng + ?Sized>(&mut self, prefix: &str, d: usize, std: f64, rng: &mut R) {
        for part in ["q", "k", "v", "o"] {
            self.init_linear(&format!("{prefix}.{part}"), d, d, true, std, rng);
        }
    }

    fn init_ffn<R: Rng + ?Sized>(&mut self, prefix: &str, d: usize, hidden: usize, std: f64, rng: &mut R) {
        self.init_linear(&format!("{prefix}.fc1"), d, hidden, true, std, rng);
        self.init_linear(&format!("{prefix}.fc2"), hidden, d, true, std, rng);
    }

    fn init_encoder_layer<R: Rng + ?Sized>(&mut self, prefix: &str, cfg: &ModelConfig, rng: &mut R) {
        self.init_layer_norm(&format!("{prefix}.ln1"), cfg.d);
        self.init_attention(&format!("{prefix}.attn"), cfg.d, cfg.init_std, rng);
        self.init_layer_norm(&format!("{prefix}.ln2"), cfg.d);
        self.init_ffn(&format!("{prefix}.ffn"), cfg.d, cfg.ffn_dim(), cfg.init_std, rng);
    }

    /// Freshly initialized parameters for every sub-module of `cfg`.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::new();
        let (d, std) = (cfg.d, cfg.init_std);

        p.init_weight("text.tok_emb", cfg.vocab_size, cfg.d_e, std, rng);
        p.init_weight("text.pos_emb", cfg.max_text_len, cfg.d_e, std, rng);
        p.init_layer_norm("text.emb_ln", cfg.d_e);
        if cfg.d_e != d {
            p.init_linear("text.proj", cfg.d_e, d, true, std, rng);
        }
        for i in 0..cfg.text_layers {
            p.init_encoder_layer(&format!("text.layer{i}"), cfg, rng);
        }
        p.init_layer_norm("text.ln_f", d);

        p.init_linear("image.patch", cfg.patch_dim(), d, true, std, rng);
        p.init_weight("image.cls", 1, d, std, rng);
        p.init_weight("image.pos_emb", cfg.num_patches() + 1, d, std, rng);
        for i in 0..cfg.image_layers {
            p.init_encoder_layer(&format!("image.layer{i}"), cfg, rng);
        }
        p.init_layer_norm("image.ln_f", d);

        for i in 0..cfg.fusion_layers {
            let pre = format!("fusion.layer{i}");
            p.init_layer_norm(&format!("{pre}.ln_self"), d);
            p.init_attention(&format!("{pre}.self"), d, std, rng);
            p.init_layer_norm(&format!("{pre}.ln_cross"), d);
            p.init_attention(&format!("{pre}.cross"), d, std, rng);
            p.init_layer_norm(&format!("{pre}.ln_ffn"), d);
            p.init_ffn(&format!("{pre}.ffn"), d, cfg.ffn_dim(), std, rng);
        }
        p.init_layer_norm("fusion.ln_f", d);

        p.init_linear("adapter.text", d, cfg.d_1, true, std, rng);
        p.init_linear("adapter.image", d, cfg.d_1, true, std, rng);
        p.init_linear("proj.text", d, d, false, std, rng);
        p.init_linear("proj.image", d, d, false, std, rng);

        p.init_linear("head.ptp.fc", d, d, true, std, rng);
        p.init_layer_norm("head.ptp.ln", d);
        p.init_linear("head.ptp.out", d, cfg.vocab_size, true, std, rng);
        p.init_linear("head.trp", d, 2, true, std, rng);
        p.init_linear("head.itm", d, 2, true, std, rng);

        p.insert("temp", Array2::from_elem((1, 1), cfg.tau_init));
        p
    }
}
