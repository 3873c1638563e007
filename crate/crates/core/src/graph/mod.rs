//! A small reverse-mode automatic differentiation tape over 2-D `f64` matrices.
//!
//! Every operation appends a node holding its value; [`Graph::backward`] walks the tape in
//! reverse and accumulates adjoints. Attention, layer normalization and soft-target
//! cross-entropy are fused ops with hand-written adjoints so that attention probabilities
//! and their gradients can be inspected (Grad-CAM) and the tape stays short.

mod ops;

use std::collections::HashMap;

use ndarray::{Array2, Axis};

pub use ops::{softmax_rows, AttentionShape};
use ops::Op;

pub type Mat = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Named trainable tensors looked up by the graph when binding parameters.
pub trait ParamSource {
    fn get_param(&self, name: &str) -> Option<&Mat>;
}

/// The recording tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    frozen: bool,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    /// Gradient w.r.t. the attention probabilities of each attention node, per (group, head).
    attn: HashMap<Var, Vec<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `dL/dP` of an attention node, indexed by `group * heads + head`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Mat]> {
        self.attn.get(&v).map(Vec::as_slice)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are bound as constants; nothing will need gradients.
    pub fn frozen() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf { trainable } => *trainable,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced by {}", op.name());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf { trainable: false })
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// A trainable leaf that is not tied to a parameter store.
    pub fn variable(&mut self, value: Mat) -> Var {
        let trainable = !self.frozen;
        self.push(value, Op::Leaf { trainable })
    }

    /// Binds the parameter `name`, reusing the same leaf on repeated calls.
    pub fn param<S: ParamSource + ?Sized>(&mut self, store: &S, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get_param(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not in the store"))
            .clone();
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Leaves bound through [`Graph::param`], by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Cached attention probabilities of an attention node, indexed by `group * heads + head`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { cache, .. } => Some(&cache.probs),
            _ => None,
        }
    }

    pub fn attention_shape(&self, v: Var) -> Option<&AttentionShape> {
        match &self.nodes[v.0].op {
            Op::Attention { shape, .. } => Some(shape),
            _ => None,
        }
    }

    // ---- elementary ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNt(a, b))
    }

    /// `x · w + b` with `b` a single row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut value = self.value(x).dot(self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.nrows(), 1, "bias must be a single row");
            value += &bias.row(0);
        }
        self.push(value, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).mapv(|v| scale * v + shift);
        self.push(value, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `x / s` for a 1x1 node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        let d = self.scalar(s);
        let value = self.value(x) / d;
        self.push(value, Op::DivScalar(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(ops::gelu);
        self.push(value, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (value, cache) = ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
        )
    }

    /// Rows of `x` in the order of `idx`; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let src = self.value(x);
        let value = src.select(Axis(0), idx);
        self.push(value, Op::GatherRows(x, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_col(&mut self, x: Var, col: usize) -> Var {
        let value = self.value(x).column(col).to_owned().insert_axis(Axis(1));
        self.push(value, Op::SelectCol(x, col))
    }

    /// Rows divided by `‖row‖ + eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n + eps;
            norms.push(n);
        }
        self.push(value, Op::L2Normalize { x, eps, norms })
    }

    /// Per-row dot product, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_dot: shape mismatch");
        let (va, vb) = (self.value(a), self.value(b));
        let value = Array2::from_shape_fn((va.nrows(), 1), |(r, _)| va.row(r).dot(&vb.row(r)));
        self.push(value, Op::RowDot(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of the cross-entropy between `targets` (rows are distributions)
    /// and `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Mat) -> Var {
        assert_eq!(self.shape(logits), targets.dim(), "cross-entropy: shape mismatch");
        let probs = ops::softmax_rows(self.value(logits));
        let rows = targets.nrows().max(1) as f64;
        let mut loss = 0.0;
        for (p, y) in probs.rows().into_iter().zip(targets.rows()) {
            for (&pi, &yi) in p.iter().zip(y.iter()) {
                if yi != 0.0 {
                    loss -= yi * pi.max(f64::MIN_POSITIVE).ln();
                }
            }
        }
        let value = Array2::from_elem((1, 1), loss / rows);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Cross-entropy against hard class indices.
    pub fn cross_entropy_indices(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (rows, cols) = self.shape(logits);
        assert_eq!(rows, targets.len(), "one target per row");
        let mut y = Array2::zeros((rows, cols));
        for (r, &t) in targets.iter().enumerate() {
            y[[r, t]] = 1.0;
        }
        self.softmax_cross_entropy(logits, y)
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` holds `groups * q_len` rows and `k`, `v` hold `groups * k_len` rows; group `g`'s
    /// queries attend only to group `g`'s keys. Keys with `key_mask == false` get zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Var {
        let (value, cache) = ops::attention_forward(self.value(q), self.value(k), self.value(v), &shape);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                cache,
            },
        )
    }

    // ---- backward -------------------------------------------------------------------

    /// Reverse sweep from a 1x1 node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        let mut attn = HashMap::new();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            ops::backward_node(self, Var(i), node, &dy, &mut grads, &mut attn);
            grads[i] = Some(dy);
        }
        Gradients { grads, attn }
    }

    /// Gradients of every bound parameter, by name.
    pub fn param_grads(&self, grads: &Gradients) -> HashMap<String, Mat> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}
