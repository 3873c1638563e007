use std::collections::HashMap;

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;

use super::{Graph, Mat, Node, Var};

/// Layout of a grouped multi-head attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionShape {
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `groups * k_len` flags; `false` keys are never attended. `None` attends everywhere.
    pub key_mask: Option<Vec<bool>>,
}

pub(super) struct AttnCache {
    pub probs: Vec<Mat>,
    scale: f64,
}

pub(super) struct LnCache {
    xhat: Mat,
    rstd: Array1<f64>,
}

pub(super) enum Op {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Affine(Var, f64),
    DivScalar(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LnCache },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SelectCol(Var, usize),
    L2Normalize { x: Var, eps: f64, norms: Vec<f64> },
    RowDot(Var, Var),
    Sum(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Mat, probs: Mat },
    Attention { q: Var, k: Var, v: Var, shape: AttentionShape, cache: AttnCache },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::DivScalar(a, b) | Op::RowDot(a, b) => {
                vec![*a, *b]
            }
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Affine(x, _)
            | Op::Gelu(x)
            | Op::GatherRows(x, _)
            | Op::SelectCol(x, _)
            | Op::L2Normalize { x, .. }
            | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(parts) => parts.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Affine(..) => "affine",
            Op::DivScalar(..) => "div_scalar",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectCol(..) => "select_col",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::RowDot(..) => "row_dot",
            Op::Sum(..) => "sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Attention { .. } => "attention",
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

pub(super) fn layer_norm_forward(x: &Mat, gamma: &Mat, beta: &Mat, eps: f64) -> (Mat, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (r, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        let rs = 1.0 / (var + eps).sqrt();
        row *= rs;
        rstd[r] = rs;
    }
    let mut y = &xhat * &gamma.row(0);
    y += &beta.row(0);
    (y, LnCache { xhat, rstd })
}

pub(super) fn attention_forward(q: &Mat, k: &Mat, v: &Mat, shape: &AttentionShape) -> (Mat, AttnCache) {
    let AttentionShape {
        groups,
        q_len,
        k_len,
        heads,
        ref key_mask,
    } = *shape;
    let d = q.ncols();
    assert_eq!(q.nrows(), groups * q_len, "attention: query rows");
    assert_eq!(k.nrows(), groups * k_len, "attention: key rows");
    assert_eq!(v.nrows(), groups * k_len, "attention: value rows");
    assert_eq!(k.ncols(), d, "attention: key width");
    assert_eq!(v.ncols(), d, "attention: value width");
    assert_eq!(d % heads, 0, "attention: width not divisible by heads");
    if let Some(m) = key_mask {
        assert_eq!(m.len(), groups * k_len, "attention: key mask length");
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let per_group: Vec<(Mat, Vec<Mat>)> = (0..groups)
        .into_par_iter()
        .map(|g| {
            let qg = q.slice(s![g * q_len..(g + 1) * q_len, ..]);
            let kg = k.slice(s![g * k_len..(g + 1) * k_len, ..]);
            let vg = v.slice(s![g * k_len..(g + 1) * k_len, ..]);
            let mask = key_mask.as_ref().map(|m| &m[g * k_len..(g + 1) * k_len]);
            let mut out = Array2::zeros((q_len, d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qg.slice(s![.., cols.clone()]);
                let kh = kg.slice(s![.., cols.clone()]);
                let vh = vg.slice(s![.., cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                for mut row in p.rows_mut() {
                    let mut m = f64::NEG_INFINITY;
                    for (j, &x) in row.iter().enumerate() {
                        if mask.is_none_or(|mk| mk[j]) {
                            m = m.max(x);
                        }
                    }
                    let mut z = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        if mask.is_none_or(|mk| mk[j]) {
                            *x = (*x - m).exp();
                            z += *x;
                        } else {
                            *x = 0.0;
                        }
                    }
                    row /= z;
                }
                out.slice_mut(s![.., cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
            (out, probs)
        })
        .collect();

    let mut out = Array2::zeros((groups * q_len, d));
    let mut all_probs = Vec::with_capacity(groups * heads);
    for (g, (o, p)) in per_group.into_iter().enumerate() {
        out.slice_mut(s![g * q_len..(g + 1) * q_len, ..]).assign(&o);
        all_probs.extend(p);
    }
    (
        out,
        AttnCache {
            probs: all_probs,
            scale,
        },
    )
}

fn accumulate(graph: &Graph, grads: &mut [Option<Mat>], v: Var, contribution: Mat) {
    if !graph.nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => *g += &contribution,
        slot @ None => *slot = Some(contribution),
    }
}

pub(super) fn backward_node(
    graph: &Graph,
    this: Var,
    node: &Node,
    dy: &Mat,
    grads: &mut [Option<Mat>],
    attn_grads: &mut HashMap<Var, Vec<Mat>>,
) {
    let val = |v: Var| graph.value(v);
    let needs = |v: Var| graph.nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf { .. } => {}
        Op::MatMul(a, b) => {
            if needs(*a) {
                accumulate(graph, grads, *a, dy.dot(&val(*b).t()));
            }
            if needs(*b) {
                accumulate(graph, grads, *b, val(*a).t().dot(dy));
            }
        }
        Op::MatMulNt(a, b) => {
            if needs(*a) {
                accumulate(graph, grads, *a, dy.dot(val(*b)));
            }
            if needs(*b) {
                accumulate(graph, grads, *b, dy.t().dot(val(*a)));
            }
        }
        Op::Linear { x, w, b } => {
            if needs(*x) {
                accumulate(graph, grads, *x, dy.dot(&val(*w).t()));
            }
            if needs(*w) {
                accumulate(graph, grads, *w, val(*x).t().dot(dy));
            }
            if let Some(b) = b {
                if needs(*b) {
                    accumulate(graph, grads, *b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
        }
        Op::Add(a, b) => {
            accumulate(graph, grads, *a, dy.clone());
            accumulate(graph, grads, *b, dy.clone());
        }
        Op::Affine(x, scale) => accumulate(graph, grads, *x, dy * *scale),
        Op::DivScalar(x, sv) => {
            let s = graph.scalar(*sv);
            if needs(*x) {
                accumulate(graph, grads, *x, dy / s);
            }
            if needs(*sv) {
                let ds = -(dy * val(*x)).sum() / (s * s);
                accumulate(graph, grads, *sv, Array2::from_elem((1, 1), ds));
            }
        }
        Op::Gelu(x) => {
            let mut dx = val(*x).mapv(gelu_grad);
            dx *= dy;
            accumulate(graph, grads, *x, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            cache,
        } => {
            let g = val(*gamma);
            if needs(*gamma) {
                let dg = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(graph, grads, *gamma, dg);
            }
            if needs(*beta) {
                accumulate(graph, grads, *beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            if needs(*x) {
                let n = dy.ncols() as f64;
                let dxhat = dy * &g.row(0);
                let mut dx = Array2::zeros(dy.dim());
                for r in 0..dy.nrows() {
                    let dr = dxhat.row(r);
                    let xr = cache.xhat.row(r);
                    let sum_d = dr.sum();
                    let sum_dx = dr.dot(&xr);
                    let rs = cache.rstd[r];
                    let mut out = dx.row_mut(r);
                    for j in 0..dr.len() {
                        out[j] = rs / n * (n * dr[j] - sum_d - xr[j] * sum_dx);
                    }
                }
                accumulate(graph, grads, *x, dx);
            }
        }
        Op::GatherRows(x, idx) => {
            let mut dx = Array2::zeros(graph.shape(*x));
            for (r, &i) in idx.iter().enumerate() {
                let mut row = dx.row_mut(i);
                row += &dy.row(r);
            }
            accumulate(graph, grads, *x, dx);
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let n = graph.shape(p).0;
                if needs(p) {
                    accumulate(graph, grads, p, dy.slice(s![start..start + n, ..]).to_owned());
                }
                start += n;
            }
        }
        Op::SelectCol(x, col) => {
            let mut dx = Array2::zeros(graph.shape(*x));
            dx.column_mut(*col).assign(&dy.column(0));
            accumulate(graph, grads, *x, dx);
        }
        Op::L2Normalize { x, eps, norms } => {
            let xv = val(*x);
            let mut dx = Array2::zeros(xv.dim());
            for (r, &n) in norms.iter().enumerate() {
                let denom = n + eps;
                let xr = xv.row(r);
                let dr = dy.row(r);
                let mut out = dx.row_mut(r);
                out.assign(&(&dr / denom));
                if n > 0.0 {
                    let coef = xr.dot(&dr) / (n * denom * denom);
                    out.scaled_add(-coef, &xr);
                }
            }
            accumulate(graph, grads, *x, dx);
        }
        Op::RowDot(a, b) => {
            let col = dy.column(0).to_owned().insert_axis(Axis(1));
            if needs(*a) {
                accumulate(graph, grads, *a, val(*b) * &col);
            }
            if needs(*b) {
                accumulate(graph, grads, *b, val(*a) * &col);
            }
        }
        Op::Sum(x) => {
            let d = dy[[0, 0]];
            accumulate(graph, grads, *x, Array2::from_elem(graph.shape(*x), d));
        }
        Op::SoftmaxCrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let rows = targets.nrows().max(1) as f64;
            let d = dy[[0, 0]] / rows;
            let mut dz = probs.clone();
            for (mut zr, yr) in dz.rows_mut().into_iter().zip(targets.rows()) {
                let total = yr.sum();
                zr *= total;
                zr -= &yr;
            }
            dz *= d;
            accumulate(graph, grads, *logits, dz);
        }
        Op::Attention {
            q,
            k,
            v,
            shape,
            cache,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let AttentionShape {
                groups,
                q_len,
                k_len,
                heads,
                ..
            } = *shape;
            let d = qv.ncols();
            let dh = d / heads;
            let scale = cache.scale;
            type GroupGrads = (Mat, Mat, Mat, Vec<Mat>);
            let per_group: Vec<GroupGrads> = (0..groups)
                .into_par_iter()
                .map(|g| {
                    let qr = g * q_len..(g + 1) * q_len;
                    let kr = g * k_len..(g + 1) * k_len;
                    let mut dq = Array2::zeros((q_len, d));
                    let mut dk = Array2::zeros((k_len, d));
                    let mut dv = Array2::zeros((k_len, d));
                    let mut dps = Vec::with_capacity(heads);
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = &cache.probs[g * heads + h];
                        let dyh = dy.slice(s![qr.clone(), cols.clone()]);
                        let qh = qv.slice(s![qr.clone(), cols.clone()]);
                        let kh = kv.slice(s![kr.clone(), cols.clone()]);
                        let vh = vv.slice(s![kr.clone(), cols.clone()]);
                        dv.slice_mut(s![.., cols.clone()]).assign(&p.t().dot(&dyh));
                        let dp = dyh.dot(&vh.t());
                        let mut ds = &dp * p;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let c = row.sum();
                            row.scaled_add(-c, &prow);
                        }
                        ds *= scale;
                        dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kh));
                        dk.slice_mut(s![.., cols]).assign(&ds.t().dot(&qh));
                        dps.push(dp);
                    }
                    (dq, dk, dv, dps)
                })
                .collect();
            let mut dq = Array2::zeros(qv.dim());
            let mut dk = Array2::zeros(kv.dim());
            let mut dv = Array2::zeros(vv.dim());
            let mut dps = Vec::with_capacity(groups * heads);
            for (g, (a, b, c, p)) in per_group.into_iter().enumerate() {
                dq.slice_mut(s![g * q_len..(g + 1) * q_len, ..]).assign(&a);
                dk.slice_mut(s![g * k_len..(g + 1) * k_len, ..]).assign(&b);
                dv.slice_mut(s![g * k_len..(g + 1) * k_len, ..]).assign(&c);
                dps.extend(p);
            }
            accumulate(graph, grads, *q, dq);
            accumulate(graph, grads, *k, dk);
            accumulate(graph, grads, *v, dv);
            attn_grads.insert(this, dps);
        }
    }
}
