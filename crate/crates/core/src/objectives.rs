//! The five pre-training losses and their sum.
//!
//! Every loss is built on a [`Graph`] so gradients reach the encoders; the inputs are the
//! head outputs and normalized features produced by [`crate::model::ModelView`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::graph::{softmax_rows, Graph, Mat, Var};

/// Tolerance on row norms accepted as unit vectors.
pub const UNIT_TOL: f64 = 1e-6;

/// Placement of the batch mean in the symbol-image similarity loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsisForm {
    /// `(1/B) Σ_b [1 − ½(cos_b + 1)]`, bounded in `[0, 1]`.
    #[default]
    PerSample,
    /// `(1/B) [1 − Σ_b ½(cos_b + 1)]`. Unbounded below for `B > 1`.
    AsPrinted,
}

fn check_unit_rows(m: &Mat, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            bail!(InvalidInput, "{what} row {i} has norm {n}, expected 1");
        }
    }
    Ok(())
}

/// Cosine-distance loss between adapted image and symbol features (`B x d_1` unit rows).
pub fn fsis_loss(g: &mut Graph, img: Var, symbol: Var, form: FsisForm) -> Result<Var> {
    if g.shape(img) != g.shape(symbol) || g.shape(img).0 == 0 {
        bail!(InvalidInput, "fsis inputs must be equally shaped and non-empty");
    }
    check_unit_rows(g.value(img), "image feature")?;
    check_unit_rows(g.value(symbol), "symbol feature")?;
    let b = g.shape(img).0 as f64;
    let cos = g.row_dot(img, symbol);
    Ok(match form {
        FsisForm::PerSample => {
            let per = g.affine(cos, -0.5, 0.5);
            g.mean(per)
        }
        FsisForm::AsPrinted => {
            let s = g.sum(cos);
            g.affine(s, -0.5 / b, 1.0 / b - 0.5)
        }
    })
}

fn check_targets(g: &Graph, logits: Var, targets: &[usize], what: &str) -> Result<()> {
    let (rows, cols) = g.shape(logits);
    if rows != targets.len() {
        bail!(InvalidInput, "{what}: {rows} logit rows for {} targets", targets.len());
    }
    if let Some(t) = targets.iter().find(|&&t| t >= cols) {
        bail!(InvalidInput, "{what}: target {t} outside {cols} classes");
    }
    Ok(())
}

/// Mean cross-entropy over the MLM rows and blanked prompt rows, stacked in one logit matrix.
/// With no supervised rows the loss is a constant 0.
pub fn ptp_loss(g: &mut Graph, logits: Option<Var>, targets: &[usize]) -> Result<Var> {
    match logits {
        Some(l) if !targets.is_empty() => {
            check_targets(g, l, targets, "ptp")?;
            Ok(g.cross_entropy_indices(l, targets))
        }
        _ => {
            if !targets.is_empty() {
                bail!(InvalidInput, "ptp: targets given without logits");
            }
            log::warn!("no supervised prompt or masked positions in batch; ptp loss is 0");
            Ok(g.scalar_constant(0.0))
        }
    }
}

/// Mean two-way cross-entropy of replaced (1) / original (0) token labels.
pub fn trp_loss(g: &mut Graph, logits: Option<Var>, labels: &[usize]) -> Result<Var> {
    binary_loss(g, logits, labels, "trp")
}

/// Mean two-way cross-entropy of matched (1) / mismatched (0) pairs.
pub fn itm_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    binary_loss(g, Some(logits), labels, "itm")
}

fn binary_loss(g: &mut Graph, logits: Option<Var>, labels: &[usize], what: &str) -> Result<Var> {
    match logits {
        Some(l) if !labels.is_empty() => {
            if g.shape(l).1 != 2 {
                bail!(InvalidInput, "{what}: expected 2 logits per row");
            }
            check_targets(g, l, labels, what)?;
            Ok(g.cross_entropy_indices(l, labels))
        }
        _ => Ok(g.scalar_constant(0.0)),
    }
}

/// Similarities of unit query rows (`B x d`) against unit candidate rows (`M x d`).
pub fn its_similarities(g: &mut Graph, queries: Var, candidates: Var) -> Result<Var> {
    let ((_, qd), (m, cd)) = (g.shape(queries), g.shape(candidates));
    if m == 0 {
        bail!(InvalidState, "empty contrastive candidate set");
    }
    if qd != cd {
        bail!(InvalidInput, "query width {qd} != candidate width {cd}");
    }
    Ok(g.matmul_nt(queries, candidates))
}

/// Row-wise `softmax(sims / τ)`.
pub fn its_distributions(sims: &Mat, tau: f64) -> Result<Mat> {
    if !(tau > 0.0 && tau.is_finite()) {
        bail!(InvalidConfig, "temperature must be positive, got {tau}");
    }
    Ok(softmax_rows(&sims.mapv(|s| s / tau)))
}

/// `(1 − α) one_hot(positive) + α momentum_dist`, one row per query over `m` candidates.
pub fn soft_targets(positives: &[usize], m: usize, momentum_dist: Option<&Mat>, alpha: f64) -> Result<Mat> {
    if !(0.0..1.0).contains(&alpha) {
        bail!(InvalidConfig, "distillation weight {alpha} outside [0, 1)");
    }
    if let Some(&p) = positives.iter().find(|&&p| p >= m) {
        bail!(InvalidInput, "positive index {p} outside {m} candidates");
    }
    let mut y = match momentum_dist {
        Some(d) if alpha > 0.0 => {
            if d.dim() != (positives.len(), m) {
                bail!(InvalidInput, "momentum distribution shape {:?} != {:?}", d.dim(), (positives.len(), m));
            }
            d.mapv(|x| alpha * x)
        }
        _ => Array2::zeros((positives.len(), m)),
    };
    let hard = if momentum_dist.is_some() { 1.0 - alpha } else { 1.0 };
    for (r, &p) in positives.iter().enumerate() {
        y[[r, p]] += hard;
    }
    Ok(y)
}

/// `½ [CE(y_i2t, softmax(sim_i2t/τ)) + CE(y_t2i, softmax(sim_t2i/τ))]`, each averaged over
/// queries. `temp` is the 1x1 temperature node.
pub fn its_loss(g: &mut Graph, sim_i2t: Var, sim_t2i: Var, temp: Var, y_i2t: Mat, y_t2i: Mat) -> Result<Var> {
    let tau = g.scalar(temp);
    if tau.is_nan() || tau <= 0.0 {
        bail!(InvalidConfig, "temperature must be positive, got {tau}");
    }
    if g.shape(sim_i2t) != y_i2t.dim() || g.shape(sim_t2i) != y_t2i.dim() {
        bail!(InvalidInput, "its targets do not match the similarity shapes");
    }
    let li = g.div_scalar(sim_i2t, temp);
    let lt = g.div_scalar(sim_t2i, temp);
    let a = g.softmax_cross_entropy(li, y_i2t);
    let b = g.softmax_cross_entropy(lt, y_t2i);
    let s = g.add(a, b);
    Ok(g.scale(s, 0.5))
}

/// Per-part loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub fsis: f64,
    pub ptp: f64,
    pub trp: f64,
    pub its: f64,
    pub itm: f64,
    pub total: f64,
}

pub const PART_NAMES: [&str; 5] = ["fsis", "ptp", "trp", "its", "itm"];

impl LossReport {
    /// Sums the parts in order; a non-finite part is a divergence.
    pub fn from_parts(parts: [f64; 5]) -> Result<Self> {
        for (name, &v) in PART_NAMES.iter().zip(&parts) {
            if !v.is_finite() {
                return Err(Error::Divergence { part: name, value: v });
            }
        }
        let [fsis, ptp, trp, its, itm] = parts;
        Ok(Self {
            fsis,
            ptp,
            trp,
            its,
            itm,
            total: fsis + ptp + trp + its + itm,
        })
    }

    pub fn parts(&self) -> [f64; 5] {
        [self.fsis, self.ptp, self.trp, self.its, self.itm]
    }

    /// `{"step":n,"fsis":..,"ptp":..,"trp":..,"its":..,"itm":..,"total":..}`
    pub fn to_json_line(&self, step: u64) -> String {
        let v = serde_json::json!({
            "step": step,
            "fsis": self.fsis,
            "ptp": self.ptp,
            "trp": self.trp,
            "its": self.its,
            "itm": self.itm,
            "total": self.total,
        });
        v.to_string()
    }
}

/// Unweighted sum of the five part nodes plus the matching report.
pub fn total_loss(g: &mut Graph, parts: [Var; 5]) -> Result<(Var, LossReport)> {
    let report = LossReport::from_parts(parts.map(|v| g.scalar(v)))?;
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p);
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut m: Mat = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0));
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    }

    fn fsis_value(img: Mat, sym: Mat, form: FsisForm) -> Result<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(img), g.constant(sym));
        let l = fsis_loss(&mut g, a, b, form)?;
        Ok(g.scalar(l))
    }

    #[test]
    fn fsis_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = unit_rows(4, 5, &mut rng);
        assert!(fsis_value(v.clone(), v.clone(), FsisForm::PerSample).unwrap().abs() < 1e-12);
        assert!((fsis_value(v.clone(), -&v, FsisForm::PerSample).unwrap() - 1.0).abs() < 1e-12);
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let y = array![[0.0, 1.0], [1.0, 0.0]];
        assert!((fsis_value(x, y, FsisForm::PerSample).unwrap() - 0.5).abs() < 1e-12);
        // printed form: (1/B)(1 − B) at cosine 1
        let printed = fsis_value(v.clone(), v.clone(), FsisForm::AsPrinted).unwrap();
        assert!((printed - (1.0 - 4.0) / 4.0).abs() < 1e-12);
        assert!(fsis_value(v.mapv(|x| 2.0 * x), v, FsisForm::PerSample).is_err());
    }

    #[test]
    fn fsis_forms_agree_at_batch_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (unit_rows(1, 3, &mut rng), unit_rows(1, 3, &mut rng));
        let p = fsis_value(a.clone(), b.clone(), FsisForm::PerSample).unwrap();
        let q = fsis_value(a, b, FsisForm::AsPrinted).unwrap();
        assert!((p - q).abs() < 1e-14);
    }

    #[test]
    fn ptp_hand_computed_and_uniform() {
        let mut g = Graph::new();
        let l = g.constant(array![[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]]);
        let loss = ptp_loss(&mut g, Some(l), &[2, 0]).unwrap();
        let z1 = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let z2 = 0.5f64.exp() + (-1f64).exp() + 1.0;
        let expect = ((z1.ln() - 3.0) + (z2.ln() - 0.5)) / 2.0;
        assert!((g.scalar(loss) - expect).abs() < 1e-12);

        let u = g.constant(Array2::zeros((4, 7)));
        let loss = ptp_loss(&mut g, Some(u), &[0, 1, 2, 6]).unwrap();
        assert!((g.scalar(loss) - 7f64.ln()).abs() < 1e-12);

        let z = ptp_loss(&mut g, None, &[]).unwrap();
        assert_eq!(g.scalar(z), 0.0);
        assert!(ptp_loss(&mut g, Some(u), &[0, 1, 2, 7]).is_err());
    }

    #[test]
    fn binary_losses() {
        let mut g = Graph::new();
        let u = g.constant(Array2::zeros((3, 2)));
        let l = trp_loss(&mut g, Some(u), &[0, 1, 1]).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-12);

        let c = g.constant(array![[30.0, -30.0], [-30.0, 30.0]]);
        let l = itm_loss(&mut g, c, &[0, 1]).unwrap();
        assert!(g.scalar(l) < 1e-20);

        let h = g.constant(array![[0.2, 1.0], [1.5, -0.5], [0.0, 0.3], [-2.0, 1.0]]);
        let l = itm_loss(&mut g, h, &[1, 0, 0, 1]).unwrap();
        let ce = |a: f64, b: f64, t: usize| {
            let z = (a.exp() + b.exp()).ln();
            z - if t == 0 { a } else { b }
        };
        let expect = (ce(0.2, 1.0, 1) + ce(1.5, -0.5, 0) + ce(0.0, 0.3, 0) + ce(-2.0, 1.0, 1)) / 4.0;
        assert!((g.scalar(l) - expect).abs() < 1e-12);
        assert!(itm_loss(&mut g, h, &[1, 0]).is_err());
    }

    #[test]
    fn similarities_hand_set() {
        let mut g = Graph::new();
        let s = 0.5f64.sqrt();
        let q = g.constant(array![[1.0, 0.0], [s, s]]);
        let c = g.constant(array![[1.0, 0.0], [0.0, 1.0], [-s, s]]);
        let sim = its_similarities(&mut g, q, c).unwrap();
        let expect = array![[1.0, 0.0, -s], [s, s, 0.0]];
        assert!(g.value(sim).iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let empty = g.constant(Array2::zeros((0, 2)));
        assert!(matches!(its_similarities(&mut g, q, empty), Err(Error::InvalidState(_))));
    }

    #[test]
    fn distributions() {
        let sims = array![[0.1, 0.9, -0.3], [0.5, 0.2, 0.49]];
        for tau in [0.01, 0.07, 0.5] {
            let d = its_distributions(&sims, tau).unwrap();
            for (r, row) in d.rows().into_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                let am = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                assert_eq!(am, [1, 0][r]);
            }
        }
        let sharp = its_distributions(&sims, 1e-4).unwrap();
        assert!((sharp[[0, 1]] - 1.0).abs() < 1e-12);
        assert!(matches!(its_distributions(&sims, 0.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn its_hand_computed() {
        let mut g = Graph::new();
        let tau = 0.1;
        let temp = g.constant(array![[tau]]);
        let si = g.constant(array![[0.6, 0.2]]);
        let st = g.constant(array![[0.1, 0.3]]);
        let md = array![[0.7, 0.3]];
        let y = soft_targets(&[0], 2, Some(&md), 0.4).unwrap();
        assert!((y[[0, 0]] - 0.88).abs() < 1e-12 && (y[[0, 1]] - 0.12).abs() < 1e-12);
        let l = its_loss(&mut g, si, st, temp, y.clone(), y).unwrap();
        let ce = |a: f64, b: f64| {
            let (ea, eb) = ((a / tau).exp(), (b / tau).exp());
            -(0.88 * (ea / (ea + eb)).ln() + 0.12 * (eb / (ea + eb)).ln())
        };
        let expect = 0.5 * (ce(0.6, 0.2) + ce(0.1, 0.3));
        assert!((g.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn its_uniform_and_perfect() {
        let mut g = Graph::new();
        let temp = g.constant(array![[0.07]]);
        let s = g.constant(Array2::zeros((3, 5)));
        let y = soft_targets(&[0, 4, 2], 5, None, 0.0).unwrap();
        let l = its_loss(&mut g, s, s, temp, y.clone(), y).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);

        let sharp = g.constant(array![[1.0, -1.0], [-1.0, 1.0]]);
        let t = g.constant(array![[1e-3]]);
        let y = soft_targets(&[0, 1], 2, None, 0.0).unwrap();
        let l = its_loss(&mut g, sharp, sharp, t, y.clone(), y).unwrap();
        assert!(g.scalar(l) < 1e-12);
        assert!(soft_targets(&[2], 2, None, 0.0).is_err());
        assert!(soft_targets(&[0], 2, None, 1.0).is_err());
    }

    #[test]
    fn report_and_total() {
        let r = LossReport::from_parts([0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert!((r.total - 1.5).abs() < 1e-15);
        assert_eq!(LossReport::from_parts([0.0; 5]).unwrap().total, 0.0);
        match LossReport::from_parts([0.1, f64::NAN, 0.0, 0.0, 0.0]) {
            Err(Error::Divergence { part, .. }) => assert_eq!(part, "ptp"),
            other => panic!("{other:?}"),
        }
        let line: serde_json::Value = serde_json::from_str(&r.to_json_line(7)).unwrap();
        assert_eq!(line["step"], 7);
        assert_eq!(line["itm"], 0.5);

        let mut g = Graph::new();
        let vars = [0.1, 0.2, 0.3, 0.4, 0.5].map(|x| g.scalar_constant(x));
        let (t, rep) = total_loss(&mut g, vars).unwrap();
        assert_eq!(g.scalar(t), rep.total);
        assert_eq!(rep.total, rep.fsis + rep.ptp + rep.trp + rep.its + rep.itm);
    }

    #[test]
    fn total_gradient_is_sum_of_part_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
        let build = |g: &mut Graph| {
            let w = g.variable(w0.clone());
            let a = trp_loss(g, Some(w), &[0, 1, 1]).unwrap();
            let b = itm_loss(g, w, &[1, 1, 0]).unwrap();
            (w, a, b)
        };
        let mut g = Graph::new();
        let (w, a, b) = build(&mut g);
        let z = g.scalar_constant(0.0);
        let (t, _) = total_loss(&mut g, [a, b, z, z, z]).unwrap();
        let gt = g.backward(t).get(w).unwrap().clone();
        let ga = g.backward(a).get(w).unwrap().clone();
        let gb = g.backward(b).get(w).unwrap().clone();
        assert!((gt - ga - gb).iter().all(|x| x.abs() < 1e-14));
    }
}
