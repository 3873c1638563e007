//! Central finite-difference verification of tape gradients w.r.t. stored parameters.

use rayon::prelude::*;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::ParameterStore;

/// Relative error of one parameter tensor for one scalar output.
#[derive(Debug, Clone)]
pub struct TensorError {
    pub output: usize,
    pub param: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<TensorError>,
    pub perturbations: usize,
}

impl GradCheckReport {
    /// Worst relative error for output `output` (all outputs when `None`).
    pub fn worst(&self, output: Option<usize>) -> Option<&TensorError> {
        self.entries
            .iter()
            .filter(|e| output.is_none_or(|o| e.output == o))
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Norm floor below which gradients are compared absolutely.
pub const NORM_FLOOR: f64 = 1e-7;

/// Compares the tape gradient of each scalar returned by `forward` against central
/// differences with step `h`, for every entry of every parameter in `store`.
pub fn check_params<F>(store: &ParameterStore, h: f64, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Vec<Var>> + Sync,
{
    let mut g = Graph::new();
    let outs = forward(&mut g, store)?;
    let analytic: Vec<_> = outs
        .iter()
        .map(|&o| g.param_grads(&g.backward(o)))
        .collect();

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let jobs: Vec<(usize, usize)> = names
        .iter()
        .enumerate()
        .flat_map(|(pi, n)| (0..store.get(n).unwrap().len()).map(move |e| (pi, e)))
        .collect();

    let eval = |pi: usize, e: usize, delta: f64| -> Result<Vec<f64>> {
        let mut s = store.clone();
        let t = s.get_mut(&names[pi]).unwrap();
        t.as_slice_mut().expect("standard layout")[e] += delta;
        let mut g = Graph::frozen();
        let outs = forward(&mut g, &s)?;
        Ok(outs.iter().map(|&o| g.scalar(o)).collect())
    };
    let numeric: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(pi, e)| -> Result<Vec<f64>> {
            let plus = eval(pi, e, h)?;
            let minus = eval(pi, e, -h)?;
            Ok(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect())
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    for (oi, grads) in analytic.iter().enumerate() {
        let mut job = 0;
        for name in &names {
            let n = store.get(name).unwrap().len();
            let a: Vec<f64> = match grads.get(name) {
                Some(m) => m.iter().copied().collect(),
                None => vec![0.0; n],
            };
            let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
            for (i, &av) in a.iter().enumerate() {
                let nv = numeric[job + i][oi];
                diff += (av - nv) * (av - nv);
                an += av * av;
                nn += nv * nv;
            }
            job += n;
            let (diff, an, nn) = (diff.sqrt(), an.sqrt(), nn.sqrt());
            entries.push(TensorError {
                output: oi,
                param: name.clone(),
                rel_error: diff / an.max(nn).max(NORM_FLOOR),
                analytic_norm: an,
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        perturbations: 2 * jobs.len(),
    })
}
