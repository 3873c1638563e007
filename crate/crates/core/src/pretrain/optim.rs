use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::Mat;
use crate::model::ParameterStore;

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Biases, layer-norm parameters and the temperature are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".g") || name == "temp")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub t: u64,
    pub m: ParameterStore,
    pub v: ParameterStore,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParameterStore) -> Self {
        let mut m = ParameterStore::new();
        for (name, p) in params.iter() {
            m.insert(name, Mat::zeros(p.dim()));
        }
        Self {
            cfg,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &HashMap<String, Mat>) -> Result<()> {
        if !params.same_layout(&self.m) {
            bail!(InvalidState, "optimizer state does not match the parameters");
        }
        self.t += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("layout checked");
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self.v.get_mut(name).expect("layout checked");
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let wd = if decays(name) { weight_decay } else { 0.0 };
            let (m, v) = (&*m, &*v);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            });
        }
        Ok(())
    }
}
