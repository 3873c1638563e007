use crate::error::{bail, Result};
use crate::model::ParameterStore;

/// Online parameters and their exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumPair {
    pub online: ParameterStore,
    pub momentum: ParameterStore,
    pub m: f64,
}

impl MomentumPair {
    /// The momentum copy starts equal to the online parameters.
    pub fn new(online: ParameterStore, m: f64) -> Self {
        Self {
            momentum: online.clone(),
            online,
            m,
        }
    }
}

/// `θ' ← m θ' + (1 − m) θ` for every parameter.
pub fn momentum_update(pair: &mut MomentumPair) -> Result<()> {
    if !pair.online.same_layout(&pair.momentum) {
        bail!(InvalidState, "online and momentum parameters have different layouts");
    }
    let m = pair.m;
    for (name, target) in pair.momentum.iter_mut() {
        let src = pair.online.get(name).expect("layouts checked");
        target.zip_mut_with(src, |t, &s| *t = m * *t + (1.0 - m) * s);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};

    use super::*;

    fn store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("a", Array2::from_elem((2, 3), v));
        s.insert("b", array![[v, -v]]);
        s
    }

    #[test]
    fn single_update() {
        let mut p = MomentumPair {
            online: store(1.0),
            momentum: store(0.0),
            m: 0.995,
        };
        momentum_update(&mut p).unwrap();
        assert!(p.momentum.get("a").unwrap().iter().all(|&x| (x - 0.005).abs() < 1e-15));
    }

    #[test]
    fn m_one_is_fixed_point() {
        let mut p = MomentumPair {
            online: store(1.0),
            momentum: store(0.3),
            m: 1.0,
        };
        momentum_update(&mut p).unwrap();
        assert_eq!(p.momentum, store(0.3));
    }

    #[test]
    fn mismatched_layout() {
        let mut on = store(1.0);
        on.insert("c", array![[1.0]]);
        let mut p = MomentumPair {
            online: on,
            momentum: store(0.0),
            m: 0.9,
        };
        assert!(momentum_update(&mut p).is_err());
    }
}
