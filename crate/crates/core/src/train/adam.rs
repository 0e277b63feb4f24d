use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Tensor> =
            store.iter().map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec()))).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// alone and their moments do not decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) if m.shape() == p.shape() && g.shape() == p.shape() => (m, v),
                _ => return Err(Error::Shape(format!("optimizer state or gradient does not fit {name}"))),
            };
            let mut pd = p.data().to_vec();
            let mut md = m.data().to_vec();
            let mut vd = v.data().to_vec();
            for (((pi, mi), vi), &gi) in pd.iter_mut().zip(&mut md).zip(&mut vd).zip(g.data()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *pi -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            }
            let shape = p.shape().to_vec();
            *p = Tensor::new(shape.clone(), pd)?;
            *m = Tensor::new(shape.clone(), md)?;
            *v = Tensor::new(shape, vd)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut st = AdamState::new(&store);
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![3.0, -0.1, 0.0]))]);
        let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        st.step(&mut store, &grads, &cfg).unwrap();
        let w = store.get("w").unwrap().data();
        // Bias correction makes the first step g / |g| (up to eps).
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![5.0, -3.0]));
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        for _ in 0..2000 {
            let g = store.get("x").unwrap().map(|v| 2.0 * (v - 1.0));
            st.step(&mut store, &BTreeMap::from([("x".to_string(), g)]), &cfg).unwrap();
        }
        for &v in store.get("x").unwrap().data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }
}
