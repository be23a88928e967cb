use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update from the store's gradient buffers.
/// Leaves everything untouched if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    for p in store.iter() {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}[{i}] is {}", p.name, p.grad[i])));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.grad.len() {
            let g = p.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.value.data[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("x", Tensor::new(vec![1], vec![x]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = scalar_store(0.25);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data, vec![0.25]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        s.iter_mut().next().unwrap().grad[0] = -3.0;
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.01, &AdamConfig::default()).unwrap();
        let x = s.iter().next().unwrap().value.data[0];
        assert!((x - 1.01).abs() < 1e-9);
    }

    #[test]
    fn matches_scalar_trace_on_parabola() {
        let cfg = AdamConfig::default();
        let lr = 0.1;
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);

            let p = s.iter_mut().next().unwrap();
            p.grad[0] = 2.0 * p.value.data[0];
            adam_step(&mut s, &mut st, lr, &cfg).unwrap();
            assert!((s.iter().next().unwrap().value.data[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = scalar_store(1.0);
        s.iter_mut().next().unwrap().grad[0] = f64::NAN;
        let mut st = AdamState::new(&s);
        assert!(matches!(adam_step(&mut s, &mut st, 0.1, &AdamConfig::default()), Err(Error::NonFinite(_))));
        assert_eq!(st.t, 0);
        assert_eq!(s.iter().next().unwrap().value.data, vec![1.0]);
    }
}
