//! Adam optimizer with bias correction.

use crate::numerics::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, aligned with the store's parameter order.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update from the gradients currently accumulated in the store.
/// Parameters without a populated gradient are left untouched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..store.len() {
        let tensor = store.get_mut(ParamId(i));
        let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
            continue;
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = tensor.data_mut();
        for e in 0..data.len() {
            let g = grad[e];
            m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g;
            v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[e] / bc1;
            let vhat = v[e] / bc2;
            data[e] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        store.get_mut(id).grad_mut(); // zeros
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &AdamConfig::default());
        assert_eq!(store.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // g=1, lr=0.1, β=(0.9,0.999): m̂=1, v̂=1 → Δ = 0.1/(1+eps) ≈ 0.1
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(0.5));
        store.get_mut(id).accumulate_grad(&[1.0]);
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        adam_step(&mut store, &mut state, &cfg);
        let got = store.get(id).data()[0];
        assert!((got - 0.4).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.insert("w", Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap());
            let mut state = AdamState::new(&store);
            let cfg = AdamConfig::default();
            for k in 0..5 {
                store.zero_grads();
                let g: Vec<f64> = store.get(id).data().iter().map(|v| v * 0.5 + k as f64 * 0.01).collect();
                store.get_mut(id).accumulate_grad(&g);
                adam_step(&mut store, &mut state, &cfg);
            }
            store.get(id).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
