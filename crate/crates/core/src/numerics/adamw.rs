use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value().numel()]).collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Checks that the moment buffers line up with `store`.
    pub fn matches(&self, store: &ParameterStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .params()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.value().numel() && v.len() == p.value().numel())
    }
}

/// One AdamW update with decoupled weight decay.
///
/// The bias corrections are folded into the step size and `eps` is added to
/// the uncorrected `sqrt(v)`:
/// `p -= lr * wd * p; p -= lr_t * m / (sqrt(v) + eps)` with
/// `lr_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t)`.
///
/// Gradients are read, not cleared.
pub fn adamw_step(store: &mut ParameterStore, state: &mut OptimizerState) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::Config(
            "optimizer state does not match the parameter store".into(),
        ));
    }
    for id in store.ids() {
        if store.grad(id).is_none() {
            return Err(Error::MissingGrad(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let lr_t = c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
    let decay = c.lr * c.weight_decay;
    let grads = std::mem::take(store.grads_mut());
    for id in store.ids() {
        let g = grads.get(id).expect("checked above");
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let p = store.value_mut(id).data_mut();
        for i in 0..p.len() {
            p[i] -= decay * p[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            p[i] -= lr_t * m[i] / (v[i].sqrt() + c.eps);
        }
    }
    *store.grads_mut() = grads;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{GradBuffer, Tensor};

    fn scalar_store(p: f64) -> (ParameterStore, crate::numerics::ParamId) {
        let mut store = ParameterStore::new();
        let id = store.add("p", Tensor::scalar(p)).unwrap();
        (store, id)
    }

    #[test]
    fn single_step_matches_reference() {
        let (mut store, id) = scalar_store(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut state = OptimizerState::new(cfg, &store);
        store.zero_grad();
        store.grads_mut().accumulate(id, &[1.0]);
        adamw_step(&mut store, &mut state).unwrap();
        // 40-digit reference: 0.9000000316227666016869...
        let p = store.value(id).item();
        assert!((p - 0.900_000_031_622_766_6).abs() < 1e-15, "{p}");
        assert_eq!(state.step, 1);
        assert_eq!(store.grad(id).unwrap(), &[1.0], "grads untouched");
    }

    #[test]
    fn zero_gradient_only_decays() {
        let (mut store, id) = scalar_store(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut state = OptimizerState::new(cfg, &store);
        store.zero_grad();
        adamw_step(&mut store, &mut state).unwrap();
        assert_eq!(store.value(id).item(), 2.0 - 0.1 * 0.1 * 2.0);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let (mut store, _) = scalar_store(1.0);
        let mut state = OptimizerState::new(AdamWConfig::default(), &store);
        let err = adamw_step(&mut store, &mut state).unwrap_err();
        assert_eq!(err.to_string(), "parameter `p` has no gradient");
    }

    #[test]
    fn accumulated_and_pre_summed_gradients_step_identically() {
        let grads = [[0.3, -1.2], [0.7, 0.05]];
        let run = |presum: bool| {
            let mut store = ParameterStore::new();
            let id = store.add("w", Tensor::vector(vec![0.5, -0.25]).unwrap()).unwrap();
            let mut state = OptimizerState::new(AdamWConfig::default(), &store);
            for _ in 0..2 {
                store.zero_grad();
                if presum {
                    let mut buf = GradBuffer::zeros_like(&store);
                    for g in &grads {
                        buf.accumulate(id, g);
                    }
                    store.grads_mut().add_assign(&buf);
                } else {
                    for g in &grads {
                        store.grads_mut().accumulate(id, g);
                    }
                }
                adamw_step(&mut store, &mut state).unwrap();
            }
            store.value(id).data().to_vec()
        };
        let a = run(false);
        let b = run(true);
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
