use std::collections::{HashMap, HashSet};

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub steps: u64,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: HashMap<ParamId, Moments>,
}

/// Learning rate and decay applied to a parameter on one step.
#[derive(Clone, Copy, Debug)]
pub struct StepRate {
    pub lr: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, state: HashMap::new() }
    }

    /// Updates every parameter with a gradient that is trainable and not in
    /// `frozen`. `rate` supplies the per-parameter learning rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        frozen: &HashSet<ParamId>,
        rate: impl Fn(ParamId) -> StepRate,
    ) {
        let AdamWConfig { beta1, beta2, eps } = self.config;
        let mut ids: Vec<ParamId> = grads.iter().map(|(id, _)| id).collect();
        ids.sort();
        for id in ids {
            if frozen.contains(&id) || !store.get(id).trainable {
                continue;
            }
            let grad = grads.get(id).unwrap();
            let StepRate { lr, weight_decay } = rate(id);
            let value = store.value_mut(id);
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Array2::zeros(value.dim()),
                v: Array2::zeros(value.dim()),
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - beta1.powi(st.steps as i32);
            let bc2 = 1.0 - beta2.powi(st.steps as i32);
            Zip::from(value)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *p *= 1.0 - lr * weight_decay;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / (norm + 1e-6));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use ndarray::array;

    fn one_param(v: Array2<f64>, g: Array2<f64>) -> (ParamStore, ParamId, Gradients) {
        let mut store = ParamStore::new();
        let id = store.add("w", v, ParamGroup::Transformer);
        let mut grads = Gradients::default();
        grads.insert(id, g);
        (store, id, grads)
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        // After bias correction m̂ = g and v̂ = g², so the update is lr·g/(|g|+eps).
        let (mut store, id, grads) = one_param(array![[1.0, -2.0, 0.5]], array![[3.0, -0.25, 1e-3]]);
        let mut opt = AdamW::default();
        opt.step(&mut store, &grads, &HashSet::new(), |_| StepRate { lr: 0.1, weight_decay: 0.0 });
        let got = store.value(id);
        for (k, (p0, g)) in [(1.0, 3.0), (-2.0, -0.25), (0.5, 1e-3)].into_iter().enumerate() {
            let want = p0 - 0.1 * g / (f64::abs(g) + 1e-8);
            assert!((got[[0, k]] - want).abs() < 1e-12, "{k}: {} vs {want}", got[[0, k]]);
        }
    }

    #[test]
    fn decay_is_decoupled_and_frozen_params_stay() {
        let (mut store, id, grads) = one_param(array![[2.0]], array![[0.0]]);
        let mut opt = AdamW::default();
        opt.step(&mut store, &grads, &HashSet::new(), |_| StepRate { lr: 0.5, weight_decay: 0.1 });
        assert!((store.value(id)[[0, 0]] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        let before = store.value(id).clone();
        opt.step(&mut store, &grads, &HashSet::from([id]), |_| StepRate { lr: 0.5, weight_decay: 0.1 });
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let (_, _, mut grads) = one_param(array![[0.0, 0.0]], array![[3.0, 4.0]]);
        assert_eq!(clip_grad_norm(&mut grads, 10.0), 5.0);
        assert_eq!(grads.global_norm(), 5.0);
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-6);
        assert_eq!(clip_grad_norm(&mut grads, 0.0), grads.global_norm());
    }
}
