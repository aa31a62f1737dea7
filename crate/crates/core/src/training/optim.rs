use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use tbscreen_nn::{Grads, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update in place. `t` is the 1-based step count. The decay
/// shrinks the weights directly and never passes through the moments.
pub fn adamw_update<T: Real>(theta: &mut [T], grad: &[T], state: &mut Moments, t: u64, lr: f64, cfg: &AdamWConfig) {
    if state.m.len() != theta.len() {
        state.m = vec![0.0; theta.len()];
        state.v = vec![0.0; theta.len()];
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i].as_f64();
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let mut x = theta[i].as_f64();
        x -= lr * cfg.weight_decay * x;
        x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        theta[i] = T::from_f64(x);
    }
}

/// AdamW over every trainable tensor of a parameter store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: Vec<Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Trainable parameters absent from `grads` are
    /// treated as having zero gradient (they still decay).
    pub fn step<T: Real>(&mut self, ps: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let ids: Vec<_> = ps.trainable_ids().collect();
        if self.state.len() < ps.len() {
            self.state.resize(ps.len(), Moments::default());
        }
        for id in ids {
            let zeros;
            let g = match grads.param(id) {
                Some(g) => g.data(),
                None => {
                    zeros = vec![T::zero(); ps.get(id).len()];
                    &zeros
                }
            };
            adamw_update(ps.get_mut(id).data_mut(), g, &mut self.state[id.0], self.step, lr, &self.cfg);
        }
    }
}

/// Cosine annealing from `lr_init` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (PI * frac).cos())
}
