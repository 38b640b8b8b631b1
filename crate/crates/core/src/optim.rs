//! Adaptive-moment (Adam) optimizer with a step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Halve the rate every this many steps (0 disables).
    pub halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            halve_every: 100_000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Learning rate in effect at (zero-based) `step`.
    pub fn rate_at(&self, step: usize) -> f64 {
        if self.halve_every == 0 {
            return self.learning_rate;
        }
        self.learning_rate * 0.5f64.powi((step / self.halve_every) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: usize,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn current_rate(&self) -> f64 {
        self.config.rate_at(self.steps)
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        let lr = self.current_rate();
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let f = T::from_f64_lossy;
        let (b1t, b2t, eps) = (f(b1), f(b2), f(self.config.epsilon));
        let step_size = f(lr / c1);
        let c2t = f(c2);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1t * m[k] + (T::one() - b1t) * gk;
                v[k] = b2t * v[k] + (T::one() - b2t) * gk * gk;
                let vhat = (v[k] / c2t).sqrt();
                p[k] = p[k] - step_size * m[k] / (vhat + eps);
            }
        }
    }
}
