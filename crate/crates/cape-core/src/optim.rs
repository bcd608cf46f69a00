//! Adaptive moment estimation with bias correction.

use std::collections::BTreeMap;

use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated grads (scaled by `grad_scale`,
    /// e.g. 1/batch for batch averaging), then clear them.
    pub fn step(&mut self, params: &mut ParamStore, grad_scale: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad.as_ref() else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; tensor.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; tensor.numel()]);
            let values = grad.clone();
            let data = tensor.values_mut();
            for i in 0..data.len() {
                let g = values[i] * grad_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        params.zero_grads();
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn state(&self) -> impl Iterator<Item = (String, &Vec<f64>)> {
        self.m
            .iter()
            .map(|(n, v)| (format!("adam.m.{n}"), v))
            .chain(self.v.iter().map(|(n, v)| (format!("adam.v.{n}"), v)))
    }

    pub fn restore_state(&mut self, step: u64, m: BTreeMap<String, Vec<f64>>, v: BTreeMap<String, Vec<f64>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}
