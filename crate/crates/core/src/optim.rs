//! Adaptive-moment (Adam) updates over a subset of a [`ParamStore`].

use alloc::vec::Vec;

use crate::autodiff::Gradients;
use crate::linalg::Matrix;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one parameter group. The critic and the generator each own
/// one, so a step never touches the other side's weights.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    ids: Vec<ParamId>,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let first = ids
            .iter()
            .map(|&id| {
                let (r, c) = store.get(id).shape();
                Matrix::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let second = first.clone();
        Self {
            config,
            ids,
            first,
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Applies one update. Parameters without a gradient are left alone but
    /// their moments still decay, as with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.steps as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.steps as f64);
        for (k, &id) in self.ids.iter().enumerate() {
            let grad = grads.param(id);
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |g| g.data()[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
    }
}
