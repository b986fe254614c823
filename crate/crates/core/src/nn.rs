//! Layer building blocks recorded on a [`Tape`].

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::linalg::Matrix;
use crate::params::{ParamId, ParamStore};
use crate::rng::{glorot, KefsRng};

/// LeakyReLU negative slope used throughout the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// `x · W (+ b)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut KefsRng) -> Self {
        let weight = store.insert(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let bias = bias.then(|| store.insert(format!("{name}.b"), Matrix::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }
}

/// Row-wise layer normalization with learnable gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            shift: store.insert(format!("{name}.shift"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mean = tape.row_mean(x);
        let std = tape.row_std(x, LAYER_NORM_EPS, 0.0);
        let centered = tape.sub_col(x, mean);
        let normed = tape.div_col(centered, std);
        let g = tape.param(self.gain);
        let b = tape.param(self.shift);
        let scaled = tape.mul_row(normed, g);
        tape.add_row(scaled, b)
    }
}
