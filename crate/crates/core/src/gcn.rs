//! Two-layer graph convolution over class semantic vectors.

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::error::{input_err, Result};
use crate::linalg::Matrix;
use crate::nn::LEAKY_SLOPE;
use crate::params::{ParamId, ParamStore};
use crate::rng::{glorot, KefsRng};

/// `W1: d x d'` and `W2: d' x d` for one (graph, semantic source) pair.
#[derive(Clone, Copy, Debug)]
pub struct GcnWeights {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl GcnWeights {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, latent: usize, rng: &mut KefsRng) -> Self {
        Self {
            w1: store.insert(format!("{name}.w1"), glorot(rng, dim, latent)),
            w2: store.insert(format!("{name}.w2"), glorot(rng, latent, dim)),
        }
    }

    /// `Â · LeakyReLU(Â V W1) · W2`. No activation after the second layer.
    pub fn forward(&self, tape: &mut Tape, v: Var, a_hat: Var) -> Var {
        let w1 = tape.param(self.w1);
        let w2 = tape.param(self.w2);
        convolve(tape, v, a_hat, w1, w2)
    }
}

fn convolve(tape: &mut Tape, v: Var, a_hat: Var, w1: Var, w2: Var) -> Var {
    let av = tape.matmul(a_hat, v);
    let hidden = tape.matmul(av, w1);
    let hidden = tape.leaky_relu(hidden, LEAKY_SLOPE);
    let mixed = tape.matmul(a_hat, hidden);
    tape.matmul(mixed, w2)
}

/// Graph convolution on plain matrices with shape validation.
pub fn graph_convolve(v: &Matrix, a_hat: &Matrix, w1: &Matrix, w2: &Matrix) -> Result<Matrix> {
    let (n, d) = v.shape();
    if a_hat.shape() != (n, n) {
        return Err(input_err!(
            "normalized adjacency is {}x{}, expected {n}x{n} for {n} classes",
            a_hat.rows(),
            a_hat.cols()
        ));
    }
    if w1.rows() != d {
        return Err(input_err!("W1 is {}x{}, expected {d} rows", w1.rows(), w1.cols()));
    }
    if w2.rows() != w1.cols() {
        return Err(input_err!(
            "W2 is {}x{}, expected {} rows to follow W1",
            w2.rows(),
            w2.cols(),
            w1.cols()
        ));
    }
    let mut tape = Tape::new();
    let (v, a, w1, w2) = (
        tape.constant(v.clone()),
        tape.constant(a_hat.clone()),
        tape.constant(w1.clone()),
        tape.constant(w2.clone()),
    );
    let out = convolve(&mut tape, v, a, w1, w2);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, seeded};

    fn padded_identity(rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn identity_composition_returns_input() {
        let v = Matrix::from_fn(4, 3, |i, j| (i + j) as f64 * 0.5);
        let out = graph_convolve(&v, &Matrix::identity(4), &padded_identity(3, 5), &padded_identity(5, 3)).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn zero_input_gives_zero() {
        let mut rng = seeded(3);
        let out = graph_convolve(
            &Matrix::zeros(3, 2),
            &Matrix::identity(3),
            &normal_matrix(&mut rng, 2, 4),
            &normal_matrix(&mut rng, 4, 2),
        )
        .unwrap();
        assert_eq!(out, Matrix::zeros(3, 2));
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let err = graph_convolve(&Matrix::zeros(3, 2), &Matrix::identity(2), &Matrix::zeros(2, 2), &Matrix::zeros(2, 2))
            .unwrap_err();
        assert!(alloc::format!("{err}").contains("expected 3x3"));
        assert!(graph_convolve(&Matrix::zeros(3, 2), &Matrix::identity(3), &Matrix::zeros(4, 2), &Matrix::zeros(2, 2)).is_err());
        assert!(graph_convolve(&Matrix::zeros(3, 2), &Matrix::identity(3), &Matrix::zeros(2, 4), &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn negative_hidden_units_use_leaky_slope() {
        // 1 class, 1 dim: E = w2 * lrelu(w1 * v)
        let out = graph_convolve(
            &Matrix::scalar(2.0),
            &Matrix::identity(1),
            &Matrix::scalar(-1.0),
            &Matrix::scalar(-3.0),
        )
        .unwrap();
        assert!((out.item() - (-3.0 * LEAKY_SLOPE * -2.0)).abs() < 1e-15);
    }
}
