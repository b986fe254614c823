//! Content encoder, adaptive instance normalization and the fusion decoder.

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::error::{input_err, Result};
use crate::linalg::Matrix;
use crate::nn::{Linear, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::rng::KefsRng;

/// Floor on the content standard deviation inside AdaIN.
pub const ADAIN_EPS: f64 = 1e-5;

/// Row-wise AdaIN: `σ(S)·(N − μ(N))/σ(N) + μ(S)` with statistics over columns.
///
/// `σ(N)` is floored at [`ADAIN_EPS`]; `σ(S)` is the plain population standard
/// deviation, so a constant style row collapses the output to its mean.
pub fn adain_on(tape: &mut Tape, content: Var, style: Var) -> Var {
    let mu_n = tape.row_mean(content);
    let sigma_n = tape.row_std(content, 0.0, ADAIN_EPS);
    let mu_s = tape.row_mean(style);
    let sigma_s = tape.row_std(style, 0.0, 0.0);
    let centered = tape.sub_col(content, mu_n);
    let normed = tape.div_col(centered, sigma_n);
    let scaled = tape.mul_col(normed, sigma_s);
    tape.add_col(scaled, mu_s)
}

pub fn adain(content: &Matrix, style: &Matrix) -> Result<Matrix> {
    if content.shape() != style.shape() {
        return Err(input_err!(
            "AdaIN content is {}x{} but style is {}x{}",
            content.rows(),
            content.cols(),
            style.rows(),
            style.cols()
        ));
    }
    let mut tape = Tape::new();
    let (c, s) = (tape.constant(content.clone()), tape.constant(style.clone()));
    let out = adain_on(&mut tape, c, s);
    Ok(tape.value(out).clone())
}

/// `N = FC2(FC1(input))`, each linear followed by LeakyReLU.
#[derive(Clone, Debug)]
pub struct ContentEncoder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ContentEncoder {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, out: usize, rng: &mut KefsRng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, out, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), out, out, true, rng),
        }
    }

    /// Encodes the column-wise concatenation of `parts`.
    pub fn forward(&self, tape: &mut Tape, parts: &[Var]) -> Var {
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_cols(parts) };
        let h = self.fc1.forward(tape, x);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.fc2.forward(tape, h);
        tape.leaky_relu(h, LEAKY_SLOPE)
    }
}

/// Two AdaIN blocks driven by linear style maps of a condition, then a final
/// projection: `out(adain(mid(adain(N, style1(S))), style2(S)))`.
#[derive(Clone, Debug)]
pub struct FusionDecoder {
    pub style1: Linear,
    pub mid: Linear,
    pub style2: Linear,
    pub out: Linear,
}

impl FusionDecoder {
    pub fn new(store: &mut ParamStore, name: &str, style_in: usize, hidden: usize, out: usize, rng: &mut KefsRng) -> Self {
        Self {
            style1: Linear::new(store, &format!("{name}.style1"), style_in, hidden, true, rng),
            mid: Linear::new(store, &format!("{name}.mid"), hidden, hidden, true, rng),
            style2: Linear::new(store, &format!("{name}.style2"), style_in, hidden, true, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, out, true, rng),
        }
    }

    /// First AdaIN block only; its rows are the fused conditioning vectors.
    pub fn first_block(&self, tape: &mut Tape, content: Var, style_src: Var) -> Var {
        let style = self.style1.forward(tape, style_src);
        adain_on(tape, content, style)
    }

    /// Remaining blocks applied to the output of [`Self::first_block`].
    pub fn finish(&self, tape: &mut Tape, fused: Var, style_src: Var) -> Var {
        let m = self.mid.forward(tape, fused);
        let style = self.style2.forward(tape, style_src);
        let x = adain_on(tape, m, style);
        self.out.forward(tape, x)
    }

    pub fn forward(&self, tape: &mut Tape, content: Var, style_src: Var) -> Var {
        let fused = self.first_block(tape, content, style_src);
        self.finish(tape, fused, style_src)
    }
}
