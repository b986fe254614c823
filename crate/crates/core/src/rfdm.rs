//! Region feature diffusion: forward noising, a conditional noise predictor,
//! reverse sampling and the noise reconstruction loss.
//!
//! Notation: `γ_t` is the noise scalar of step `t`, `β_t = 1 − γ_t` the signal
//! retention and `β̄_t = ∏_{i≤t} β_i`. Timesteps are 1-based throughout.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, input_err, Error, Result};
use crate::linalg::Matrix;
use crate::msgf::{ContentEncoder, FusionDecoder};
use crate::params::{ParamId, ParamStore};
use crate::rng::{normal_matrix, KefsRng};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiffusionSchedule {
    gamma: Vec<f64>,
    beta_bar: Vec<f64>,
}

/// Linear ramp `γ_1 ..= γ_T`.
pub fn make_schedule(steps: usize, gamma_1: f64, gamma_t: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(config_err!("diffusion needs at least one timestep"));
    }
    if !(gamma_1 > 0.0 && gamma_1 <= gamma_t && gamma_t < 1.0) {
        return Err(config_err!("noise endpoints must satisfy 0 < γ1 ≤ γT < 1, got {gamma_1} and {gamma_t}"));
    }
    if steps > 1 && gamma_1 == gamma_t {
        return Err(config_err!("noise ramp must be strictly increasing, both endpoints are {gamma_1}"));
    }
    let gamma: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                gamma_1
            } else {
                gamma_1 + (gamma_t - gamma_1) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_gamma(gamma)
}

impl DiffusionSchedule {
    /// Builds a schedule from explicit noise scalars, recomputing `β̄`.
    pub fn from_gamma(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() || gamma.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(config_err!("every noise scalar must lie in (0, 1)"));
        }
        let mut acc = 1.0;
        let beta_bar = gamma
            .iter()
            .map(|g| {
                acc *= 1.0 - g;
                acc
            })
            .collect();
        Ok(Self { gamma, beta_bar })
    }

    pub fn steps(&self) -> usize {
        self.gamma.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(input_err!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    /// `γ_t`; panics outside `1..=T`.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.gamma(t)
    }

    /// `β̄_t`, with `β̄_0 = 1`.
    pub fn beta_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.beta_bar[t - 1]
        }
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta_bars(&self) -> &[f64] {
        &self.beta_bar
    }

    /// Reverse-step standard deviation under the chosen variance rule.
    pub fn sigma(&self, t: usize, variance: ReverseVariance) -> f64 {
        let var = match variance {
            ReverseVariance::Fixed => self.gamma(t),
            ReverseVariance::Posterior => self.gamma(t) * (1.0 - self.beta_bar(t - 1)) / (1.0 - self.beta_bar(t)),
        };
        libm::sqrt(var)
    }
}

/// Variance of the reverse transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ReverseVariance {
    /// `σ_t² = γ_t`.
    #[default]
    Fixed,
    /// `σ_t² = γ_t (1 − β̄_{t−1}) / (1 − β̄_t)`.
    Posterior,
}

/// `h_t = √(1−γ_t) h_{t−1} + √γ_t z`.
pub fn forward_step(h_prev: &[f64], gamma_t: f64, z: &[f64]) -> Vec<f64> {
    let (a, b) = (libm::sqrt(1.0 - gamma_t), libm::sqrt(gamma_t));
    h_prev.iter().zip(z).map(|(h, z)| a * h + b * z).collect()
}

/// `h_t = √β̄_t h_0 + √(1−β̄_t) z`.
pub fn forward_marginal(h0: &[f64], t: usize, schedule: &DiffusionSchedule, z: &[f64]) -> Result<Vec<f64>> {
    schedule.check(t)?;
    same_len(h0, z)?;
    let bb = schedule.beta_bar(t);
    let (a, b) = (libm::sqrt(bb), libm::sqrt(1.0 - bb));
    Ok(h0.iter().zip(z).map(|(h, z)| a * h + b * z).collect())
}

/// `μ = (h_t − γ_t/√(1−β̄_t) · z_pred) / √β_t`.
pub fn posterior_mean(h_t: &[f64], t: usize, z_pred: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    schedule.check(t)?;
    same_len(h_t, z_pred)?;
    let (c_noise, c_out) = posterior_coefficients(schedule, t)?;
    Ok(h_t.iter().zip(z_pred).map(|(h, z)| (h - c_noise * z) * c_out).collect())
}

fn posterior_coefficients(schedule: &DiffusionSchedule, t: usize) -> Result<(f64, f64)> {
    let residual = 1.0 - schedule.beta_bar(t);
    if residual <= 0.0 {
        return Err(Error::Invariant(format!("accumulated retention at t={t} is 1, posterior mean undefined")));
    }
    Ok((schedule.gamma(t) / libm::sqrt(residual), 1.0 / libm::sqrt(schedule.beta(t))))
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(input_err!("vector lengths differ: {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DenoiserConfig {
    /// Width of the content and AdaIN layers inside each block.
    pub hidden: usize,
    /// Width of the learnable timestep embedding.
    pub time_dim: usize,
    /// One block for all timesteps instead of one per timestep.
    pub share_timestep_params: bool,
    pub variance: ReverseVariance,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            time_dim: 16,
            share_timestep_params: false,
            variance: ReverseVariance::Fixed,
        }
    }
}

/// One content-encoder + AdaIN decoder block.
#[derive(Clone, Debug)]
pub struct DenoiserBlock {
    pub content: ContentEncoder,
    pub decoder: FusionDecoder,
}

/// Conditional noise predictor `z_θ(h_t, t, c)`.
///
/// The block for step `t` encodes `[h_t, c, e_t]` into content, styles it by
/// `[c, e_t]` through two AdaIN blocks and projects back to the feature width.
/// `e_t` is row `t` of a learnable table initialized with sinusoids.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub time_table: ParamId,
    pub blocks: Vec<DenoiserBlock>,
    pub feature_dim: usize,
    pub cond_dim: usize,
    pub variance: ReverseVariance,
}

pub fn sinusoidal_table(steps: usize, dim: usize) -> Matrix {
    Matrix::from_fn(steps, dim, |t, j| {
        let freq = libm::pow(10_000.0, (2 * (j / 2)) as f64 / dim as f64);
        let x = (t + 1) as f64 / freq;
        if j % 2 == 0 {
            libm::sin(x)
        } else {
            libm::cos(x)
        }
    })
}

impl Denoiser {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &DenoiserConfig,
        steps: usize,
        feature_dim: usize,
        cond_dim: usize,
        rng: &mut KefsRng,
    ) -> Result<Self> {
        if config.hidden == 0 || config.time_dim == 0 || steps == 0 {
            return Err(config_err!("denoiser widths and step count must be positive"));
        }
        let time_table = store.insert(format!("{name}.time"), sinusoidal_table(steps, config.time_dim));
        let count = if config.share_timestep_params { 1 } else { steps };
        let blocks = (0..count)
            .map(|b| {
                let prefix = if config.share_timestep_params {
                    format!("{name}.shared")
                } else {
                    format!("{name}.t{}", b + 1)
                };
                DenoiserBlock {
                    content: ContentEncoder::new(
                        store,
                        &format!("{prefix}.content"),
                        feature_dim + cond_dim + config.time_dim,
                        config.hidden,
                        rng,
                    ),
                    decoder: FusionDecoder::new(
                        store,
                        &format!("{prefix}.decoder"),
                        cond_dim + config.time_dim,
                        config.hidden,
                        feature_dim,
                        rng,
                    ),
                }
            })
            .collect();
        Ok(Self {
            time_table,
            blocks,
            feature_dim,
            cond_dim,
            variance: config.variance,
        })
    }

    pub fn steps(&self, store: &ParamStore) -> usize {
        store.get(self.time_table).rows()
    }

    pub fn shares_params(&self) -> bool {
        self.blocks.len() == 1
    }

    pub fn block(&self, t: usize) -> &DenoiserBlock {
        if self.shares_params() {
            &self.blocks[0]
        } else {
            &self.blocks[t - 1]
        }
    }

    /// Predicted noise for a batch whose rows all sit at step `t`.
    pub fn forward(&self, tape: &mut Tape, h_t: Var, t: usize, cond: Var) -> Var {
        let rows = tape.shape(h_t).0;
        let table = tape.param(self.time_table);
        let emb = tape.gather_rows(table, &alloc::vec![t - 1; rows]);
        let block = self.block(t);
        let content = block.content.forward(tape, &[h_t, cond, emb]);
        let style = tape.concat_cols(&[cond, emb]);
        block.decoder.forward(tape, content, style)
    }

    fn check_inputs(&self, store: &ParamStore, h_t: &Matrix, t: usize, cond: &Matrix) -> Result<()> {
        let steps = self.steps(store);
        if t == 0 || t > steps {
            return Err(input_err!("timestep {t} outside 1..={steps}"));
        }
        if h_t.cols() != self.feature_dim || cond.cols() != self.cond_dim || h_t.rows() != cond.rows() {
            return Err(input_err!(
                "denoiser expects features nx{} and conditions nx{}, got {:?} and {:?}",
                self.feature_dim,
                self.cond_dim,
                h_t.shape(),
                cond.shape()
            ));
        }
        Ok(())
    }

    /// `z_θ(h_t, t, c)` on plain matrices.
    pub fn predict(&self, store: &ParamStore, h_t: &Matrix, t: usize, cond: &Matrix) -> Result<Matrix> {
        self.check_inputs(store, h_t, t, cond)?;
        let mut tape = Tape::with_params(store);
        let (h, c) = (tape.constant(h_t.clone()), tape.constant(cond.clone()));
        let out = self.forward(&mut tape, h, t, c);
        Ok(tape.value(out).clone())
    }

    /// One reverse transition for every row; no noise is added at `t = 1`.
    pub fn reverse_step(
        &self,
        store: &ParamStore,
        schedule: &DiffusionSchedule,
        h_t: &Matrix,
        t: usize,
        cond: &Matrix,
        rng: &mut KefsRng,
    ) -> Result<Matrix> {
        let z_pred = self.predict(store, h_t, t, cond)?;
        let (c_noise, c_out) = posterior_coefficients(schedule, t)?;
        let mean = h_t.zip_map(&z_pred, |h, z| (h - c_noise * z) * c_out);
        if t == 1 {
            return Ok(mean);
        }
        let sigma = schedule.sigma(t, self.variance);
        let eps = normal_matrix(rng, mean.rows(), mean.cols());
        Ok(mean.zip_map(&eps, |m, e| m + sigma * e))
    }

    /// Draws one feature per condition row, starting from `h_T ~ N(0, I)`.
    pub fn sample(&self, store: &ParamStore, schedule: &DiffusionSchedule, cond: &Matrix, rng: &mut KefsRng) -> Result<Matrix> {
        if schedule.steps() != self.steps(store) {
            return Err(input_err!(
                "schedule has {} steps, denoiser was built for {}",
                schedule.steps(),
                self.steps(store)
            ));
        }
        let mut h = normal_matrix(rng, cond.rows(), self.feature_dim);
        for t in (1..=schedule.steps()).rev() {
            h = self.reverse_step(store, schedule, &h, t, cond, rng)?;
        }
        Ok(h)
    }
}

/// Training-time noising of a batch: one uniform step and one noise draw per row.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisingPlan {
    pub steps: Vec<usize>,
    pub noise: Matrix,
    pub noisy: Matrix,
}

impl NoisingPlan {
    pub fn draw(h0: &Matrix, schedule: &DiffusionSchedule, rng: &mut KefsRng) -> Self {
        let steps: Vec<usize> = (0..h0.rows()).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let noise = normal_matrix(rng, h0.rows(), h0.cols());
        Self::with(h0, schedule, steps, noise)
    }

    /// A plan with given steps and noise.
    pub fn with(h0: &Matrix, schedule: &DiffusionSchedule, steps: Vec<usize>, noise: Matrix) -> Self {
        let noisy = Matrix::from_fn(h0.rows(), h0.cols(), |i, j| {
            let bb = schedule.beta_bar(steps[i]);
            libm::sqrt(bb) * h0.get(i, j) + libm::sqrt(1.0 - bb) * noise.get(i, j)
        });
        Self { steps, noise, noisy }
    }

    /// Row indices grouped by step, in ascending step order.
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut order: Vec<usize> = (0..self.steps.len()).collect();
        order.sort_by_key(|&i| (self.steps[i], i));
        for i in order {
            match groups.last_mut() {
                Some((t, rows)) if *t == self.steps[i] => rows.push(i),
                _ => groups.push((self.steps[i], alloc::vec![i])),
            }
        }
        groups
    }
}

/// `(1/B) Σ_i ‖z_i − ẑ_i‖²`.
pub fn squared_error_loss(predicted: &Matrix, noise: &Matrix) -> f64 {
    predicted.sub(noise).data().iter().map(|d| d * d).sum::<f64>() / noise.rows().max(1) as f64
}

/// Reconstruction loss recorded on a tape; `cond` rows align with the plan.
pub fn reconstruction_loss_on(tape: &mut Tape, denoiser: &Denoiser, plan: &NoisingPlan, cond: Var) -> Var {
    let batch = plan.steps.len() as f64;
    let mut total: Option<Var> = None;
    for (t, rows) in plan.groups() {
        let h = tape.constant(plan.noisy.select_rows(&rows));
        let z = tape.constant(plan.noise.select_rows(&rows));
        let c = tape.gather_rows(cond, &rows);
        let pred = denoiser.forward(tape, h, t, c);
        let diff = tape.sub(pred, z);
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
    }
    let total = total.expect("noising plan is non-empty");
    tape.scale(total, 1.0 / batch)
}

/// Reconstruction loss on plain matrices with freshly drawn steps and noise.
pub fn reconstruction_loss(
    store: &ParamStore,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    h0: &Matrix,
    cond: &Matrix,
    rng: &mut KefsRng,
) -> Result<f64> {
    if h0.rows() == 0 {
        return Err(input_err!("reconstruction loss needs a non-empty batch"));
    }
    denoiser.check_inputs(store, h0, 1, cond)?;
    if schedule.steps() != denoiser.steps(store) {
        return Err(input_err!("schedule and denoiser disagree on the step count"));
    }
    let plan = NoisingPlan::draw(h0, schedule, rng);
    let mut tape = Tape::with_params(store);
    let c = tape.constant(cond.clone());
    let loss = reconstruction_loss_on(&mut tape, denoiser, &plan, c);
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn schedule_matches_product_loop() {
        let s = make_schedule(100, 8.5e-4, 1.2e-2).unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.gamma(1), 8.5e-4);
        assert!((s.gamma(100) - 1.2e-2).abs() < 1e-15);
        for t in 1..=100 {
            let prod: f64 = (1..=t).map(|i| 1.0 - s.gamma(i)).product();
            assert!((s.beta_bar(t) - prod).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        assert_eq!(s.gammas(), &[0.3]);
    }

    #[test]
    fn bad_endpoints_are_config_errors() {
        for (a, b) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0), (0.1, 0.1)] {
            assert!(matches!(make_schedule(5, a, b), Err(Error::Config(_))));
        }
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn forward_step_limits() {
        assert_eq!(forward_step(&[1.5, -2.0], 0.0, &[9.0, 9.0]), [1.5, -2.0]);
        assert_eq!(forward_step(&[0.0, 0.0], 1.0, &[1.0, 0.0]), [1.0, 0.0]);
    }

    #[test]
    fn marginal_rejects_bad_step() {
        let s = make_schedule(4, 0.1, 0.2).unwrap();
        assert!(forward_marginal(&[1.0], 0, &s, &[0.0]).is_err());
        assert!(forward_marginal(&[1.0], 5, &s, &[0.0]).is_err());
    }

    #[test]
    fn zero_prediction_mean_rescales() {
        let s = make_schedule(4, 0.1, 0.2).unwrap();
        let mu = posterior_mean(&[2.0, -1.0], 3, &[0.0, 0.0], &s).unwrap();
        let k = 1.0 / s.beta(3).sqrt();
        assert_eq!(mu, [2.0 * k, -1.0 * k]);
    }

    #[test]
    fn perfect_prediction_mean_is_colinear_with_signal() {
        let s = make_schedule(6, 0.05, 0.4).unwrap();
        let h0 = [1.0, -2.0, 0.5];
        let z = [0.3, 0.9, -1.1];
        for t in 1..=6 {
            let ht = forward_marginal(&h0, t, &s, &z).unwrap();
            let mu = posterior_mean(&ht, t, &z, &s).unwrap();
            // signal keeps weight √β̄_{t−1}; the noise weight vanishes at t = 1
            let signal = s.beta_bar(t - 1).sqrt();
            let noise_coef = s.beta(t).sqrt() * (1.0 - s.beta_bar(t - 1)) / (1.0 - s.beta_bar(t)).sqrt();
            if t == 1 {
                assert!(noise_coef.abs() < 1e-15);
            }
            for i in 0..3 {
                assert!((mu[i] - (signal * h0[i] + noise_coef * z[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_are_sorted_and_complete() {
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        let plan = NoisingPlan::with(&Matrix::zeros(4, 2), &s, alloc::vec![3, 1, 3, 2], Matrix::zeros(4, 2));
        assert_eq!(
            plan.groups(),
            alloc::vec![(1, alloc::vec![1]), (2, alloc::vec![3]), (3, alloc::vec![0, 2])]
        );
    }

    #[test]
    fn zero_weights_predict_zero() {
        let mut store = ParamStore::new();
        let mut rng = seeded(4);
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        let d = Denoiser::new(&mut store, "d", &DenoiserConfig { hidden: 6, time_dim: 4, ..Default::default() }, 3, 4, 2, &mut rng).unwrap();
        store.zero_all();
        let h = normal_matrix(&mut rng, 2, 4);
        let c = normal_matrix(&mut rng, 2, 2);
        assert_eq!(d.predict(&store, &h, 2, &c).unwrap(), Matrix::zeros(2, 4));
        assert!(d.predict(&store, &h, 4, &c).is_err());
        let out = d.sample(&store, &s, &c, &mut rng).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn oracle_denoiser_has_zero_loss() {
        let mut rng = seeded(9);
        let s = make_schedule(5, 0.1, 0.5).unwrap();
        let plan = NoisingPlan::draw(&normal_matrix(&mut rng, 7, 3), &s, &mut rng);
        assert_eq!(squared_error_loss(&plan.noise, &plan.noise), 0.0);
    }
}
