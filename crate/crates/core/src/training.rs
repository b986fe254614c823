//! Joint training of the knowledge-enhanced synthesizer, unseen-feature
//! synthesis and the unseen-class classifier.
//!
//! One iteration runs `n_critic` critic updates on freshly sampled batches,
//! then one generator update of every non-critic parameter on
//! `L = L_W + λ1·L_R + λ2·L_G`:
//!
//! * `L_W = mean D(h, c) − mean D(H, c)` over real features `h` and decoded
//!   features `H`; gradients reach the generator through both `H` and the
//!   conditions `c`;
//! * `L_R`, the diffusion noise reconstruction loss on the same real batch and
//!   conditions;
//! * `L_G`, the graph denoising loss on the knowledge rows of every class.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{ClassId, FeatureRecord, FeatureSource, RegionFeatureSet, SemanticTable, Split};
use crate::error::{config_err, input_err, Error, Result};
use crate::graphs::{GraphKind, MultiSourceGraphSet};
use crate::linalg::Matrix;
use crate::msgf::{graph_denoising_loss_on, Msgf, MsgfConfig, MsgfShape};
use crate::nn::{Linear, LEAKY_SLOPE};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::rfdm::{make_schedule, reconstruction_loss_on, Denoiser, DenoiserConfig, DiffusionSchedule, NoisingPlan};
use crate::rng::{normal_matrix, substream, KefsRng};

/// Random stream ids derived from the configuration seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const SYNTHESIS: u64 = 3;
    pub const CLASSIFIER: u64 = 4;
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleConfig {
    pub steps: usize,
    pub gamma_1: f64,
    pub gamma_t: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            gamma_1: 8.5e-4,
            gamma_t: 1.2e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassifierConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop once the loss changes by less than this between epochs.
    pub tolerance: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            max_epochs: 500,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    /// Weight of the diffusion reconstruction loss.
    pub lambda_r: f64,
    /// Weight of the graph denoising loss.
    pub lambda_g: f64,
    pub alpha: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_critic: usize,
    pub gp_weight: f64,
    /// Critic hidden width; `4·a` when unset.
    pub critic_hidden: Option<usize>,
    pub seed: u64,
    pub synth_per_class: usize,
    pub msgf: MsgfConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub classifier: ClassifierConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_r: 0.1,
            lambda_g: 0.1,
            alpha: 0.7,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 200,
            n_critic: 5,
            gp_weight: 10.0,
            critic_hidden: None,
            seed: 0,
            synth_per_class: 500,
            msgf: MsgfConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_r >= 0.0 && self.lambda_g >= 0.0) {
            return Err(config_err!("loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.n_critic == 0 || self.synth_per_class == 0 {
            return Err(config_err!("batch size, epochs, critic steps and synthesis count must be at least 1"));
        }
        if !(self.adam.lr > 0.0) || !(self.gp_weight >= 0.0) {
            return Err(config_err!("learning rate must be positive and penalty weight non-negative"));
        }
        if self.critic_hidden == Some(0) {
            return Err(config_err!("critic hidden width must be positive"));
        }
        if !(self.classifier.lr > 0.0) || self.classifier.max_epochs == 0 {
            return Err(config_err!("classifier learning rate and epoch budget must be positive"));
        }
        self.msgf.validate()?;
        make_schedule(self.schedule.steps, self.schedule.gamma_1, self.schedule.gamma_t)?;
        Ok(())
    }
}

/// Feed-forward scorer `D(x, c)` with two LeakyReLU hidden layers.
#[derive(Clone, Copy, Debug)]
pub struct Critic {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub feature_dim: usize,
}

impl Critic {
    pub fn new(store: &mut ParamStore, name: &str, feature_dim: usize, cond_dim: usize, hidden: usize, rng: &mut KefsRng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), feature_dim + cond_dim, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, hidden, true, rng),
            l3: Linear::new(store, &format!("{name}.l3"), hidden, 1, true, rng),
            feature_dim,
        }
    }

    /// Scores, one row per example.
    pub fn score(&self, tape: &mut Tape, x: Var, c: Var) -> Var {
        let input = tape.concat_cols(&[x, c]);
        let h = self.l1.forward(tape, input);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.l2.forward(tape, h);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.l3.forward(tape, h)
    }

    /// `∇_x D(x, c)` per row, as a differentiable function of the critic
    /// weights. The LeakyReLU slopes at `x` enter as constants, which is exact
    /// wherever no pre-activation sits on a kink.
    pub fn input_gradient(&self, tape: &mut Tape, x: Var, c: Var) -> Var {
        let slope = |v: f64| if v > 0.0 { 1.0 } else { LEAKY_SLOPE };
        let input = tape.concat_cols(&[x, c]);
        let p1 = self.l1.forward(tape, input);
        let m1 = tape.value(p1).map(slope);
        let h = tape.leaky_relu(p1, LEAKY_SLOPE);
        let p2 = self.l2.forward(tape, h);
        let m2 = tape.value(p2).map(slope);
        let m1 = tape.constant(m1);
        let m2 = tape.constant(m2);

        let w3 = tape.param(self.l3.weight);
        let w3t = tape.transpose(w3);
        let g2 = tape.mul_row(m2, w3t);
        let w2 = tape.param(self.l2.weight);
        let w2t = tape.transpose(w2);
        let g1 = tape.matmul(g2, w2t);
        let g1 = tape.mul(g1, m1);
        let w1 = tape.param(self.l1.weight);
        let w1t = tape.transpose(w1);
        let w1x = tape.slice_cols(w1t, 0, self.feature_dim);
        tape.matmul(g1, w1x)
    }

    /// `mean_i (‖∇_x D(x̂_i, c_i)‖ − 1)²`.
    pub fn gradient_penalty(&self, tape: &mut Tape, x_hat: Var, c: Var) -> Var {
        let g = self.input_gradient(tape, x_hat, c);
        let norm = tape.row_norm(g);
        let rows = tape.shape(norm).0;
        let one = tape.constant(Matrix::filled(rows, 1, 1.0));
        let gap = tape.sub(norm, one);
        let sq = tape.square(gap);
        tape.mean(sq)
    }
}

fn mean_score(tape: &mut Tape, critic: &Critic, x: Var, c: Var) -> Var {
    let s = critic.score(tape, x, c);
    tape.mean(s)
}

/// Critic objective recorded on a tape, with interpolation weights `eps`
/// (one per row): `mean D(fake) − mean D(real) + w·GP(ε·real + (1−ε)·fake)`.
pub fn critic_loss_on(tape: &mut Tape, critic: &Critic, real: Var, fake: Var, cond: Var, gp_weight: f64, eps: &[f64]) -> Var {
    let d_real = mean_score(tape, critic, real, cond);
    let d_fake = mean_score(tape, critic, fake, cond);
    let w = tape.sub(d_fake, d_real);
    let x_hat = {
        let (r, f) = (tape.value(real), tape.value(fake));
        Matrix::from_fn(r.rows(), r.cols(), |i, j| eps[i] * r.get(i, j) + (1.0 - eps[i]) * f.get(i, j))
    };
    let x_hat = tape.constant(x_hat);
    let gp = critic.gradient_penalty(tape, x_hat, cond);
    let gp = tape.scale(gp, gp_weight);
    tape.add(w, gp)
}

fn check_batch(store: &ParamStore, critic: &Critic, x: &Matrix, cond: &Matrix) -> Result<()> {
    let input = store.get(critic.l1.weight).rows();
    if x.rows() == 0 || x.rows() != cond.rows() || x.cols() != critic.feature_dim || x.cols() + cond.cols() != input {
        return Err(input_err!(
            "critic expects non-empty batches of width {} + {}, got {:?} and {:?}",
            critic.feature_dim,
            input - critic.feature_dim,
            x.shape(),
            cond.shape()
        ));
    }
    Ok(())
}

/// Critic objective on plain matrices.
pub fn critic_loss(
    store: &ParamStore,
    critic: &Critic,
    real: &Matrix,
    fake: &Matrix,
    cond: &Matrix,
    gp_weight: f64,
    eps: &[f64],
) -> Result<f64> {
    check_batch(store, critic, real, cond)?;
    check_batch(store, critic, fake, cond)?;
    if eps.len() != real.rows() {
        return Err(input_err!("need one interpolation weight per row"));
    }
    let mut tape = Tape::with_params(store);
    let (r, f, c) = (tape.constant(real.clone()), tape.constant(fake.clone()), tape.constant(cond.clone()));
    let loss = critic_loss_on(&mut tape, critic, r, f, c, gp_weight, eps);
    Ok(tape.value(loss).item())
}

/// `−mean D(fake, c)`.
pub fn generator_loss(store: &ParamStore, critic: &Critic, fake: &Matrix, cond: &Matrix) -> Result<f64> {
    check_batch(store, critic, fake, cond)?;
    let mut tape = Tape::with_params(store);
    let (f, c) = (tape.constant(fake.clone()), tape.constant(cond.clone()));
    let s = mean_score(&mut tape, critic, f, c);
    Ok(-tape.value(s).item())
}

/// Every trainable weight plus the structure needed to run it.
#[derive(Clone, Debug)]
pub struct KefsModel {
    pub store: ParamStore,
    pub msgf: Msgf,
    pub denoiser: Denoiser,
    pub critic: Critic,
    pub schedule: DiffusionSchedule,
    pub shape: MsgfShape,
}

pub const MSGF_PREFIX: &str = "msgf";
pub const DENOISER_PREFIX: &str = "rfdm";
pub const CRITIC_PREFIX: &str = "critic";

impl KefsModel {
    /// Fresh parameters drawn from the configuration seed.
    pub fn new(config: &TrainConfig, shape: MsgfShape, available: &[GraphKind]) -> Result<Self> {
        config.validate()?;
        if shape.feature_dim == 0 || shape.word_dim == 0 || shape.classes == 0 {
            return Err(input_err!("model needs classes, word vectors and features"));
        }
        let mut rng = substream(config.seed, streams::INIT);
        let mut store = ParamStore::new();
        let msgf = Msgf::new(&mut store, MSGF_PREFIX, &config.msgf, shape, available, &mut rng)?;
        let schedule = make_schedule(config.schedule.steps, config.schedule.gamma_1, config.schedule.gamma_t)?;
        let cond_dim = config.msgf.content_dim;
        let denoiser = Denoiser::new(
            &mut store,
            DENOISER_PREFIX,
            &config.denoiser,
            schedule.steps(),
            shape.feature_dim,
            cond_dim,
            &mut rng,
        )?;
        let hidden = config.critic_hidden.unwrap_or(4 * shape.feature_dim);
        let critic = Critic::new(&mut store, CRITIC_PREFIX, shape.feature_dim, cond_dim, hidden, &mut rng);
        Ok(Self {
            store,
            msgf,
            denoiser,
            critic,
            schedule,
            shape,
        })
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        let critic = format!("{CRITIC_PREFIX}.");
        self.store
            .iter()
            .filter(|(_, name, _)| !name.starts_with(&critic))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(CRITIC_PREFIX).collect()
    }

    pub fn noise_dim(&self) -> usize {
        self.msgf.noise_dim(&self.store)
    }

    fn check_context(&self, semantics: &SemanticTable, graphs: &MultiSourceGraphSet) -> Result<()> {
        if semantics.len() != self.shape.classes
            || semantics.word_dim() != self.shape.word_dim
            || semantics.attr_dim() != self.shape.attr_dim
        {
            return Err(input_err!(
                "semantic table ({} classes, word dim {}, attribute dim {}) does not match the model",
                semantics.len(),
                semantics.word_dim(),
                semantics.attr_dim()
            ));
        }
        if graphs.class_count() != self.shape.classes {
            return Err(input_err!("graphs cover {} classes, model has {}", graphs.class_count(), self.shape.classes));
        }
        Ok(())
    }

    /// Fused conditioning rows for class indices `labels`, one fresh noise
    /// row per entry.
    pub fn conditions(
        &self,
        semantics: &SemanticTable,
        graphs: &MultiSourceGraphSet,
        labels: &[usize],
        rng: &mut KefsRng,
    ) -> Result<Matrix> {
        self.check_context(semantics, graphs)?;
        let noise = normal_matrix(rng, labels.len(), self.noise_dim());
        let mut tape = Tape::with_params(&self.store);
        let s = self.msgf.knowledge(&mut tape, graphs, semantics)?;
        let z = tape.constant(noise);
        let style = tape.gather_rows(s, labels);
        let content = self.msgf.content_for(&mut tape, semantics, labels, z);
        let cond = self.msgf.decoder.first_block(&mut tape, content, style);
        Ok(tape.value(cond).clone())
    }
}

/// The conditioning row of one class.
pub fn condition_vector(
    model: &KefsModel,
    class_id: ClassId,
    graphs: &MultiSourceGraphSet,
    semantics: &SemanticTable,
    rng: &mut KefsRng,
) -> Result<Vec<f64>> {
    let idx = semantics
        .index_of(class_id)
        .ok_or_else(|| input_err!("class {class_id} is not in the semantic table"))?;
    Ok(model.conditions(semantics, graphs, &[idx], rng)?.into_vec())
}

/// Everything random about one generator step, drawn up front.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// Semantic-table row of each example.
    pub labels: Vec<usize>,
    pub real: Matrix,
    pub noise: Matrix,
    pub plan: NoisingPlan,
}

impl TrainBatch {
    pub fn draw(model: &KefsModel, labels: Vec<usize>, real: Matrix, rng: &mut KefsRng) -> Self {
        let noise = normal_matrix(rng, labels.len(), model.noise_dim());
        let plan = NoisingPlan::draw(&real, &model.schedule, rng);
        Self { labels, real, noise, plan }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub l_w: f64,
    pub l_r: f64,
    pub l_g: f64,
    pub total: f64,
}

/// Tape nodes of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_w: Var,
    pub l_r: Var,
    pub l_g: Var,
    pub total: Var,
}

/// Records `L_W + λ1·L_R + λ2·L_G` for one batch.
pub fn total_loss_on(
    tape: &mut Tape,
    model: &KefsModel,
    semantics: &SemanticTable,
    graphs: &MultiSourceGraphSet,
    batch: &TrainBatch,
    config: &TrainConfig,
) -> Result<LossVars> {
    let s = model.msgf.knowledge(tape, graphs, semantics)?;
    let z = tape.constant(batch.noise.clone());
    let (cond, fake) = model.msgf.generate(tape, s, semantics, &batch.labels, z);
    let real = tape.constant(batch.real.clone());
    let d_real = mean_score(tape, &model.critic, real, cond);
    let d_fake = mean_score(tape, &model.critic, fake, cond);
    let l_w = tape.sub(d_real, d_fake);

    let l_r = reconstruction_loss_on(tape, &model.denoiser, &batch.plan, cond);

    let logical: Vec<&Matrix> = graphs.available().into_iter().filter_map(|k| graphs.logical(k)).collect();
    let head = tape.param(model.msgf.graph_head);
    let own: Vec<usize> = (0..model.shape.classes).collect();
    let l_g = graph_denoising_loss_on(tape, s, &own, &logical, head, config.alpha);

    let wr = tape.scale(l_r, config.lambda_r);
    let wg = tape.scale(l_g, config.lambda_g);
    let total = tape.add(l_w, wr);
    let total = tape.add(total, wg);
    Ok(LossVars { l_w, l_r, l_g, total })
}

fn breakdown(tape: &Tape, vars: &LossVars) -> Result<LossBreakdown> {
    let out = LossBreakdown {
        l_w: tape.value(vars.l_w).item(),
        l_r: tape.value(vars.l_r).item(),
        l_g: tape.value(vars.l_g).item(),
        total: tape.value(vars.total).item(),
    };
    for (term, v) in [("L_W", out.l_w), ("L_R", out.l_r), ("L_G", out.l_g), ("total", out.total)] {
        if !v.is_finite() {
            return Err(Error::Training {
                term: term.to_string(),
                detail: format!("value {v}"),
            });
        }
    }
    Ok(out)
}

/// The generator objective and its terms for one batch.
pub fn total_loss(
    model: &KefsModel,
    semantics: &SemanticTable,
    graphs: &MultiSourceGraphSet,
    batch: &TrainBatch,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    model.check_context(semantics, graphs)?;
    let mut tape = Tape::with_params(&model.store);
    let vars = total_loss_on(&mut tape, model, semantics, graphs, batch, config)?;
    breakdown(&tape, &vars)
}

/// Per-epoch means of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLoss {
    pub epoch: usize,
    #[cfg_attr(feature = "serde", serde(rename = "L_W"))]
    pub l_w: f64,
    #[cfg_attr(feature = "serde", serde(rename = "L_R"))]
    pub l_r: f64,
    #[cfg_attr(feature = "serde", serde(rename = "L_G"))]
    pub l_g: f64,
    pub total: f64,
    /// Mean critic objective over the epoch's critic steps.
    pub critic: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: KefsModel,
    pub trace: Vec<EpochLoss>,
}

/// Seen-class training examples as semantic-table rows and a feature matrix.
fn seen_examples(features: &RegionFeatureSet, semantics: &SemanticTable) -> Result<(Vec<usize>, Matrix)> {
    if features.is_empty() {
        return Err(input_err!("no training features"));
    }
    let mut labels = Vec::with_capacity(features.len());
    for r in features.records() {
        let idx = semantics
            .index_of(r.class_id)
            .ok_or_else(|| input_err!("training feature has class {} which is not in the semantic table", r.class_id))?;
        if semantics.classes()[idx].split != Split::Seen {
            return Err(input_err!(
                "training features include unseen class {}; only seen-class features may be used",
                r.class_id
            ));
        }
        labels.push(idx);
    }
    Ok((labels, features.feature_matrix()))
}

fn sample_rows(rng: &mut KefsRng, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

fn critic_step(
    model: &mut KefsModel,
    opt: &mut Adam,
    semantics: &SemanticTable,
    graphs: &MultiSourceGraphSet,
    labels: &[usize],
    real: &Matrix,
    config: &TrainConfig,
    rng: &mut KefsRng,
) -> Result<f64> {
    let rows = sample_rows(rng, labels.len(), config.batch_size.min(labels.len()));
    let batch_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    let noise = normal_matrix(rng, rows.len(), model.noise_dim());
    let eps: Vec<f64> = (0..rows.len()).map(|_| rng.random::<f64>()).collect();
    let grads = {
        let mut tape = Tape::with_params(&model.store);
        let s = model.msgf.knowledge(&mut tape, graphs, semantics)?;
        let z = tape.constant(noise);
        let (cond, fake) = model.msgf.generate(&mut tape, s, semantics, &batch_labels, z);
        let cond = tape.detach(cond);
        let fake = tape.detach(fake);
        let real = tape.constant(real.select_rows(&rows));
        let loss = critic_loss_on(&mut tape, &model.critic, real, fake, cond, config.gp_weight, &eps);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training {
                term: "critic".into(),
                detail: format!("value {value}"),
            });
        }
        (tape.backward(loss), value)
    };
    opt.step(&mut model.store, &grads.0);
    Ok(grads.1)
}

/// Alternating adversarial training on seen-class features.
pub fn train_kefs(
    features: &RegionFeatureSet,
    semantics: &SemanticTable,
    graphs: &MultiSourceGraphSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (labels, real) = seen_examples(features, semantics)?;
    let shape = MsgfShape {
        classes: semantics.len(),
        word_dim: semantics.word_dim(),
        attr_dim: semantics.attr_dim(),
        feature_dim: features.dim(),
    };
    let mut model = KefsModel::new(config, shape, &graphs.available())?;
    model.check_context(semantics, graphs)?;
    let mut rng = substream(config.seed, streams::TRAIN);
    let mut gen_opt = Adam::new(config.adam, &model.store, model.generator_ids());
    let mut critic_opt = Adam::new(config.adam, &model.store, model.critic_ids());
    let n = labels.len();
    let batch = config.batch_size.min(n);
    let iterations = n.div_ceil(batch);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let order = crate::rng::permutation(&mut rng, n);
        let mut sums = LossBreakdown::default();
        let mut critic_sum = 0.0;
        for it in 0..iterations {
            for _ in 0..config.n_critic {
                critic_sum += critic_step(&mut model, &mut critic_opt, semantics, graphs, &labels, &real, config, &mut rng)?;
            }
            let rows: Vec<usize> = order.iter().cycle().skip(it * batch).take(batch).copied().collect();
            let batch = TrainBatch::draw(&model, rows.iter().map(|&r| labels[r]).collect(), real.select_rows(&rows), &mut rng);
            let (grads, terms) = {
                let mut tape = Tape::with_params(&model.store);
                let vars = total_loss_on(&mut tape, &model, semantics, graphs, &batch, config)?;
                let terms = breakdown(&tape, &vars)?;
                (tape.backward(vars.total), terms)
            };
            gen_opt.step(&mut model.store, &grads);
            sums.l_w += terms.l_w;
            sums.l_r += terms.l_r;
            sums.l_g += terms.l_g;
            sums.total += terms.total;
        }
        let k = iterations as f64;
        trace.push(EpochLoss {
            epoch,
            l_w: sums.l_w / k,
            l_r: sums.l_r / k,
            l_g: sums.l_g / k,
            total: sums.total / k,
            critic: critic_sum / (k * config.n_critic as f64),
        });
    }
    Ok(TrainOutcome { model, trace })
}

/// Draws `count` diffusion samples for every unseen class in table order.
pub fn synthesize_unseen(
    model: &KefsModel,
    semantics: &SemanticTable,
    graphs: &MultiSourceGraphSet,
    count: usize,
    rng: &mut KefsRng,
) -> Result<RegionFeatureSet> {
    if count == 0 {
        return Err(config_err!("synthesis count must be at least 1"));
    }
    let unseen = semantics.indices(Split::Unseen);
    if unseen.is_empty() {
        return Err(input_err!("the semantic table has no unseen classes"));
    }
    let mut records = Vec::with_capacity(unseen.len() * count);
    for idx in unseen {
        let cond = model.conditions(semantics, graphs, &vec![idx; count], rng)?;
        let samples = model.denoiser.sample(&model.store, &model.schedule, &cond, rng)?;
        if !samples.is_finite() {
            return Err(Error::Training {
                term: "sampling".into(),
                detail: format!("non-finite feature for class {}", semantics.classes()[idx].id),
            });
        }
        let id = semantics.classes()[idx].id;
        records.extend((0..count).map(|r| FeatureRecord {
            class_id: id,
            feature: samples.row(r).to_vec(),
            source: FeatureSource::Synthesized,
        }));
    }
    RegionFeatureSet::new(model.shape.feature_dim, records)
}

/// Linear softmax classifier over unseen classes. Row `k` of `weights`
/// scores `classes[k]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnseenClassifier {
    pub classes: Vec<ClassId>,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl UnseenClassifier {
    pub fn new(classes: Vec<ClassId>, weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if classes.is_empty() || weights.rows() != classes.len() || bias.len() != classes.len() {
            return Err(input_err!(
                "classifier with {} classes needs {} weight rows and biases, got {} and {}",
                classes.len(),
                classes.len(),
                weights.rows(),
                bias.len()
            ));
        }
        Ok(Self { classes, weights, bias })
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Class scores for each row of `x`.
    pub fn logits(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul_t(&self.weights);
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        out
    }

    /// Highest-scoring class per row; ties go to the earlier class.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<ClassId>> {
        if x.cols() != self.dim() {
            return Err(input_err!("features have dimension {}, classifier expects {}", x.cols(), self.dim()));
        }
        let logits = self.logits(x);
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let best = (1..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                self.classes[best]
            })
            .collect())
    }
}

/// Mean softmax cross-entropy and its gradient for the classifier.
fn softmax_ce(clf: &UnseenClassifier, x: &Matrix, targets: &[usize]) -> (f64, Matrix, Vec<f64>) {
    let logits = clf.logits(x);
    let n = x.rows() as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| libm::exp(v - m)).sum();
        loss += m + libm::log(z) - row[targets[r]];
        for (k, v) in row.iter().enumerate() {
            let p = libm::exp(v - m) / z;
            let y = if k == targets[r] { 1.0 } else { 0.0 };
            dlogits.set(r, k, (p - y) / n);
        }
    }
    let dw = dlogits.t_matmul(x);
    let db = (0..dlogits.cols()).map(|k| (0..dlogits.rows()).map(|r| dlogits.get(r, k)).sum()).collect();
    (loss / n, dw, db)
}

/// Full-batch gradient descent on mean cross-entropy from zero weights,
/// classes in ascending id order.
pub fn fit_unseen_classifier(features: &RegionFeatureSet, config: &ClassifierConfig) -> Result<UnseenClassifier> {
    let mut classes = features.class_ids();
    classes.sort_unstable();
    if classes.len() < 2 {
        return Err(input_err!("classifier needs at least two classes, got {}", classes.len()));
    }
    let targets: Vec<usize> = features
        .records()
        .iter()
        .map(|r| classes.binary_search(&r.class_id).expect("class collected above"))
        .collect();
    let x = features.feature_matrix();
    let c = classes.len();
    let mut clf = UnseenClassifier::new(classes, Matrix::zeros(c, features.dim()), vec![0.0; c])?;
    let mut previous = f64::INFINITY;
    for _ in 0..config.max_epochs {
        let (loss, dw, db) = softmax_ce(&clf, &x, &targets);
        if !loss.is_finite() {
            return Err(Error::Training {
                term: "classifier".into(),
                detail: format!("loss {loss}"),
            });
        }
        if libm::fabs(previous - loss) < config.tolerance {
            break;
        }
        previous = loss;
        clf.weights = clf.weights.sub(&dw.scale(config.lr));
        for (b, g) in clf.bias.iter_mut().zip(&db) {
            *b -= config.lr * g;
        }
    }
    Ok(clf)
}

/// Mean cross-entropy of a classifier on labeled features.
pub fn classifier_loss(clf: &UnseenClassifier, features: &RegionFeatureSet) -> Result<f64> {
    let targets = features
        .records()
        .iter()
        .map(|r| {
            clf.classes
                .iter()
                .position(|&c| c == r.class_id)
                .ok_or_else(|| input_err!("class {} is not scored by the classifier", r.class_id))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax_ce(clf, &features.feature_matrix(), &targets).0)
}
