//! Gradient checks of every trainable component on instances with at most 3
//! classes and 8 dimensions. Each function builds its own seeded instance and
//! returns the worst entry found.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{check_params, GradCheck};
use crate::autodiff::{Tape, Var};
use crate::data::{ClassSemantics, SemanticTable, Split};
use crate::gcn::GcnWeights;
use crate::graphs::{GraphKind, MultiSourceGraphSet};
use crate::linalg::Matrix;
use crate::msgf::{
    graph_denoising_loss_on, AttentionStack, ContentEncoder, FusionDecoder, KnowledgeEncoder, MsgfConfig, MsgfShape,
};
use crate::params::ParamStore;
use crate::rfdm::{make_schedule, reconstruction_loss_on, Denoiser, DenoiserConfig, NoisingPlan};
use crate::rng::{normal_matrix, seeded, uniform_matrix};
use crate::training::{critic_loss_on, total_loss_on, Critic, KefsModel, ScheduleConfig, TrainBatch, TrainConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
/// Largest relative error accepted.
pub const TOLERANCE: f64 = 1e-4;

/// Weighted sum with fixed random weights, so every output entry matters.
fn probe(tape: &mut Tape, out: Var, weights: &Matrix) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w);
    tape.sum(p)
}

pub fn gcn() -> GradCheck {
    let mut rng = seeded(1);
    let mut store = ParamStore::new();
    let g = GcnWeights::new(&mut store, "g", 5, 4, &mut rng);
    let v = normal_matrix(&mut rng, 3, 5);
    let a = Matrix::from_rows(&[[0.5, 0.5, 0.0], [0.5, 0.25, 0.25], [0.0, 0.25, 0.75]]).expect("square");
    let w = normal_matrix(&mut rng, 3, 5);
    check_params(&store, &[], STEP, |t| {
        let (v, a) = (t.constant(v.clone()), t.constant(a.clone()));
        let out = g.forward(t, v, a);
        probe(t, out, &w)
    })
}

/// Cross-attention when `cross`, self-attention otherwise.
pub fn attention(cross: bool) -> GradCheck {
    let mut rng = seeded(2);
    let mut store = ParamStore::new();
    let stack = AttentionStack::new(&mut store, "s", 4, 2, 2, &mut rng);
    let q = normal_matrix(&mut rng, 3, 4);
    let ctx = normal_matrix(&mut rng, 3, 4);
    let w = normal_matrix(&mut rng, 3, 4);
    check_params(&store, &[], STEP, |t| {
        let qv = t.constant(q.clone());
        let c = cross.then(|| t.constant(ctx.clone()));
        let out = stack.forward(t, qv, c);
        probe(t, out, &w)
    })
}

pub fn knowledge_encoder() -> GradCheck {
    let mut rng = seeded(3);
    let mut store = ParamStore::new();
    let enc = KnowledgeEncoder::new(&mut store, "k", 3, 4, 2, 2, &mut rng);
    let f = normal_matrix(&mut rng, 3, 4);
    let v = normal_matrix(&mut rng, 3, 4);
    let w = normal_matrix(&mut rng, 3, 4);
    check_params(&store, &[], STEP, |t| {
        let (fv, vv) = (t.constant(f.clone()), t.constant(v.clone()));
        let out = enc.forward(t, fv, vv);
        probe(t, out, &w)
    })
}

/// Content encoder feeding the AdaIN fusion decoder.
pub fn content_and_decoder() -> GradCheck {
    let mut rng = seeded(4);
    let mut store = ParamStore::new();
    let enc = ContentEncoder::new(&mut store, "c", 7, 6, &mut rng);
    let dec = FusionDecoder::new(&mut store, "d", 4, 6, 8, &mut rng);
    let word = normal_matrix(&mut rng, 3, 5);
    let noise = normal_matrix(&mut rng, 3, 2);
    let s = normal_matrix(&mut rng, 3, 4);
    let w = normal_matrix(&mut rng, 3, 8);
    check_params(&store, &[], STEP, |t| {
        let (a, b, sv) = (t.constant(word.clone()), t.constant(noise.clone()), t.constant(s.clone()));
        let n = enc.forward(t, &[a, b]);
        let out = dec.forward(t, n, sv);
        probe(t, out, &w)
    })
}

/// Graph denoising loss with respect to the head and the knowledge rows.
pub fn graph_loss() -> GradCheck {
    let mut rng = seeded(5);
    let mut store = ParamStore::new();
    let s = store.insert("s", normal_matrix(&mut rng, 3, 4));
    let head = store.insert("head", normal_matrix(&mut rng, 4, 3));
    let g1 = Matrix::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).expect("square");
    let g2 = Matrix::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0]]).expect("square");
    check_params(&store, &[], STEP, |t| {
        let (sv, hv) = (t.param(s), t.param(head));
        graph_denoising_loss_on(t, sv, &[0, 1, 2], &[&g1, &g2], hv, 0.7)
    })
}

/// Diffusion reconstruction loss with per-timestep or shared blocks.
pub fn denoiser(share_timestep_params: bool) -> GradCheck {
    let mut rng = seeded(6);
    let mut store = ParamStore::new();
    let sched = make_schedule(3, 0.1, 0.4).expect("valid schedule");
    let cfg = DenoiserConfig {
        hidden: 5,
        time_dim: 2,
        share_timestep_params,
        ..DenoiserConfig::default()
    };
    let d = Denoiser::new(&mut store, "rfdm", &cfg, 3, 4, 3, &mut rng).expect("valid denoiser");
    let h0 = normal_matrix(&mut rng, 3, 4);
    let plan = NoisingPlan::with(&h0, &sched, vec![1, 3, 3], normal_matrix(&mut rng, 3, 4));
    let cond = normal_matrix(&mut rng, 3, 3);
    check_params(&store, &[], STEP, |t| {
        let c = t.constant(cond.clone());
        reconstruction_loss_on(t, &d, &plan, c)
    })
}

pub fn critic() -> GradCheck {
    let mut rng = seeded(7);
    let mut store = ParamStore::new();
    let critic = Critic::new(&mut store, "critic", 4, 3, 6, &mut rng);
    let real = normal_matrix(&mut rng, 3, 4);
    let fake = normal_matrix(&mut rng, 3, 4);
    let cond = normal_matrix(&mut rng, 3, 3);
    let eps = [0.2, 0.5, 0.9];
    check_params(&store, &[], STEP, |t| {
        let (r, f, c) = (t.constant(real.clone()), t.constant(fake.clone()), t.constant(cond.clone()));
        critic_loss_on(t, &critic, r, f, c, 10.0, &eps)
    })
}

/// Tiny end-to-end instance: 3 classes, one unseen, 8-dim word vectors and
/// features.
pub fn total_loss() -> GradCheck {
    let mut rng = seeded(8);
    let word = normal_matrix(&mut rng, 3, 8);
    let attr = normal_matrix(&mut rng, 3, 5);
    let semantics = SemanticTable::new(
        (0..3)
            .map(|i| ClassSemantics {
                id: i as u64,
                name: format!("class{i}"),
                split: if i == 2 { Split::Unseen } else { Split::Seen },
                word_vec: word.row(i).to_vec(),
                attr_vec: attr.row(i).to_vec(),
            })
            .collect(),
    )
    .expect("consistent table");
    let mut sym = || {
        let m = uniform_matrix(&mut rng, 3, 3, 0.0, 1.0);
        Some(m.add(&m.transpose()))
    };
    let raw = [sym(), sym(), sym()];
    let graphs = MultiSourceGraphSet::from_raw(raw, 0.4).expect("valid graphs");
    let config = TrainConfig {
        critic_hidden: Some(6),
        msgf: MsgfConfig {
            gcn_latent: 3,
            model_dim: 4,
            content_dim: 4,
            heads: 2,
            layers: 2,
            noise_dim: Some(2),
            ..MsgfConfig::default()
        },
        denoiser: DenoiserConfig {
            hidden: 5,
            time_dim: 2,
            ..DenoiserConfig::default()
        },
        schedule: ScheduleConfig {
            steps: 3,
            gamma_1: 0.1,
            gamma_t: 0.4,
        },
        ..TrainConfig::default()
    };
    let shape = MsgfShape {
        classes: 3,
        word_dim: 8,
        attr_dim: 5,
        feature_dim: 8,
    };
    let model = KefsModel::new(&config, shape, &GraphKind::ALL).expect("valid model");
    let real = normal_matrix(&mut rng, 3, 8);
    let batch = TrainBatch::draw(&model, vec![0, 1, 0], real, &mut rng);
    let ids = model.generator_ids();
    check_params(&model.store, &ids, STEP, |t| {
        total_loss_on(t, &model, &semantics, &graphs, &batch, &config)
            .expect("instance matches the model")
            .total
    })
}

/// Every check above, labeled.
pub fn all() -> Vec<(&'static str, GradCheck)> {
    vec![
        ("gcn", gcn()),
        ("cross-attention", attention(true)),
        ("self-attention", attention(false)),
        ("knowledge encoder", knowledge_encoder()),
        ("content encoder + AdaIN decoder", content_and_decoder()),
        ("graph loss head", graph_loss()),
        ("denoiser (per step)", denoiser(false)),
        ("denoiser (shared)", denoiser(true)),
        ("critic + gradient penalty", critic()),
        ("total loss", total_loss()),
    ]
}
