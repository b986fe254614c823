mod common;

use kefs_core::autodiff::Tape;
use kefs_core::graphs::{GraphKind, MultiSourceGraphSet};
use kefs_core::msgf::{
    adain, content_encode, fuse_graph_embeddings, fusion_decode, graph_denoising_loss, graph_denoising_loss_on,
    knowledge_encode, AttentionStack, ContentEncoder, FusionDecoder, KnowledgeEncoder, Msgf, MsgfConfig, MsgfShape,
};
use kefs_core::params::ParamStore;
use kefs_core::rng::{normal_matrix, seeded};
use kefs_core::{Error, Matrix};

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn linear(x: &Matrix, w: &Matrix, b: Option<&Matrix>) -> Matrix {
    let y = x.matmul(w);
    match b {
        Some(b) => Matrix::from_fn(y.rows(), y.cols(), |i, j| y.get(i, j) + b.get(0, j)),
        None => y,
    }
}

#[test]
fn zero_keys_and_values_give_zero_knowledge() {
    let mut rng = seeded(1);
    let mut store = ParamStore::new();
    let enc = KnowledgeEncoder::new(&mut store, "k", 3, 8, 2, 4, &mut rng);
    let s = knowledge_encode(&store, &enc, &Matrix::zeros(3, 8), &Matrix::zeros(3, 8)).unwrap();
    assert_eq!(s, Matrix::zeros(3, 8));
}

#[test]
fn single_layer_single_head_matches_attention_oracle() {
    let mut rng = seeded(2);
    let mut store = ParamStore::new();
    let enc = KnowledgeEncoder::new(&mut store, "k", 2, 4, 1, 1, &mut rng);
    assert!(enc.refine.is_empty());
    let f = normal_matrix(&mut rng, 2, 4);
    let v = normal_matrix(&mut rng, 2, 4);
    let s = knowledge_encode(&store, &enc, &f, &v).unwrap();

    let q = store.get(enc.queries).matmul(store.get(enc.readout.wq));
    let k = f.matmul(store.get(enc.readout.wk));
    let vv = v.matmul(store.get(enc.readout.wv));
    let mut mixed = Matrix::zeros(2, 4);
    for i in 0..2 {
        let scores: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / 2.0)
            .collect();
        let w = softmax(&scores);
        for c in 0..4 {
            mixed.set(i, c, w[0] * vv.get(0, c) + w[1] * vv.get(1, c));
        }
    }
    let expected = mixed.matmul(store.get(enc.readout.wo));
    assert!(s.max_abs_diff(&expected) < 1e-10);
}

#[test]
fn mismatched_queries_are_a_state_error() {
    let mut rng = seeded(3);
    let mut store = ParamStore::new();
    let enc = KnowledgeEncoder::new(&mut store, "k", 2, 4, 1, 2, &mut rng);
    let err = knowledge_encode(&store, &enc, &Matrix::zeros(3, 4), &Matrix::zeros(3, 4)).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn default_config_uses_four_heads_and_six_layers() {
    let c = MsgfConfig::default();
    assert_eq!((c.heads, c.layers), (4, 6));
    assert_eq!(c.model_dim, 64);
    assert_eq!(c.content_dim, 64);
}

#[test]
fn fusion_is_deterministic_and_checks_widths() {
    let mut rng = seeded(4);
    let mut store = ParamStore::new();
    let stack = AttentionStack::new(&mut store, "f", 4, 2, 2, &mut rng);
    let e = normal_matrix(&mut rng, 3, 4);
    let a = fuse_graph_embeddings(&store, &stack, &e, &e).unwrap();
    let b = fuse_graph_embeddings(&store, &stack, &e, &e).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), (3, 4));
    assert!(matches!(
        fuse_graph_embeddings(&store, &stack, &e, &Matrix::zeros(3, 6)),
        Err(Error::Input(_))
    ));
}

#[test]
fn content_encoder_matches_two_matmul_oracle() {
    let mut rng = seeded(5);
    let mut store = ParamStore::new();
    let enc = ContentEncoder::new(&mut store, "c", 5, 4, &mut rng);
    let b1 = enc.fc1.bias.unwrap();
    let b2 = enc.fc2.bias.unwrap();
    *store.get_mut(b1) = normal_matrix(&mut rng, 1, 4);
    *store.get_mut(b2) = normal_matrix(&mut rng, 1, 4);
    let v = normal_matrix(&mut rng, 2, 3);
    let z = normal_matrix(&mut rng, 2, 2);
    let n = content_encode(&store, &enc, &v, &z).unwrap();
    assert_eq!(n, content_encode(&store, &enc, &v, &z).unwrap());

    let x = Matrix::hconcat(&[&v, &z]);
    let h = linear(&x, store.get(enc.fc1.weight), Some(store.get(b1))).map(lrelu);
    let expected = linear(&h, store.get(enc.fc2.weight), Some(store.get(b2))).map(lrelu);
    assert!(n.max_abs_diff(&expected) < 1e-12);

    store.get_mut(enc.fc1.weight).data_mut().fill(0.0);
    store.get_mut(enc.fc2.weight).data_mut().fill(0.0);
    let n = content_encode(&store, &enc, &v, &z).unwrap();
    let bias_only = store.get(b2).map(lrelu);
    for r in 0..2 {
        assert_eq!(n.row(r), bias_only.row(0));
    }
    assert!(content_encode(&store, &enc, &v, &Matrix::zeros(2, 3)).is_err());
}

#[test]
fn fusion_decoder_matches_composed_oracle() {
    let mut rng = seeded(6);
    let mut store = ParamStore::new();
    let dec = FusionDecoder::new(&mut store, "d", 3, 5, 6, &mut rng);
    for lin in [dec.style1, dec.mid, dec.style2, dec.out] {
        *store.get_mut(lin.bias.unwrap()) = normal_matrix(&mut rng, 1, store.get(lin.weight).cols());
    }
    let n = normal_matrix(&mut rng, 1, 5);
    let s = normal_matrix(&mut rng, 1, 3);
    let h = fusion_decode(&store, &dec, &n, &s).unwrap();
    assert_eq!(h.shape(), (1, 6));

    let lin = |l: kefs_core::nn::Linear, x: &Matrix| linear(x, store.get(l.weight), l.bias.map(|b| store.get(b)));
    let x = adain(&n, &lin(dec.style1, &s)).unwrap();
    let x = adain(&lin(dec.mid, &x), &lin(dec.style2, &s)).unwrap();
    let expected = lin(dec.out, &x);
    assert!(h.max_abs_diff(&expected) < 1e-12);

    store.get_mut(dec.out.weight).data_mut().fill(0.0);
    store.get_mut(dec.out.bias.unwrap()).data_mut().fill(0.0);
    assert_eq!(fusion_decode(&store, &dec, &n, &s).unwrap(), Matrix::zeros(1, 6));
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise summation with the per-entry formula written out.
fn graph_loss_oracle(s: &Matrix, labels: &[usize], graphs: &[Matrix], head: &Matrix, alpha: f64) -> f64 {
    let l = s.matmul(head);
    let (n, c) = l.shape();
    let mut total = 0.0;
    for a in graphs {
        for i in 0..n {
            let mut term = 0.0;
            for j in 0..c {
                let p = sigmoid(l.get(i, j));
                let y = if labels[i] == j { 1.0 } else { 0.0 };
                term -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                let b: f64 = (0..n).map(|k| a.get(i, k) * l.get(k, j)).sum();
                term -= alpha * p * sigmoid(b).ln();
            }
            total += term;
        }
    }
    total / (graphs.len() * n) as f64
}

#[test]
fn graph_loss_matches_scalar_oracle() {
    let mut rng = seeded(7);
    let raw = |rng: &mut _| {
        let m = kefs_core::rng::uniform_matrix(rng, 3, 3, 0.0, 1.0);
        m.add(&m.transpose())
    };
    let set = MultiSourceGraphSet::from_raw([Some(raw(&mut rng)), Some(raw(&mut rng)), Some(raw(&mut rng))], 0.4).unwrap();
    let logical: Vec<Matrix> = GraphKind::ALL.iter().map(|&k| set.logical(k).unwrap().clone()).collect();
    let s = normal_matrix(&mut rng, 3, 5);
    let head = normal_matrix(&mut rng, 5, 3);
    for alpha in [0.0, 0.7, 1.0] {
        let got = graph_denoising_loss(&s, &[0, 1, 2], &set, &head, alpha).unwrap();
        assert!((got - graph_loss_oracle(&s, &[0, 1, 2], &logical, &head, alpha)).abs() < 1e-10);
    }
    // with alpha = 0 the graphs drop out entirely
    let bce = graph_denoising_loss(&s, &[0, 1, 2], &MultiSourceGraphSet::identity(3, 0.4), &head, 0.0).unwrap();
    let plain = graph_denoising_loss(&s, &[0, 1, 2], &set, &head, 0.0).unwrap();
    assert!((bce - plain).abs() < 1e-12);
    assert!(graph_denoising_loss(&s, &[0, 1, 2], &set, &head, 1.5).is_err());
    let huge = Matrix::filled(3, 5, f64::INFINITY);
    assert!(matches!(
        graph_denoising_loss(&huge, &[0, 1, 2], &set, &head, 0.7),
        Err(Error::Training { .. })
    ));
}

#[test]
fn graph_loss_decreases_under_gradient_descent() {
    let mut rng = seeded(8);
    let mut store = ParamStore::new();
    let s = store.insert("s", normal_matrix(&mut rng, 3, 4));
    let head = store.insert("head", normal_matrix(&mut rng, 4, 3));
    let a = Matrix::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    let mut losses = Vec::new();
    for _ in 0..60 {
        let grads = {
            let mut tape = Tape::with_params(&store);
            let (sv, hv) = (tape.param(s), tape.param(head));
            let loss = graph_denoising_loss_on(&mut tape, sv, &[0, 1, 2], &[&a], hv, 0.7);
            losses.push(tape.value(loss).item());
            tape.backward(loss)
        };
        for id in [s, head] {
            let g = grads.param(id).unwrap().scale(0.1);
            *store.get_mut(id) = store.get(id).sub(&g);
        }
    }
    let violations = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations * 10 <= losses.len(), "{violations} increases");
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn msgf_knowledge_has_one_row_per_class() {
    let mut rng = seeded(9);
    let sem = common::semantics(3, 6, 4, &[2], &mut rng);
    let graphs = common::graphs(3, &mut rng);
    let mut store = ParamStore::new();
    let cfg = MsgfConfig {
        gcn_latent: 4,
        model_dim: 8,
        content_dim: 8,
        heads: 4,
        layers: 2,
        ..MsgfConfig::default()
    };
    let shape = MsgfShape {
        classes: 3,
        word_dim: 6,
        attr_dim: 4,
        feature_dim: 5,
    };
    let m = Msgf::new(&mut store, "m", &cfg, shape, &graphs.available(), &mut rng).unwrap();
    let mut tape = Tape::with_params(&store);
    let s = m.knowledge(&mut tape, &graphs, &sem).unwrap();
    assert_eq!(tape.shape(s), (3, 8));
    assert!(tape.value(s).is_finite());

    // without the probability graph the value branch has no source
    let no_prob = MultiSourceGraphSet::from_raw([None, Some(Matrix::identity(3)), None], 0.4).unwrap();
    let mut store = ParamStore::new();
    assert!(matches!(
        Msgf::new(&mut store, "m", &cfg, shape, &no_prob.available(), &mut rng),
        Err(Error::Config(_))
    ));
}
