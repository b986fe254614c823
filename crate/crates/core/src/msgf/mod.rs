//! Multi-source graph fusion.
//!
//! Word and attribute vectors are embedded by per-graph convolutions,
//! projected to a common width `z`, fused by cross-attention (word queries
//! attend to attribute keys/values), and read out by a knowledge encoder whose
//! learnable queries attend over the fused keys and a self-attention encoding
//! of the probability-graph word embeddings. The resulting knowledge rows `S`
//! style the semantic content `N` through two AdaIN blocks and a final
//! projection into instance features `H`.

pub mod attention;
pub mod decoder;

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::data::SemanticTable;
use crate::error::{config_err, input_err, Error, Result};
use crate::gcn::GcnWeights;
use crate::graphs::{GraphKind, MultiSourceGraphSet};
use crate::linalg::Matrix;
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::rng::{glorot, normal_matrix, KefsRng};

pub use attention::{attention_weights, AttentionLayer, AttentionProjections, AttentionStack};
pub use decoder::{adain, adain_on, ContentEncoder, FusionDecoder, ADAIN_EPS};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MsgfConfig {
    /// Hidden width `d'` of the graph convolutions.
    pub gcn_latent: usize,
    /// Common embedding width `z` of the attention stacks and of `S`.
    pub model_dim: usize,
    /// Content width `e`.
    pub content_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Noise width for the content encoder; defaults to the word dimension.
    pub noise_dim: Option<usize>,
    pub word_graphs: Vec<GraphKind>,
    pub attr_graphs: Vec<GraphKind>,
    /// Graph whose word embedding feeds the value branch.
    pub value_graph: GraphKind,
}

impl Default for MsgfConfig {
    fn default() -> Self {
        Self {
            gcn_latent: 32,
            model_dim: 64,
            content_dim: 64,
            heads: 4,
            layers: 6,
            noise_dim: None,
            word_graphs: alloc::vec![GraphKind::Hyperclass, GraphKind::Probability],
            attr_graphs: alloc::vec![GraphKind::Knowledge, GraphKind::Hyperclass],
            value_graph: GraphKind::Probability,
        }
    }
}

impl MsgfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(config_err!("attention layer count must be at least 1"));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(config_err!(
                "model dim {} must be divisible by head count {}",
                self.model_dim,
                self.heads
            ));
        }
        if self.gcn_latent == 0 || self.content_dim == 0 || self.noise_dim == Some(0) {
            return Err(config_err!("MSGF dimensions must be positive"));
        }
        if !self.word_graphs.contains(&self.value_graph) {
            return Err(config_err!(
                "value graph {:?} must be one of the word graphs",
                self.value_graph
            ));
        }
        Ok(())
    }
}

/// Learnable queries refined by cross-attention layers, then read out by a
/// final bias-free attention block.
#[derive(Clone, Debug)]
pub struct KnowledgeEncoder {
    pub queries: ParamId,
    pub refine: Vec<AttentionLayer>,
    pub readout: AttentionProjections,
    pub heads: usize,
}

impl KnowledgeEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        classes: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        rng: &mut KefsRng,
    ) -> Self {
        let queries = store.insert(format!("{name}.queries"), normal_matrix(rng, classes, dim));
        let refine = (0..layers.saturating_sub(1))
            .map(|l| AttentionLayer::new(store, &format!("{name}.layer{l}"), dim, rng))
            .collect();
        let readout = AttentionProjections::new(store, &format!("{name}.readout"), dim, rng);
        Self {
            queries,
            refine,
            readout,
            heads,
        }
    }

    /// `S = MHA(Q W_Q, E_f W_K, E_v W_V) W_O` after the refinement layers.
    pub fn forward(&self, tape: &mut Tape, fused: Var, values: Var) -> Var {
        let mut x = tape.param(self.queries);
        for layer in &self.refine {
            x = layer.forward(tape, x, fused, values, self.heads);
        }
        self.readout.forward(tape, x, fused, values, self.heads)
    }
}

/// All MSGF parameters.
#[derive(Clone, Debug)]
pub struct Msgf {
    pub config: MsgfConfig,
    pub classes: usize,
    pub word_gcns: Vec<(GraphKind, GcnWeights)>,
    pub attr_gcns: Vec<(GraphKind, GcnWeights)>,
    pub word_proj: Linear,
    pub attr_proj: Option<Linear>,
    pub value_proj: Linear,
    pub fusion: AttentionStack,
    pub value_encoder: AttentionStack,
    pub knowledge: KnowledgeEncoder,
    pub content: ContentEncoder,
    pub decoder: FusionDecoder,
    pub graph_head: ParamId,
}

/// Shapes an MSGF instance is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsgfShape {
    pub classes: usize,
    pub word_dim: usize,
    pub attr_dim: usize,
    pub feature_dim: usize,
}

impl Msgf {
    /// Registers every MSGF parameter under `name`. Graph pairings are
    /// restricted to the graphs in `available`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &MsgfConfig,
        shape: MsgfShape,
        available: &[GraphKind],
        rng: &mut KefsRng,
    ) -> Result<Self> {
        config.validate()?;
        if !available.contains(&config.value_graph) {
            return Err(config_err!("value graph {:?} is not available", config.value_graph));
        }
        let MsgfShape {
            classes,
            word_dim,
            attr_dim,
            feature_dim,
        } = shape;
        let z = config.model_dim;
        let e = config.content_dim;
        let mut gcns = |source: &str, kinds: &[GraphKind], dim: usize, store: &mut ParamStore| {
            kinds
                .iter()
                .filter(|k| available.contains(k))
                .map(|&k| {
                    let w = GcnWeights::new(store, &format!("{name}.gcn.{source}.{}", k.tag()), dim, config.gcn_latent, rng);
                    (k, w)
                })
                .collect::<Vec<_>>()
        };
        let word_gcns = gcns("word", &config.word_graphs, word_dim, store);
        let attr_gcns = if attr_dim > 0 {
            gcns("attr", &config.attr_graphs, attr_dim, store)
        } else {
            Vec::new()
        };
        let word_proj = Linear::new(store, &format!("{name}.proj.word"), word_dim * word_gcns.len(), z, false, rng);
        let attr_proj = (!attr_gcns.is_empty())
            .then(|| Linear::new(store, &format!("{name}.proj.attr"), attr_dim * attr_gcns.len(), z, false, rng));
        let value_proj = Linear::new(store, &format!("{name}.proj.value"), word_dim, z, false, rng);
        let fusion = AttentionStack::new(store, &format!("{name}.fusion"), z, config.layers, config.heads, rng);
        let value_encoder = AttentionStack::new(store, &format!("{name}.value"), z, config.layers, config.heads, rng);
        let knowledge = KnowledgeEncoder::new(store, &format!("{name}.knowledge"), classes, z, config.layers, config.heads, rng);
        let noise_dim = config.noise_dim.unwrap_or(word_dim);
        let content = ContentEncoder::new(store, &format!("{name}.content"), word_dim + noise_dim, e, rng);
        let decoder = FusionDecoder::new(store, &format!("{name}.decoder"), z, e, feature_dim, rng);
        let graph_head = store.insert(format!("{name}.graph_head"), glorot(rng, z, classes));
        Ok(Self {
            config: config.clone(),
            classes,
            word_gcns,
            attr_gcns,
            word_proj,
            attr_proj,
            value_proj,
            fusion,
            value_encoder,
            knowledge,
            content,
            decoder,
            graph_head,
        })
    }

    pub fn noise_dim(&self, store: &ParamStore) -> usize {
        let fc1_in = store.get(self.content.fc1.weight).rows();
        let word_dim = store.get(self.value_proj.weight).rows();
        fc1_in - word_dim
    }

    pub fn content_dim(&self) -> usize {
        self.config.content_dim
    }

    /// Whether any graph convolution runs on `kind`.
    pub fn uses(&self, kind: GraphKind) -> bool {
        self.word_gcns.iter().chain(&self.attr_gcns).any(|(k, _)| *k == kind)
    }

    /// Knowledge representations `S` (classes x z).
    pub fn knowledge(&self, tape: &mut Tape, graphs: &MultiSourceGraphSet, semantics: &SemanticTable) -> Result<Var> {
        if semantics.len() != self.classes || graphs.class_count() != self.classes {
            return Err(input_err!(
                "model is built for {} classes, got {} semantic rows and {}-class graphs",
                self.classes,
                semantics.len(),
                graphs.class_count()
            ));
        }
        let word = tape.constant(semantics.word_matrix().clone());
        let embed = |tape: &mut Tape, gcns: &[(GraphKind, GcnWeights)], input: Var| -> Result<Vec<(GraphKind, Var)>> {
            gcns.iter()
                .map(|(k, w)| {
                    let a = graphs
                        .normalized(*k)
                        .ok_or_else(|| input_err!("graph {} is required by the model but missing", k.tag()))?;
                    let a = tape.constant(a.clone());
                    Ok((*k, w.forward(tape, input, a)))
                })
                .collect()
        };
        let word_emb = embed(tape, &self.word_gcns, word)?;
        let cat = concat(tape, &word_emb);
        let e_word = self.word_proj.forward(tape, cat);
        let e_attr = match &self.attr_proj {
            Some(proj) => {
                let attr = tape.constant(semantics.attr_matrix().clone());
                let attr_emb = embed(tape, &self.attr_gcns, attr)?;
                let cat = concat(tape, &attr_emb);
                proj.forward(tape, cat)
            }
            None => e_word,
        };
        let fused = self.fusion.forward(tape, e_word, Some(e_attr));
        let value_src = word_emb
            .iter()
            .find(|(k, _)| *k == self.config.value_graph)
            .map(|(_, v)| *v)
            .expect("value graph is validated at construction");
        let value_src = self.value_proj.forward(tape, value_src);
        let values = self.value_encoder.forward(tape, value_src, None);
        Ok(self.knowledge.forward(tape, fused, values))
    }

    /// Content vectors for a batch: class word rows concatenated with noise.
    pub fn content_for(&self, tape: &mut Tape, semantics: &SemanticTable, labels: &[usize], noise: Var) -> Var {
        let word = tape.constant(semantics.word_matrix().select_rows(labels));
        self.content.forward(tape, &[word, noise])
    }

    /// Conditioning rows and decoded features for a batch of class indices.
    pub fn generate(
        &self,
        tape: &mut Tape,
        knowledge: Var,
        semantics: &SemanticTable,
        labels: &[usize],
        noise: Var,
    ) -> (Var, Var) {
        let style_src = tape.gather_rows(knowledge, labels);
        let content = self.content_for(tape, semantics, labels, noise);
        let condition = self.decoder.first_block(tape, content, style_src);
        let features = self.decoder.finish(tape, condition, style_src);
        (condition, features)
    }
}

fn concat(tape: &mut Tape, parts: &[(GraphKind, Var)]) -> Var {
    let vars: Vec<Var> = parts.iter().map(|(_, v)| *v).collect();
    if vars.len() == 1 {
        vars[0]
    } else {
        tape.concat_cols(&vars)
    }
}

/// Graph denoising loss recorded on a tape.
///
/// With logits `L = S · head` (one row per class, label `labels[i]`):
/// `mean_k mean_i [BCE(onehot_i, sigmoid(L_i)) − α · sigmoid(L_i) · ln sigmoid((A^k L)_i)]`
/// where BCE is summed over the class dimension and `A^k` is the logical
/// adjacency of graph `k`.
pub fn graph_denoising_loss_on(
    tape: &mut Tape,
    knowledge: Var,
    labels: &[usize],
    graphs: &[&Matrix],
    head: Var,
    alpha: f64,
) -> Var {
    let logits = tape.matmul(knowledge, head);
    let (n, c) = tape.shape(logits);
    let onehot = Matrix::from_fn(n, c, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
    let not_onehot = onehot.map(|y| 1.0 - y);
    let y = tape.constant(onehot);
    let y_neg = tape.constant(not_onehot);

    let log_p = tape.log_sigmoid(logits);
    let neg_logits = tape.neg(logits);
    let log_q = tape.log_sigmoid(neg_logits);
    let pos = tape.mul(y, log_p);
    let neg = tape.mul(y_neg, log_q);
    let ll = tape.add(pos, neg);
    let ll = tape.sum(ll);
    let mut loss = tape.scale(ll, -1.0 / n as f64);

    let probs = tape.sigmoid(logits);
    let k = graphs.len() as f64;
    for a in graphs {
        let a = tape.constant((*a).clone());
        let b = tape.matmul(a, logits);
        let log_b = tape.log_sigmoid(b);
        let agreement = tape.mul(probs, log_b);
        let agreement = tape.sum(agreement);
        let term = tape.scale(agreement, -alpha / (k * n as f64));
        loss = tape.add(loss, term);
    }
    loss
}

/// Scalar graph denoising loss on plain matrices.
pub fn graph_denoising_loss(
    knowledge: &Matrix,
    labels: &[usize],
    graphs: &MultiSourceGraphSet,
    head: &Matrix,
    alpha: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err!("alpha must lie in [0, 1], got {alpha}"));
    }
    let (n, d) = knowledge.shape();
    if head.rows() != d {
        return Err(input_err!("graph head has {} rows, expected {d}", head.rows()));
    }
    let c = head.cols();
    if labels.len() != n || labels.iter().any(|&l| l >= c) {
        return Err(input_err!("need one label in 0..{c} per knowledge row"));
    }
    let mats: Vec<&Matrix> = graphs.available().into_iter().filter_map(|k| graphs.logical(k)).collect();
    if mats.iter().any(|m| m.shape() != (n, n)) {
        return Err(input_err!("graphs must be {n}x{n}"));
    }
    let logits = knowledge.matmul(head);
    if !logits.is_finite() {
        return Err(Error::Training {
            term: "L_G".into(),
            detail: format!("non-finite logits (max |S| = {})", knowledge.data().iter().fold(0.0f64, |m, x| m.max(libm::fabs(*x)))),
        });
    }
    let mut tape = Tape::new();
    let s = tape.constant(knowledge.clone());
    let h = tape.constant(head.clone());
    let loss = graph_denoising_loss_on(&mut tape, s, labels, &mats, h, alpha);
    Ok(tape.value(loss).item())
}

/// Cross-attention fusion of word and attribute embeddings on plain matrices.
pub fn fuse_graph_embeddings(
    store: &ParamStore,
    stack: &AttentionStack,
    word: &Matrix,
    attr: &Matrix,
) -> Result<Matrix> {
    if word.cols() != attr.cols() || word.rows() != attr.rows() {
        return Err(input_err!(
            "word embeddings are {}x{} but attribute embeddings are {}x{}",
            word.rows(),
            word.cols(),
            attr.rows(),
            attr.cols()
        ));
    }
    check_width(store, stack, word.cols())?;
    let mut tape = Tape::with_params(store);
    let (w, a) = (tape.constant(word.clone()), tape.constant(attr.clone()));
    let out = stack.forward(&mut tape, w, Some(a));
    Ok(tape.value(out).clone())
}

fn check_width(store: &ParamStore, stack: &AttentionStack, width: usize) -> Result<()> {
    let expected = store.get(stack.layers[0].attn.wq).rows();
    if expected != width {
        return Err(input_err!("embedding width {width} does not match attention width {expected}"));
    }
    Ok(())
}

/// Knowledge encoding on plain matrices.
pub fn knowledge_encode(
    store: &ParamStore,
    encoder: &KnowledgeEncoder,
    fused: &Matrix,
    values: &Matrix,
) -> Result<Matrix> {
    let q = store.get(encoder.queries);
    if q.is_empty() || q.rows() != fused.rows() {
        return Err(Error::State(format!(
            "learnable queries are {}x{}, not initialized for {} classes",
            q.rows(),
            q.cols(),
            fused.rows()
        )));
    }
    if fused.shape() != values.shape() || fused.cols() != q.cols() {
        return Err(input_err!(
            "keys {:?} and values {:?} must both be {}x{}",
            fused.shape(),
            values.shape(),
            q.rows(),
            q.cols()
        ));
    }
    let mut tape = Tape::with_params(store);
    let (f, v) = (tape.constant(fused.clone()), tape.constant(values.clone()));
    let out = encoder.forward(&mut tape, f, v);
    Ok(tape.value(out).clone())
}

/// Content encoding of `[V_w2v, Z]` on plain matrices.
pub fn content_encode(store: &ParamStore, encoder: &ContentEncoder, word: &Matrix, noise: &Matrix) -> Result<Matrix> {
    let expected = store.get(encoder.fc1.weight).rows();
    if word.rows() != noise.rows() || word.cols() + noise.cols() != expected {
        return Err(input_err!(
            "content input {}x({}+{}) does not match encoder input width {expected}",
            word.rows(),
            word.cols(),
            noise.cols()
        ));
    }
    let mut tape = Tape::with_params(store);
    let (w, z) = (tape.constant(word.clone()), tape.constant(noise.clone()));
    let out = encoder.forward(&mut tape, &[w, z]);
    Ok(tape.value(out).clone())
}

/// Fusion decoding of content `N` styled by knowledge `S` on plain matrices.
pub fn fusion_decode(store: &ParamStore, decoder: &FusionDecoder, content: &Matrix, knowledge: &Matrix) -> Result<Matrix> {
    let e = store.get(decoder.style1.weight).cols();
    let z = store.get(decoder.style1.weight).rows();
    if content.cols() != e || knowledge.cols() != z || content.rows() != knowledge.rows() {
        return Err(input_err!(
            "decoder expects content nx{e} and knowledge nx{z}, got {:?} and {:?}",
            content.shape(),
            knowledge.shape()
        ));
    }
    let mut tape = Tape::with_params(store);
    let (c, s) = (tape.constant(content.clone()), tape.constant(knowledge.clone()));
    let out = decoder.forward(&mut tape, c, s);
    Ok(tape.value(out).clone())
}
