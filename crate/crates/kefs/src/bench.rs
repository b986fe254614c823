//! Synthetic GZSL benchmark: Gaussian clusters whose means and semantic
//! vectors share a low-rank latent code, with prior-graph inputs derived from
//! the distances between cluster means.

use std::collections::BTreeMap;

use kefs_core::data::{ClassSemantics, FeatureRecord, FeatureSource, RegionFeatureSet, SemanticTable, Split};
use kefs_core::graphs::{Ingredient, TaxonNode};
use kefs_core::rng::{normal_matrix, standard_normal, substream, KefsRng};
use kefs_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::formats::{CountsDoc, GraphInputs, IngredientsDoc, TaxonomyDoc};

/// Random stream reserved for benchmark generation.
pub const BENCH_STREAM: u64 = 5;

/// Images per class in the simulated co-occurrence statistics.
const COUNT_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub seen: usize,
    pub unseen: usize,
    pub feature_dim: usize,
    pub word_dim: usize,
    pub attr_dim: usize,
    /// Width of the latent code shared by cluster means and semantics.
    pub rank: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-coordinate standard deviation of the cluster means.
    pub separation: f64,
    /// Isotropic within-class standard deviation.
    pub spread: f64,
    /// Minimum distance between any two cluster means.
    pub min_gap: f64,
    /// Standard deviation of the noise on semantic vectors.
    pub semantic_noise: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            seen: 6,
            unseen: 2,
            feature_dim: 16,
            word_dim: 16,
            attr_dim: 8,
            rank: 4,
            train_per_class: 40,
            test_per_class: 50,
            separation: 1.0,
            spread: 0.5,
            min_gap: 4.0,
            semantic_noise: 0.05,
        }
    }
}

impl BenchSpec {
    pub fn classes(&self) -> usize {
        self.seen + self.unseen
    }

    pub fn validate(&self) -> kefs_core::Result<()> {
        let bad = |m: &str| Err(kefs_core::Error::Config(format!("benchmark: {m}")));
        if self.unseen < 2 {
            return bad("at least two unseen classes are required");
        }
        if self.seen < 2 {
            return bad("at least two seen classes are required");
        }
        if self.feature_dim == 0 || self.word_dim == 0 || self.rank == 0 {
            return bad("feature, word and latent dimensions must be positive");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("every class needs training and test samples");
        }
        let nonneg = [self.separation, self.spread, self.min_gap, self.semantic_noise];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("scales must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub semantics: SemanticTable,
    /// Seen classes only.
    pub train: RegionFeatureSet,
    /// Every class.
    pub test: RegionFeatureSet,
    pub graph_inputs: GraphInputs,
    pub means: Matrix,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn linear(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Latent codes and means, redrawing a class whose mean lands closer than
/// `min_gap` to an earlier one. Gives up after a fixed number of attempts and
/// keeps the last draw.
fn draw_clusters(spec: &BenchSpec, basis: &Matrix, rng: &mut KefsRng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let scale = spec.separation / (spec.rank as f64).sqrt();
    let mut latents: Vec<Vec<f64>> = Vec::new();
    let mut means: Vec<Vec<f64>> = Vec::new();
    for _ in 0..spec.classes() {
        let mut attempt = 0;
        loop {
            let u: Vec<f64> = (0..spec.rank).map(|_| standard_normal(rng)).collect();
            let mean: Vec<f64> = linear(basis, &u).into_iter().map(|x| x * scale).collect();
            attempt += 1;
            if attempt >= 1000 || means.iter().all(|m| distance(m, &mean) >= spec.min_gap) {
                latents.push(u);
                means.push(mean);
                break;
            }
        }
    }
    (latents, means)
}

fn samples(means: &[Vec<f64>], ids: &[u64], per_class: usize, spread: f64, rng: &mut KefsRng) -> RegionFeatureSet {
    let mut records = Vec::new();
    for &c in ids {
        for _ in 0..per_class {
            let feature = means[c as usize].iter().map(|m| m + spread * standard_normal(rng)).collect();
            records.push(FeatureRecord { class_id: c, feature, source: FeatureSource::Real });
        }
    }
    RegionFeatureSet::from_records(records).expect("benchmark features share one dimension")
}

/// Two-level taxonomy: the hyperclass of a class is the sign pattern of the
/// first two latent coordinates.
fn taxonomy(latents: &[Vec<f64>]) -> TaxonomyDoc {
    let n = latents.len() as u64;
    let mut nodes = vec![TaxonNode { id: n, parent: None, level: 0 }];
    let mut groups: BTreeMap<(bool, bool), u64> = BTreeMap::new();
    for (c, u) in latents.iter().enumerate() {
        let key = (u[0] >= 0.0, u.get(1).is_none_or(|x| *x >= 0.0));
        let next = n + 1 + groups.len() as u64;
        let parent = *groups.entry(key).or_insert_with(|| {
            nodes.push(TaxonNode { id: next, parent: Some(n), level: 1 });
            next
        });
        nodes.push(TaxonNode { id: c as u64, parent: Some(parent), level: 2 });
    }
    TaxonomyDoc { levels: 2, nodes }
}

/// Co-occurrence from a Gaussian kernel on mean distances, with the median
/// pairwise distance as bandwidth.
fn counts(means: &[Vec<f64>]) -> CountsDoc {
    let n = means.len();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            d.push(distance(&means[i], &means[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let bandwidth = d.get(d.len() / 2).copied().unwrap_or(1.0).max(1e-12);
    let pairs = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let r = distance(&means[i], &means[j]) / bandwidth;
                    (COUNT_SCALE * (-r * r).exp()).round() as i64
                })
                .collect()
        })
        .collect();
    CountsDoc { pairs, totals: vec![COUNT_SCALE as i64; n] }
}

/// One ingredient per latent coordinate with a clear sign, grouped by
/// coordinate.
fn ingredients(latents: &[Vec<f64>], rank: usize) -> IngredientsDoc {
    let groups: Vec<String> = (0..rank).map(|d| format!("axis{d}")).collect();
    let classes = latents
        .iter()
        .enumerate()
        .map(|(c, u)| {
            let list = u
                .iter()
                .enumerate()
                .filter(|(_, x)| x.abs() > 0.5)
                .map(|(d, x)| Ingredient {
                    ingredient: format!("axis{d}{}", if *x > 0.0 { "+" } else { "-" }),
                    group: groups[d].clone(),
                })
                .collect();
            (c as u64, list)
        })
        .collect();
    IngredientsDoc { groups, classes }
}

/// Classes `0..seen` are seen and the rest unseen.
pub fn generate_synthetic_benchmark(spec: &BenchSpec, seed: u64) -> kefs_core::Result<Benchmark> {
    spec.validate()?;
    let mut rng = substream(seed, BENCH_STREAM);
    let basis = normal_matrix(&mut rng, spec.feature_dim, spec.rank);
    let word_map = normal_matrix(&mut rng, spec.word_dim, spec.rank);
    let attr_map = normal_matrix(&mut rng, spec.attr_dim, spec.rank);
    let (latents, means) = draw_clusters(spec, &basis, &mut rng);
    let n = spec.classes();
    let noisy = |m: &Matrix, u: &[f64], rng: &mut KefsRng| -> Vec<f64> {
        linear(m, u)
            .into_iter()
            .map(|x| x / (spec.rank as f64).sqrt() + spec.semantic_noise * standard_normal(rng))
            .collect()
    };
    let mut classes = Vec::with_capacity(n);
    for (c, u) in latents.iter().enumerate() {
        classes.push(ClassSemantics {
            id: c as u64,
            name: format!("class{c}"),
            split: if c < spec.seen { Split::Seen } else { Split::Unseen },
            word_vec: noisy(&word_map, u, &mut rng),
            attr_vec: noisy(&attr_map, u, &mut rng),
        });
    }
    let semantics = SemanticTable::new(classes)?;
    let seen: Vec<u64> = (0..spec.seen as u64).collect();
    let all: Vec<u64> = (0..n as u64).collect();
    let train = samples(&means, &seen, spec.train_per_class, spec.spread, &mut rng);
    let test = samples(&means, &all, spec.test_per_class, spec.spread, &mut rng);
    let graph_inputs = GraphInputs {
        taxonomy: taxonomy(&latents),
        ingredients: (spec.attr_dim > 0).then(|| ingredients(&latents, spec.rank)),
        counts: counts(&means),
    };
    let means = Matrix::from_vec(n, spec.feature_dim, means.concat());
    Ok(Benchmark { semantics, train, test, graph_inputs, means })
}
