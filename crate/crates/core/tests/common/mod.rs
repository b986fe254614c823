#![allow(dead_code)]

use kefs_core::data::{ClassSemantics, FeatureRecord, FeatureSource, RegionFeatureSet, SemanticTable, Split};
use kefs_core::graphs::MultiSourceGraphSet;
use kefs_core::msgf::MsgfConfig;
use kefs_core::rfdm::DenoiserConfig;
use kefs_core::rng::{normal_matrix, uniform_matrix, KefsRng};
use kefs_core::training::{ScheduleConfig, TrainConfig};
use kefs_core::Matrix;

/// Classes `0..n`; those listed in `unseen` are unseen.
pub fn semantics(n: usize, word_dim: usize, attr_dim: usize, unseen: &[usize], rng: &mut KefsRng) -> SemanticTable {
    let w = normal_matrix(rng, n, word_dim);
    let a = normal_matrix(rng, n, attr_dim.max(1));
    SemanticTable::new(
        (0..n)
            .map(|i| ClassSemantics {
                id: i as u64,
                name: format!("class{i}"),
                split: if unseen.contains(&i) { Split::Unseen } else { Split::Seen },
                word_vec: w.row(i).to_vec(),
                attr_vec: if attr_dim == 0 { vec![] } else { a.row(i).to_vec() },
            })
            .collect(),
    )
    .unwrap()
}

/// Three random symmetric non-negative graphs.
pub fn graphs(n: usize, rng: &mut KefsRng) -> MultiSourceGraphSet {
    let mut sym = || {
        let m = uniform_matrix(rng, n, n, 0.0, 1.0);
        m.add(&m.transpose())
    };
    MultiSourceGraphSet::from_raw([Some(sym()), Some(sym()), Some(sym())], 0.4).unwrap()
}

/// Tiny dimensions for gradient checks.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2,
        n_critic: 2,
        critic_hidden: Some(6),
        synth_per_class: 3,
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
    }
}

/// Gaussian features around `means` rows, `per_class` each, class id = row.
pub fn clustered(means: &Matrix, per_class: usize, spread: f64, rng: &mut KefsRng) -> RegionFeatureSet {
    let mut records = Vec::new();
    for c in 0..means.rows() {
        let noise = normal_matrix(rng, per_class, means.cols());
        for r in 0..per_class {
            records.push(FeatureRecord {
                class_id: c as u64,
                feature: means.row(c).iter().zip(noise.row(r)).map(|(m, z)| m + spread * z).collect(),
                source: FeatureSource::Real,
            });
        }
    }
    RegionFeatureSet::new(means.cols(), records).unwrap()
}
