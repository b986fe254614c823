//! Pipeline configuration, the `full` and `desk` profiles, and merging of
//! config files and command-line overrides.

use std::path::{Path, PathBuf};

use kefs_core::msgf::MsgfConfig;
use kefs_core::optim::AdamConfig;
use kefs_core::rfdm::{DenoiserConfig, ReverseVariance};
use kefs_core::training::{ScheduleConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bench::BenchSpec;
use crate::checkpoint::CheckpointFormat;
use crate::error::{KefsError, Result};
use crate::formats::read_text;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size hyperparameters.
    #[default]
    Full,
    /// Small dimensions and a short diffusion chain for CPU runs.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU threshold for AP and mAP.
    pub iou: f64,
    /// IoU thresholds at which recall is reported.
    pub recall_ious: Vec<f64>,
    /// Detections kept per image for recall.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou: 0.5, recall_ious: vec![0.4, 0.5, 0.6], top_k: 100 }
    }
}

/// Input and output files. Unset inputs are generated from the benchmark
/// spec when the pipeline runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub semantics: Option<PathBuf>,
    pub train_features: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub ingredients: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub graphs: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub synthesized: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub detections: Option<PathBuf>,
}

impl DataPaths {
    fn all_mut(&mut self) -> [&mut Option<PathBuf>; 12] {
        [
            &mut self.semantics,
            &mut self.train_features,
            &mut self.test_features,
            &mut self.taxonomy,
            &mut self.ingredients,
            &mut self.counts,
            &mut self.graphs,
            &mut self.checkpoint,
            &mut self.synthesized,
            &mut self.classifier,
            &mut self.ground_truth,
            &mut self.detections,
        ]
    }

    /// Fills every path set in `other`.
    pub fn overlay(&mut self, mut other: DataPaths) {
        for (mine, theirs) in self.all_mut().into_iter().zip(other.all_mut()) {
            if theirs.is_some() {
                *mine = theirs.take();
            }
        }
    }

    fn rebase(&mut self, dir: &Path) {
        for p in self.all_mut().into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    /// Quantization threshold for every prior graph.
    pub tau: f64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchSpec,
    pub paths: DataPaths,
    pub out_dir: PathBuf,
    pub checkpoint_format: CheckpointFormat,
}

impl PipelineConfig {
    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            tau: 0.4,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchSpec::default(),
            paths: DataPaths::default(),
            out_dir: PathBuf::from("out"),
            checkpoint_format: CheckpointFormat::Json,
        }
    }

    pub fn desk() -> Self {
        let train = TrainConfig {
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            epochs: 150,
            msgf: MsgfConfig {
                gcn_latent: 16,
                model_dim: 16,
                content_dim: 16,
                layers: 2,
                noise_dim: Some(4),
                ..MsgfConfig::default()
            },
            denoiser: DenoiserConfig {
                hidden: 64,
                time_dim: 8,
                variance: ReverseVariance::Posterior,
                ..DenoiserConfig::default()
            },
            schedule: ScheduleConfig { steps: 10, gamma_1: 0.05, gamma_t: 0.5 },
            ..TrainConfig::default()
        };
        Self { profile: Profile::Desk, train, ..Self::full() }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Full => Self::full(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Profile defaults, then the config file, then flags. A profile flag
    /// beats a `profile` key in the file.
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut user = match file {
            Some(path) => {
                let text = read_text(path)?;
                let value: Value = serde_json::from_str(&text).map_err(|e| KefsError::Config(format!("{}: {e}", path.display())))?;
                if !value.is_object() {
                    return Err(KefsError::Config(format!("{}: config must be a JSON object", path.display())));
                }
                value
            }
            None => Value::Object(Default::default()),
        };
        let from_file = match user.get("profile") {
            Some(p) => Some(
                serde_json::from_value::<Profile>(p.clone()).map_err(|e| KefsError::Config(format!("profile: {e}")))?,
            ),
            None => None,
        };
        let file_sets_out_dir = user.get("out_dir").is_some();
        let profile = overrides.profile.or(from_file).unwrap_or_default();
        user["profile"] = serde_json::to_value(profile).expect("enum serializes");
        let mut merged = serde_json::to_value(Self::for_profile(profile)).expect("config serializes");
        merge(&mut merged, user);
        let mut config: Self = serde_json::from_value(merged).map_err(|e| KefsError::Config(e.to_string()))?;
        if let Some(dir) = file.and_then(Path::parent) {
            config.paths.rebase(dir);
            if config.out_dir.is_relative() && file_sets_out_dir {
                config.out_dir = dir.join(&config.out_dir);
            }
        }
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(f) = o.checkpoint_format {
            self.checkpoint_format = f;
        }
        self.paths.overlay(o.paths.clone());
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KefsError::Config(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        self.train.validate()?;
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !unit(self.eval.iou) || !self.eval.recall_ious.iter().all(|&x| unit(x)) {
            return bad("IoU thresholds must lie in (0, 1]".into());
        }
        if self.eval.top_k == 0 {
            return bad("eval.top_k must be at least 1".into());
        }
        Ok(())
    }
}

/// Recursive object merge; non-object values in `over` replace `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Command-line values that win over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint_format: Option<CheckpointFormat>,
    pub paths: DataPaths,
}
