use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kefs::checkpoint::CheckpointFormat;
use kefs::config::{DataPaths, Overrides, PipelineConfig, Profile};
use kefs::{pipeline, KefsError};

#[derive(Parser)]
#[command(name = "kefs", version, about = "Knowledge-enhanced feature synthesis for zero-shot detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Build quantized and normalized prior graphs from side information.
    BuildGraphs,
    /// Write the synthetic benchmark (semantics, features, graph inputs).
    GenBench,
    /// Train on seen-class features and write a checkpoint and loss trace.
    Train,
    /// Sample unseen-class features from a checkpoint.
    Synthesize,
    /// Fit the unseen-class classifier on synthesized features.
    FitClassifier,
    /// Score a fitted classifier on test features.
    EvalCls,
    /// Score detections against ground truth (AP, mAP, recall, HM).
    EvalDet,
    /// Run every stage end to end.
    Pipeline,
}

#[derive(Args)]
struct Common {
    /// JSON config file; its values override the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    checkpoint_format: Option<CheckpointFormat>,
    #[arg(long, global = true)]
    semantics: Option<PathBuf>,
    #[arg(long, global = true)]
    train_features: Option<PathBuf>,
    #[arg(long, global = true)]
    test_features: Option<PathBuf>,
    #[arg(long, global = true)]
    taxonomy: Option<PathBuf>,
    #[arg(long, global = true)]
    ingredients: Option<PathBuf>,
    #[arg(long, global = true)]
    counts: Option<PathBuf>,
    #[arg(long, global = true)]
    graphs: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    synthesized: Option<PathBuf>,
    #[arg(long, global = true)]
    classifier: Option<PathBuf>,
    #[arg(long, global = true)]
    ground_truth: Option<PathBuf>,
    #[arg(long, global = true)]
    detections: Option<PathBuf>,
}

impl Common {
    fn overrides(self) -> (Option<PathBuf>, Overrides) {
        let paths = DataPaths {
            semantics: self.semantics,
            train_features: self.train_features,
            test_features: self.test_features,
            taxonomy: self.taxonomy,
            ingredients: self.ingredients,
            counts: self.counts,
            graphs: self.graphs,
            checkpoint: self.checkpoint,
            synthesized: self.synthesized,
            classifier: self.classifier,
            ground_truth: self.ground_truth,
            detections: self.detections,
        };
        let o = Overrides {
            profile: self.profile,
            seed: self.seed,
            out_dir: self.out_dir,
            checkpoint_format: self.checkpoint_format,
            paths,
        };
        (self.config, o)
    }
}

fn run(cli: Cli) -> Result<(), KefsError> {
    let (file, overrides) = cli.common.overrides();
    let config = PipelineConfig::load(file.as_deref(), &overrides)?;
    log::info!("stage=config profile={:?} seed={} out_dir={}", config.profile, config.seed(), config.out_dir.display());
    match cli.command {
        Command::BuildGraphs => pipeline::build_graphs(&config),
        Command::GenBench => pipeline::gen_bench(&config),
        Command::Train => pipeline::train(&config),
        Command::Synthesize => pipeline::synthesize(&config),
        Command::FitClassifier => pipeline::fit_classifier(&config),
        Command::EvalCls => pipeline::eval_cls(&config).map(drop),
        Command::EvalDet => pipeline::eval_det(&config).map(drop),
        Command::Pipeline => pipeline::run_pipeline(&config).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
