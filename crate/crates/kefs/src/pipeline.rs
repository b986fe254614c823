//! Stage drivers behind the CLI subcommands and the end-to-end run.
//!
//! Each driver loads and validates all of its inputs first, computes, and
//! only then writes outputs, so a rejected input never leaves files behind.

use std::path::{Path, PathBuf};

use kefs_core::data::{RegionFeatureSet, SemanticTable, Split};
use kefs_core::evaluation::{classification_accuracy, detection_report, harmonic_mean, silhouette, EvalReport};
use kefs_core::graphs::MultiSourceGraphSet;
use kefs_core::rng::substream;
use kefs_core::training::{fit_unseen_classifier, streams, synthesize_unseen, train_kefs, EpochLoss, KefsModel, UnseenClassifier};
use log::info;

use crate::bench::{generate_synthetic_benchmark, Benchmark};
use crate::checkpoint::{Checkpoint, CheckpointFormat};
use crate::config::PipelineConfig;
use crate::error::{KefsError, Result};
use crate::formats::{
    load_detections, load_features, load_graph_inputs, load_graphs, load_ground_truth, load_semantics, read_json,
    save_features, write_json, FeaturesDoc, GraphsDoc, SemanticsDoc,
};

pub mod files {
    pub const SEMANTICS: &str = "semantics.json";
    pub const TRAIN_FEATURES: &str = "train_features.json";
    pub const TEST_FEATURES: &str = "test_features.json";
    pub const TAXONOMY: &str = "taxonomy.json";
    pub const INGREDIENTS: &str = "ingredients.json";
    pub const COUNTS: &str = "counts.json";
    pub const GRAPHS: &str = "graphs.json";
    pub const TRACE: &str = "trace.json";
    pub const SYNTHESIZED: &str = "synthesized.json";
    pub const CLASSIFIER: &str = "classifier.json";
    pub const REPORT: &str = "report.json";
    pub const CLS_REPORT: &str = "eval_cls.json";
    pub const DET_REPORT: &str = "eval_det.json";
    pub const BENCH_DIR: &str = "bench";

    pub fn checkpoint(format: super::CheckpointFormat) -> &'static str {
        match format {
            super::CheckpointFormat::Json => "checkpoint.json",
            super::CheckpointFormat::Binary => "checkpoint.bin",
        }
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| KefsError::Config(format!("no {what} file given (set paths.{what} or pass the flag)")))
}

fn core<T>(r: kefs_core::Result<T>) -> Result<T> {
    r.map_err(KefsError::from)
}

/// Everything the training and evaluation stages consume.
#[derive(Clone, Debug)]
pub struct PipelineInputs {
    pub semantics: SemanticTable,
    pub train: RegionFeatureSet,
    pub test: Option<RegionFeatureSet>,
    pub graphs: MultiSourceGraphSet,
}

impl PipelineInputs {
    pub fn from_benchmark(bench: &Benchmark, tau: f64) -> Result<Self> {
        Ok(Self {
            semantics: bench.semantics.clone(),
            train: bench.train.clone(),
            test: Some(bench.test.clone()),
            graphs: core(bench.graph_inputs.build(&bench.semantics.ids(), tau))?,
        })
    }
}

/// Graphs from a graph file or from raw side information.
pub fn resolve_graphs(config: &PipelineConfig, semantics: &SemanticTable) -> Result<MultiSourceGraphSet> {
    let p = &config.paths;
    let graphs = match &p.graphs {
        Some(path) => load_graphs(path)?,
        None => {
            let taxonomy = required(&p.taxonomy, "taxonomy")?;
            let counts = required(&p.counts, "counts")?;
            let inputs = load_graph_inputs(taxonomy, p.ingredients.as_deref(), counts)?;
            core(inputs.build(&semantics.ids(), config.tau))?
        }
    };
    if graphs.class_count() != semantics.len() {
        return Err(KefsError::Core(kefs_core::Error::Input(format!(
            "graphs cover {} classes, semantic table has {}",
            graphs.class_count(),
            semantics.len()
        ))));
    }
    Ok(graphs)
}

/// Reads the configured inputs, or generates the synthetic benchmark when no
/// semantic table is configured.
pub fn load_inputs(config: &PipelineConfig) -> Result<(PipelineInputs, Option<Benchmark>)> {
    let p = &config.paths;
    if p.semantics.is_none() {
        let bench = core(generate_synthetic_benchmark(&config.bench, config.seed()))?;
        info!("stage=inputs source=benchmark classes={} train={}", bench.semantics.len(), bench.train.len());
        return Ok((PipelineInputs::from_benchmark(&bench, config.tau)?, Some(bench)));
    }
    let semantics = load_semantics(required(&p.semantics, "semantics")?)?;
    let train = load_features(required(&p.train_features, "train_features")?)?;
    let test = p.test_features.as_deref().map(load_features).transpose()?;
    let graphs = resolve_graphs(config, &semantics)?;
    info!("stage=inputs source=files classes={} train={}", semantics.len(), train.len());
    Ok((PipelineInputs { semantics, train, test, graphs }, None))
}

/// In-memory results of a full run.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub report: EvalReport,
    pub model: KefsModel,
    pub trace: Vec<EpochLoss>,
    pub synthesized: RegionFeatureSet,
    pub classifier: UnseenClassifier,
}

fn split_ids(semantics: &SemanticTable, split: Split) -> Vec<u64> {
    semantics.ids_with(split)
}

/// Unseen-only and generalized classification scores plus the silhouette of
/// the synthesized features.
pub fn evaluate(
    semantics: &SemanticTable,
    train: &RegionFeatureSet,
    test: &RegionFeatureSet,
    synthesized: &RegionFeatureSet,
    classifier: &UnseenClassifier,
    config: &PipelineConfig,
) -> Result<EvalReport> {
    let unseen = split_ids(semantics, Split::Unseen);
    let seen = split_ids(semantics, Split::Seen);
    let unseen_test = test.filter(|r| unseen.contains(&r.class_id));
    let seen_test = test.filter(|r| seen.contains(&r.class_id));
    let mut report = EvalReport::new();
    report.silhouette = Some(core(silhouette(synthesized))?);
    if !unseen_test.is_empty() {
        report.unseen_accuracy = Some(core(classification_accuracy(classifier, &unseen_test))?);
    }
    if !unseen_test.is_empty() && !seen_test.is_empty() {
        let mut records = train.records().to_vec();
        records.extend_from_slice(synthesized.records());
        let pooled = core(RegionFeatureSet::new(train.dim(), records))?;
        let general = core(fit_unseen_classifier(&pooled, &config.train.classifier))?;
        let s = core(classification_accuracy(&general, &seen_test))?;
        let u = core(classification_accuracy(&general, &unseen_test))?;
        report.seen = Some(s);
        report.unseen = Some(u);
        report.hm = Some(core(harmonic_mean(s, u))?);
    }
    Ok(report)
}

/// Train, synthesize, fit and evaluate without touching the file system.
pub fn execute(config: &PipelineConfig, inputs: &PipelineInputs) -> Result<PipelineOutput> {
    config.validate()?;
    let train = core(train_kefs(&inputs.train, &inputs.semantics, &inputs.graphs, &config.train))
        .map_err(KefsError::in_stage("train"))?;
    for e in &train.trace {
        info!(
            "stage=train epoch={} total={:.6} l_w={:.6} l_r={:.6} l_g={:.6} critic={:.6}",
            e.epoch, e.total, e.l_w, e.l_r, e.l_g, e.critic
        );
    }
    let mut rng = substream(config.seed(), streams::SYNTHESIS);
    let synthesized = core(synthesize_unseen(
        &train.model,
        &inputs.semantics,
        &inputs.graphs,
        config.train.synth_per_class,
        &mut rng,
    ))
    .map_err(KefsError::in_stage("synthesize"))?;
    info!("stage=synthesize records={}", synthesized.len());
    let classifier =
        core(fit_unseen_classifier(&synthesized, &config.train.classifier)).map_err(KefsError::in_stage("fit-classifier"))?;
    let report = match &inputs.test {
        Some(test) => evaluate(&inputs.semantics, &inputs.train, test, &synthesized, &classifier, config)
            .map_err(KefsError::in_stage("evaluate"))?,
        None => {
            let mut r = EvalReport::new();
            r.silhouette = Some(core(silhouette(&synthesized))?);
            r
        }
    };
    info!(
        "stage=evaluate unseen_accuracy={:?} seen={:?} unseen={:?} hm={:?} silhouette={:?}",
        report.unseen_accuracy, report.seen, report.unseen, report.hm, report.silhouette
    );
    Ok(PipelineOutput { report, model: train.model, trace: train.trace, synthesized, classifier })
}

fn write_benchmark(dir: &Path, bench: &Benchmark) -> Result<()> {
    write_json(&dir.join(files::SEMANTICS), &SemanticsDoc::from_table(&bench.semantics))?;
    write_json(&dir.join(files::TRAIN_FEATURES), &FeaturesDoc::from_set(&bench.train))?;
    write_json(&dir.join(files::TEST_FEATURES), &FeaturesDoc::from_set(&bench.test))?;
    write_json(&dir.join(files::TAXONOMY), &bench.graph_inputs.taxonomy)?;
    if let Some(ing) = &bench.graph_inputs.ingredients {
        write_json(&dir.join(files::INGREDIENTS), ing)?;
    }
    write_json(&dir.join(files::COUNTS), &bench.graph_inputs.counts)
}

/// Full run: inputs, training, synthesis, classifier, report. Writes the
/// graphs, checkpoint, loss trace, synthesized features, classifier and
/// report into `out_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<EvalReport> {
    config.validate()?;
    let (inputs, bench) = load_inputs(config)?;
    let out = execute(config, &inputs)?;
    let dir = &config.out_dir;
    if let Some(bench) = &bench {
        write_benchmark(&dir.join(files::BENCH_DIR), bench)?;
    }
    write_json(&dir.join(files::GRAPHS), &GraphsDoc::from_set(&inputs.graphs))?;
    Checkpoint::from_model(&out.model).save(&dir.join(files::checkpoint(config.checkpoint_format)), config.checkpoint_format)?;
    write_json(&dir.join(files::TRACE), &out.trace)?;
    save_features(&dir.join(files::SYNTHESIZED), &out.synthesized)?;
    write_json(&dir.join(files::CLASSIFIER), &out.classifier)?;
    write_json(&dir.join(files::REPORT), &out.report)?;
    Ok(out.report)
}

pub fn gen_bench(config: &PipelineConfig) -> Result<()> {
    let bench = core(generate_synthetic_benchmark(&config.bench, config.seed()))?;
    write_benchmark(&config.out_dir, &bench)
}

pub fn build_graphs(config: &PipelineConfig) -> Result<()> {
    let semantics = load_semantics(required(&config.paths.semantics, "semantics")?)?;
    let mut raw = config.clone();
    raw.paths.graphs = None;
    let graphs = resolve_graphs(&raw, &semantics)?;
    write_json(&config.out_dir.join(files::GRAPHS), &GraphsDoc::from_set(&graphs))
}

fn semantics_and_graphs(config: &PipelineConfig) -> Result<(SemanticTable, MultiSourceGraphSet)> {
    let semantics = load_semantics(required(&config.paths.semantics, "semantics")?)?;
    let graphs = resolve_graphs(config, &semantics)?;
    Ok((semantics, graphs))
}

pub fn train(config: &PipelineConfig) -> Result<()> {
    let (semantics, graphs) = semantics_and_graphs(config)?;
    let features = load_features(required(&config.paths.train_features, "train_features")?)?;
    let out = core(train_kefs(&features, &semantics, &graphs, &config.train))?;
    let fmt = config.checkpoint_format;
    Checkpoint::from_model(&out.model).save(&config.out_dir.join(files::checkpoint(fmt)), fmt)?;
    write_json(&config.out_dir.join(files::TRACE), &out.trace)
}

pub fn synthesize(config: &PipelineConfig) -> Result<()> {
    let (semantics, graphs) = semantics_and_graphs(config)?;
    let path = required(&config.paths.checkpoint, "checkpoint")?;
    let model = Checkpoint::load(path)?
        .restore(&config.train)
        .map_err(|m| KefsError::checkpoint(path, m))?;
    let mut rng = substream(config.seed(), streams::SYNTHESIS);
    let synth = core(synthesize_unseen(&model, &semantics, &graphs, config.train.synth_per_class, &mut rng))?;
    save_features(&config.out_dir.join(files::SYNTHESIZED), &synth)
}

pub fn fit_classifier(config: &PipelineConfig) -> Result<()> {
    let synth = load_features(required(&config.paths.synthesized, "synthesized")?)?;
    let clf = core(fit_unseen_classifier(&synth, &config.train.classifier))?;
    write_json(&config.out_dir.join(files::CLASSIFIER), &clf)
}

/// Accuracy of a fitted classifier on the test records of its classes.
pub fn eval_cls(config: &PipelineConfig) -> Result<EvalReport> {
    let clf: UnseenClassifier = read_json(required(&config.paths.classifier, "classifier")?)?;
    let test = load_features(required(&config.paths.test_features, "test_features")?)?;
    let scored = test.filter(|r| clf.classes.contains(&r.class_id));
    let mut report = EvalReport::new();
    report.unseen_accuracy = Some(core(classification_accuracy(&clf, &scored))?);
    write_json(&config.out_dir.join(files::CLS_REPORT), &report)?;
    Ok(report)
}

pub fn eval_det(config: &PipelineConfig) -> Result<EvalReport> {
    let semantics = load_semantics(required(&config.paths.semantics, "semantics")?)?;
    let gts = load_ground_truth(required(&config.paths.ground_truth, "ground_truth")?)?;
    let dets = load_detections(required(&config.paths.detections, "detections")?)?;
    let e = &config.eval;
    let report = core(detection_report(
        &dets,
        &gts,
        &split_ids(&semantics, Split::Seen),
        &split_ids(&semantics, Split::Unseen),
        e.iou,
        &e.recall_ious,
        e.top_k,
    ))?;
    write_json(&config.out_dir.join(files::DET_REPORT), &report)?;
    Ok(report)
}
