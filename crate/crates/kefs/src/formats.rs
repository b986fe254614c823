//! JSON documents and line-delimited records read and written by the CLI.
//!
//! Every writer goes through [`write_atomic`]: the bytes land in a temporary
//! file in the destination directory and are renamed into place, so a failed
//! run never leaves a half-written output behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use kefs_core::data::{ClassId, ClassSemantics, FeatureRecord, FeatureSource, RegionFeatureSet, SemanticTable};
use kefs_core::evaluation::{Detection, GroundTruth};
use kefs_core::graphs::{ClassTaxonomy, CooccurrenceCounts, GraphKind, Ingredient, IngredientTable, MultiSourceGraphSet, TaxonNode};
use kefs_core::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{KefsError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| KefsError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| KefsError::parse(path, e))
}

/// One JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| KefsError::parse(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| KefsError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| KefsError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| KefsError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| KefsError::io(path, e))?;
    tmp.persist(path).map_err(|e| KefsError::io(path, e.error))?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory documents always serialize");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("in-memory records always serialize");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SemanticsDoc {
    pub classes: Vec<ClassSemantics>,
}

impl SemanticsDoc {
    pub fn from_table(table: &SemanticTable) -> Self {
        Self { classes: table.classes().to_vec() }
    }

    pub fn into_table(self) -> kefs_core::Result<SemanticTable> {
        SemanticTable::new(self.classes)
    }
}

pub fn load_semantics(path: &Path) -> Result<SemanticTable> {
    read_json::<SemanticsDoc>(path)?
        .into_table()
        .map_err(|e| KefsError::parse(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureRow {
    pub class_id: ClassId,
    pub source: FeatureSource,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeaturesDoc {
    pub dim: usize,
    pub records: Vec<FeatureRow>,
}

impl FeaturesDoc {
    pub fn from_set(set: &RegionFeatureSet) -> Self {
        Self {
            dim: set.dim(),
            records: set
                .records()
                .iter()
                .map(|r| FeatureRow { class_id: r.class_id, source: r.source, feature: r.feature.clone() })
                .collect(),
        }
    }

    pub fn into_set(self) -> kefs_core::Result<RegionFeatureSet> {
        let records = self
            .records
            .into_iter()
            .map(|r| FeatureRecord { class_id: r.class_id, feature: r.feature, source: r.source })
            .collect();
        RegionFeatureSet::new(self.dim, records)
    }
}

pub fn load_features(path: &Path) -> Result<RegionFeatureSet> {
    read_json::<FeaturesDoc>(path)?
        .into_set()
        .map_err(|e| KefsError::parse(path, e))
}

pub fn save_features(path: &Path, set: &RegionFeatureSet) -> Result<()> {
    write_json(path, &FeaturesDoc::from_set(set))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaxonomyDoc {
    pub levels: usize,
    pub nodes: Vec<TaxonNode>,
}

/// Ingredient lists keyed by class id over a declared group vocabulary.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IngredientsDoc {
    pub groups: Vec<String>,
    pub classes: BTreeMap<ClassId, Vec<Ingredient>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountsDoc {
    #[serde(rename = "O")]
    pub pairs: Vec<Vec<i64>>,
    #[serde(rename = "T")]
    pub totals: Vec<i64>,
}

/// Raw side information from which the prior graphs are built.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub taxonomy: TaxonomyDoc,
    pub ingredients: Option<IngredientsDoc>,
    pub counts: CountsDoc,
}

impl GraphInputs {
    pub fn build(&self, classes: &[ClassId], tau: f64) -> kefs_core::Result<MultiSourceGraphSet> {
        let taxonomy = ClassTaxonomy::new(self.taxonomy.levels, self.taxonomy.nodes.clone())?;
        let counts = CooccurrenceCounts::new(self.counts.pairs.clone(), self.counts.totals.clone())?;
        let ingredients = self
            .ingredients
            .as_ref()
            .map(|d| IngredientTable::new(d.groups.clone(), d.classes.clone()));
        MultiSourceGraphSet::build(classes, ingredients.as_ref(), &taxonomy, &counts, tau)
    }
}

pub fn load_graph_inputs(taxonomy: &Path, ingredients: Option<&Path>, counts: &Path) -> Result<GraphInputs> {
    Ok(GraphInputs {
        taxonomy: read_json(taxonomy)?,
        ingredients: ingredients.map(read_json).transpose()?,
        counts: read_json(counts)?,
    })
}

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn from_rows(rows: &Rows, n: usize, key: &str) -> kefs_core::Result<Matrix> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(kefs_core::Error::Input(format!("graph {key} must be {n}x{n}")));
    }
    Ok(Matrix::from_vec(n, n, rows.concat()))
}

/// Quantized and normalized graphs as row-major nested arrays. Absent graphs
/// are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct GraphsDoc {
    #[serde(rename = "n")]
    pub n: usize,
    #[serde(rename = "tau")]
    pub tau: f64,
    pub a1: Option<Rows>,
    pub a2: Option<Rows>,
    pub a3: Option<Rows>,
    #[serde(rename = "A1_hat")]
    pub a1_hat: Option<Rows>,
    #[serde(rename = "A2_hat")]
    pub a2_hat: Option<Rows>,
    #[serde(rename = "A3_hat")]
    pub a3_hat: Option<Rows>,
}

impl GraphsDoc {
    pub fn from_set(set: &MultiSourceGraphSet) -> Self {
        let logical = |k| set.logical(k).map(to_rows);
        let hat = |k| set.normalized(k).map(to_rows);
        Self {
            n: set.class_count(),
            tau: set.tau(),
            a1: logical(GraphKind::Knowledge),
            a2: logical(GraphKind::Hyperclass),
            a3: logical(GraphKind::Probability),
            a1_hat: hat(GraphKind::Knowledge),
            a2_hat: hat(GraphKind::Hyperclass),
            a3_hat: hat(GraphKind::Probability),
        }
    }

    /// Normalized matrices are recomputed from the logical ones.
    pub fn into_set(self) -> kefs_core::Result<MultiSourceGraphSet> {
        let n = self.n;
        let m = |rows: &Option<Rows>, key| rows.as_ref().map(|r| from_rows(r, n, key)).transpose();
        MultiSourceGraphSet::from_logical([m(&self.a1, "A1")?, m(&self.a2, "A2")?, m(&self.a3, "A3")?], self.tau)
    }
}

pub fn load_graphs(path: &Path) -> Result<MultiSourceGraphSet> {
    read_json::<GraphsDoc>(path)?
        .into_set()
        .map_err(|e| KefsError::parse(path, e))
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    read_jsonl(path)
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    read_jsonl(path)
}
