//! Class semantics and region-feature records.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{input_err, Result};
use crate::linalg::Matrix;

pub type ClassId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassSemantics {
    pub id: ClassId,
    pub name: String,
    pub split: Split,
    pub word_vec: Vec<f64>,
    pub attr_vec: Vec<f64>,
}

/// Per-class word and attribute vectors with the seen/unseen split.
///
/// Row `i` of every matrix derived from the table belongs to `classes[i]`;
/// that order is the class index used by graphs and models.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTable {
    classes: Vec<ClassSemantics>,
    word: Matrix,
    attr: Matrix,
}

impl SemanticTable {
    pub fn new(classes: Vec<ClassSemantics>) -> Result<Self> {
        let first = classes
            .first()
            .ok_or_else(|| input_err!("semantic table has no classes"))?;
        let (dw, da) = (first.word_vec.len(), first.attr_vec.len());
        if dw == 0 {
            return Err(input_err!("class {} has an empty word vector", first.id));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.word_vec.len() != dw {
                return Err(input_err!(
                    "class {} word vector has length {}, expected {dw}",
                    c.id,
                    c.word_vec.len()
                ));
            }
            if c.attr_vec.len() != da {
                return Err(input_err!(
                    "class {} attribute vector has length {}, expected {da}",
                    c.id,
                    c.attr_vec.len()
                ));
            }
            if !c.word_vec.iter().chain(&c.attr_vec).all(|x| x.is_finite()) {
                return Err(input_err!("class {} has non-finite semantic values", c.id));
            }
            if classes[..i].iter().any(|o| o.id == c.id) {
                return Err(input_err!("class id {} appears twice", c.id));
            }
        }
        let word = Matrix::from_rows(&classes.iter().map(|c| c.word_vec.as_slice()).collect::<Vec<_>>())
            .expect("checked lengths");
        let attr = if da == 0 {
            Matrix::zeros(classes.len(), 0)
        } else {
            Matrix::from_rows(&classes.iter().map(|c| c.attr_vec.as_slice()).collect::<Vec<_>>())
                .expect("checked lengths")
        };
        Ok(Self { classes, word, attr })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassSemantics] {
        &self.classes
    }

    pub fn word_dim(&self) -> usize {
        self.word.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.attr.cols()
    }

    pub fn word_matrix(&self) -> &Matrix {
        &self.word
    }

    pub fn attr_matrix(&self) -> &Matrix {
        &self.attr
    }

    pub fn index_of(&self, id: ClassId) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    pub fn ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&i| self.classes[i].split == split)
            .collect()
    }

    pub fn ids_with(&self, split: Split) -> Vec<ClassId> {
        self.classes
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }

    pub fn split_of(&self, id: ClassId) -> Option<Split> {
        self.index_of(id).map(|i| self.classes[i].split)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum FeatureSource {
    Real,
    Synthesized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub class_id: ClassId,
    pub feature: Vec<f64>,
    pub source: FeatureSource,
}

/// Labeled 1-D instance features of one common dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureSet {
    dim: usize,
    records: Vec<FeatureRecord>,
}

impl RegionFeatureSet {
    pub fn new(dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.feature.len() != dim {
                return Err(input_err!(
                    "feature record {i} (class {}) has dimension {}, expected {dim}",
                    r.class_id,
                    r.feature.len()
                ));
            }
            if !r.feature.iter().all(|x| x.is_finite()) {
                return Err(input_err!("feature record {i} (class {}) is not finite", r.class_id));
            }
        }
        Ok(Self { dim, records })
    }

    /// Infers the dimension from the first record.
    pub fn from_records(records: Vec<FeatureRecord>) -> Result<Self> {
        let dim = records
            .first()
            .map(|r| r.feature.len())
            .ok_or_else(|| input_err!("feature set is empty"))?;
        Self::new(dim, records)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FeatureRecord> {
        self.records
    }

    /// Distinct class ids in first-appearance order.
    pub fn class_ids(&self) -> Vec<ClassId> {
        let mut ids = Vec::new();
        for r in &self.records {
            if !ids.contains(&r.class_id) {
                ids.push(r.class_id);
            }
        }
        ids
    }

    pub fn feature_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.records.len(),
            self.dim,
            self.records.iter().flat_map(|r| r.feature.iter().copied()).collect(),
        )
    }

    pub fn filter(&self, mut keep: impl FnMut(&FeatureRecord) -> bool) -> Self {
        Self {
            dim: self.dim,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}
