//! Prior class-correlation graphs.
//!
//! Three raw adjacency matrices are built from side information:
//!
//! * knowledge graph: shared ingredients within a shared ingredient group,
//! * hyperclass graph: level of the deepest common taxonomy ancestor,
//! * probability graph: label co-occurrence `O[i][j] / T[i]`.
//!
//! Each raw matrix is scaled by its global maximum, thresholded at `tau` into
//! a logical matrix with forced self-loops, and symmetrically normalized as
//! `D^{-1/2} A D^{-1/2}` for graph convolution.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::ClassId;
use crate::error::{config_err, input_err, Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum GraphKind {
    Knowledge,
    Hyperclass,
    Probability,
}

impl GraphKind {
    pub const ALL: [GraphKind; 3] = [GraphKind::Knowledge, GraphKind::Hyperclass, GraphKind::Probability];

    pub fn index(self) -> usize {
        match self {
            GraphKind::Knowledge => 0,
            GraphKind::Hyperclass => 1,
            GraphKind::Probability => 2,
        }
    }

    /// Short tag used in parameter names and file keys (`a1`, `a2`, `a3`).
    pub fn tag(self) -> &'static str {
        match self {
            GraphKind::Knowledge => "a1",
            GraphKind::Hyperclass => "a2",
            GraphKind::Probability => "a3",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaxonNode {
    pub id: u64,
    pub parent: Option<u64>,
    pub level: usize,
}

/// A rooted class tree. The root sits at level 0 and classes are leaves at
/// level `levels`.
#[derive(Clone, Debug)]
pub struct ClassTaxonomy {
    levels: usize,
    nodes: Vec<TaxonNode>,
    index: BTreeMap<u64, usize>,
}

impl ClassTaxonomy {
    pub fn new(levels: usize, nodes: Vec<TaxonNode>) -> Result<Self> {
        if levels == 0 {
            return Err(input_err!("taxonomy needs at least one level below the root"));
        }
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                return Err(input_err!("taxonomy node id {} appears twice", n.id));
            }
        }
        let mut roots = 0;
        for n in &nodes {
            if n.level > levels {
                return Err(input_err!("taxonomy node {} has level {} beyond {levels}", n.id, n.level));
            }
            match n.parent {
                None if n.level == 0 => roots += 1,
                None => return Err(input_err!("taxonomy node {} at level {} has no parent", n.id, n.level)),
                Some(_) if n.level == 0 => {
                    return Err(input_err!("taxonomy root {} must not have a parent", n.id))
                }
                Some(p) => {
                    let parent = index
                        .get(&p)
                        .map(|&k| &nodes[k])
                        .ok_or_else(|| input_err!("taxonomy node {} references missing parent {p}", n.id))?;
                    if parent.level + 1 != n.level {
                        return Err(input_err!(
                            "taxonomy node {} at level {} has parent {p} at level {}",
                            n.id,
                            n.level,
                            parent.level
                        ));
                    }
                }
            }
        }
        if roots != 1 {
            return Err(input_err!("taxonomy must have exactly one root, found {roots}"));
        }
        Ok(Self { levels, nodes, index })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn nodes(&self) -> &[TaxonNode] {
        &self.nodes
    }

    /// Ancestors of a leaf class indexed by level: `path[0]` is the root and
    /// `path[levels]` the class itself.
    pub fn path(&self, class: ClassId) -> Result<Vec<u64>> {
        let &start = self
            .index
            .get(&class)
            .ok_or_else(|| input_err!("class {class} is missing from the taxonomy"))?;
        if self.nodes[start].level != self.levels {
            return Err(input_err!(
                "class {class} sits at level {} but classes must be leaves at level {}",
                self.nodes[start].level,
                self.levels
            ));
        }
        let mut path = vec![0; self.levels + 1];
        let mut cur = &self.nodes[start];
        loop {
            path[cur.level] = cur.id;
            match cur.parent {
                Some(p) => cur = &self.nodes[self.index[&p]],
                None => break,
            }
        }
        Ok(path)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Ingredient {
    pub ingredient: String,
    pub group: String,
}

/// Ingredient lists per class over a declared group vocabulary.
#[derive(Clone, Debug, Default)]
pub struct IngredientTable {
    groups: Vec<String>,
    classes: BTreeMap<ClassId, Vec<Ingredient>>,
}

impl IngredientTable {
    pub fn new(groups: Vec<String>, classes: BTreeMap<ClassId, Vec<Ingredient>>) -> Self {
        Self { groups, classes }
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn classes(&self) -> &BTreeMap<ClassId, Vec<Ingredient>> {
        &self.classes
    }

    fn validated(&self, class: ClassId) -> Result<&[Ingredient]> {
        let Some(list) = self.classes.get(&class) else {
            return Ok(&[]);
        };
        for (k, ing) in list.iter().enumerate() {
            if !self.groups.iter().any(|g| *g == ing.group) {
                return Err(input_err!(
                    "class {class}: ingredient {} uses unknown group {}",
                    ing.ingredient,
                    ing.group
                ));
            }
            if list[..k].iter().any(|o| o.ingredient == ing.ingredient) {
                return Err(input_err!("class {class}: ingredient {} listed twice", ing.ingredient));
            }
        }
        Ok(list)
    }
}

/// Label co-occurrence statistics: `pairs[i][j]` images containing both `i`
/// and `j`, `totals[i]` images containing `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceCounts {
    pairs: Vec<Vec<i64>>,
    totals: Vec<i64>,
}

impl CooccurrenceCounts {
    pub fn new(pairs: Vec<Vec<i64>>, totals: Vec<i64>) -> Result<Self> {
        let n = totals.len();
        if pairs.len() != n || pairs.iter().any(|r| r.len() != n) {
            return Err(input_err!("co-occurrence counts must be {n}x{n} to match {n} totals"));
        }
        for i in 0..n {
            if totals[i] < 0 {
                return Err(input_err!("negative occurrence count for class index {i}"));
            }
            for j in 0..n {
                let o = pairs[i][j];
                if o < 0 {
                    return Err(input_err!("negative pair count at ({i}, {j})"));
                }
                if o != pairs[j][i] {
                    return Err(input_err!("pair counts are not symmetric at ({i}, {j})"));
                }
                if o > totals[i] {
                    return Err(input_err!(
                        "pair count {o} at ({i}, {j}) exceeds class occurrence count {}",
                        totals[i]
                    ));
                }
            }
        }
        Ok(Self { pairs, totals })
    }

    pub fn len(&self) -> usize {
        self.totals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.totals.is_empty()
    }

    pub fn pairs(&self) -> &[Vec<i64>] {
        &self.pairs
    }

    pub fn totals(&self) -> &[i64] {
        &self.totals
    }
}

/// Raw knowledge adjacency: entry (i, j) counts ingredients shared by both
/// classes under the same group; the diagonal is each class's ingredient
/// count.
pub fn build_knowledge_adjacency(table: &IngredientTable, classes: &[ClassId]) -> Result<Matrix> {
    let lists = classes
        .iter()
        .map(|&c| table.validated(c))
        .collect::<Result<Vec<_>>>()?;
    let n = classes.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out.set(i, i, lists[i].len() as f64);
        for j in (i + 1)..n {
            let shared = lists[i].iter().filter(|a| lists[j].contains(a)).count() as f64;
            out.set(i, j, shared);
            out.set(j, i, shared);
        }
    }
    Ok(out)
}

/// Raw hyperclass adjacency: the level of the deepest common ancestor below
/// the root, 0 when only the root is shared, and `levels` on the diagonal.
pub fn build_hyperclass_adjacency(taxonomy: &ClassTaxonomy, classes: &[ClassId]) -> Result<Matrix> {
    let paths = classes
        .iter()
        .map(|&c| taxonomy.path(c))
        .collect::<Result<Vec<_>>>()?;
    let n = classes.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // paths agree on a prefix; the cursor is the last shared level
            let cursor = (1..=taxonomy.levels())
                .rev()
                .find(|&l| paths[i][l] == paths[j][l])
                .unwrap_or(0);
            out.set(i, j, cursor as f64);
        }
    }
    Ok(out)
}

/// Raw probability adjacency `O[i][j] / T[i]`; rows with `T[i] = 0` stay zero.
pub fn build_probability_adjacency(counts: &CooccurrenceCounts) -> Matrix {
    let n = counts.len();
    Matrix::from_fn(n, n, |i, j| {
        let total = counts.totals[i];
        if total == 0 {
            0.0
        } else {
            counts.pairs[i][j] as f64 / total as f64
        }
    })
}

/// Scales by the global maximum, thresholds at `tau` and forces self-loops.
pub fn normalize_and_quantize(raw: &Matrix, tau: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(config_err!("threshold tau must lie in [0, 1], got {tau}"));
    }
    if raw.rows() != raw.cols() {
        return Err(input_err!("adjacency must be square, got {}x{}", raw.rows(), raw.cols()));
    }
    if raw.data().iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(input_err!("raw adjacency entries must be finite and non-negative"));
    }
    let max = raw.max();
    let mut out = if max > 0.0 {
        raw.map(|x| if x / max >= tau { 1.0 } else { 0.0 })
    } else {
        Matrix::zeros(raw.rows(), raw.cols())
    };
    for i in 0..out.rows() {
        out.set(i, i, 1.0);
    }
    Ok(out)
}

/// `D^{-1/2} A D^{-1/2}` with `D` the row-degree matrix.
pub fn laplacian_normalize(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(input_err!("adjacency must be square, got {}x{}", n, a.cols()));
    }
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let degree: f64 = a.row(i).iter().sum();
        if !(degree > 0.0) {
            return Err(Error::Invariant(alloc::format!(
                "node {i} has zero degree; self-loops must be present before normalization"
            )));
        }
        inv_sqrt.push(1.0 / libm::sqrt(degree));
    }
    Ok(Matrix::from_fn(n, n, |i, j| inv_sqrt[i] * a.get(i, j) * inv_sqrt[j]))
}

/// Logical and normalized forms of the available prior graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSourceGraphSet {
    tau: f64,
    n: usize,
    logical: [Option<Matrix>; 3],
    normalized: [Option<Matrix>; 3],
}

impl MultiSourceGraphSet {
    /// Quantizes and normalizes raw matrices indexed by [`GraphKind::index`].
    pub fn from_raw(raw: [Option<Matrix>; 3], tau: f64) -> Result<Self> {
        let n = raw
            .iter()
            .flatten()
            .map(Matrix::rows)
            .next()
            .ok_or_else(|| input_err!("at least one prior graph is required"))?;
        let mut logical: [Option<Matrix>; 3] = [None, None, None];
        let mut normalized: [Option<Matrix>; 3] = [None, None, None];
        for (k, m) in raw.iter().enumerate() {
            if let Some(m) = m {
                if m.shape() != (n, n) {
                    return Err(input_err!(
                        "graph {} is {}x{}, expected {n}x{n}",
                        GraphKind::ALL[k].tag(),
                        m.rows(),
                        m.cols()
                    ));
                }
                let a = normalize_and_quantize(m, tau)?;
                normalized[k] = Some(laplacian_normalize(&a)?);
                logical[k] = Some(a);
            }
        }
        Ok(Self { tau, n, logical, normalized })
    }

    /// Rebuilds the set from already quantized matrices, such as those read
    /// back from a graph file.
    pub fn from_logical(logical: [Option<Matrix>; 3], tau: f64) -> Result<Self> {
        let mut normalized: [Option<Matrix>; 3] = [None, None, None];
        let mut n = None;
        for (k, m) in logical.iter().enumerate() {
            let Some(m) = m else { continue };
            let tag = GraphKind::ALL[k].tag();
            let size = *n.get_or_insert(m.rows());
            if m.shape() != (size, size) {
                return Err(input_err!("graph {tag} is {}x{}, expected {size}x{size}", m.rows(), m.cols()));
            }
            if m.data().iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(input_err!("graph {tag} has entries outside {{0, 1}}"));
            }
            if (0..size).any(|i| m.get(i, i) != 1.0) {
                return Err(input_err!("graph {tag} is missing self-loops"));
            }
            normalized[k] = Some(laplacian_normalize(m)?);
        }
        let n = n.ok_or_else(|| input_err!("at least one prior graph is required"))?;
        Ok(Self { tau, n, logical, normalized })
    }

    /// Builds all graphs from side information. The knowledge graph is
    /// skipped when no ingredient table is supplied.
    pub fn build(
        classes: &[ClassId],
        ingredients: Option<&IngredientTable>,
        taxonomy: &ClassTaxonomy,
        counts: &CooccurrenceCounts,
        tau: f64,
    ) -> Result<Self> {
        if counts.len() != classes.len() {
            return Err(input_err!(
                "co-occurrence counts cover {} classes, semantic table has {}",
                counts.len(),
                classes.len()
            ));
        }
        let knowledge = ingredients
            .map(|t| build_knowledge_adjacency(t, classes))
            .transpose()?;
        let hyper = build_hyperclass_adjacency(taxonomy, classes)?;
        let prob = build_probability_adjacency(counts);
        Self::from_raw([knowledge, Some(hyper), Some(prob)], tau)
    }

    /// Every graph replaced by the identity: no cross-class correlation.
    pub fn identity(n: usize, tau: f64) -> Self {
        let eye = Some(Matrix::identity(n));
        Self {
            tau,
            n,
            logical: [eye.clone(), eye.clone(), eye.clone()],
            normalized: [eye.clone(), eye.clone(), eye],
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn class_count(&self) -> usize {
        self.n
    }

    pub fn logical(&self, kind: GraphKind) -> Option<&Matrix> {
        self.logical[kind.index()].as_ref()
    }

    pub fn normalized(&self, kind: GraphKind) -> Option<&Matrix> {
        self.normalized[kind.index()].as_ref()
    }

    pub fn available(&self) -> Vec<GraphKind> {
        GraphKind::ALL
            .into_iter()
            .filter(|k| self.logical[k.index()].is_some())
            .collect()
    }
}
