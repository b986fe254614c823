//! Detection and classification scoring: IoU matching, average precision,
//! recall at k, harmonic mean, accuracy and silhouette.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{ClassId, RegionFeatureSet};
use crate::error::{config_err, input_err, Result};
use crate::training::UnseenClassifier;

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels with `x2 > x1`, `y2 > y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "[f64; 4]", into = "[f64; 4]"))]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) || x2 <= x1 || y2 <= y1 {
            return Err(input_err!("degenerate box [{x1}, {y1}, {x2}, {y2}]"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = crate::Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: ClassId,
    #[cfg_attr(feature = "serde", serde(rename = "box"))]
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection {
    pub image_id: String,
    pub class_id: ClassId,
    #[cfg_attr(feature = "serde", serde(rename = "box"))]
    pub bbox: BoundingBox,
    pub score: f64,
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / (a.area() + b.area() - inter)
}

fn check_scores(dets: &[Detection]) -> Result<()> {
    match dets.iter().position(|d| !d.score.is_finite()) {
        Some(i) => Err(input_err!("detection {i} has a non-finite score")),
        None => Ok(()),
    }
}

/// Indices of `dets` by descending score; equal scores keep input order.
fn by_score(dets: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching of one class's detections against its ground truth.
/// Returns the true-positive flag of each detection in descending-score order.
fn match_class(dets: &[&Detection], gts: &[&GroundTruth], thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    by_score(dets)
        .into_iter()
        .map(|d| {
            let det = dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.image_id != det.image_id {
                    continue;
                }
                let o = iou(&det.bbox, &gt.bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, o)) if o >= thresh => {
                    used[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the precision envelope at every recall change.
fn all_points_ap(hits: &[bool], positives: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// AP of one class; `None` when the class has no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], class_id: ClassId, iou_thresh: f64) -> Result<Option<f64>> {
    check_scores(dets)?;
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).collect();
    if gts.is_empty() {
        return Ok(None);
    }
    let dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    let hits = match_class(&dets, &gts, iou_thresh);
    Ok(Some(all_points_ap(&hits, gts.len())))
}

/// Unweighted mean AP over the classes of `classes` that have ground truth.
pub fn mean_average_precision(dets: &[Detection], gts: &[GroundTruth], classes: &[ClassId], iou_thresh: f64) -> Result<f64> {
    if classes.is_empty() {
        return Err(input_err!("mAP needs at least one class"));
    }
    let aps = classes
        .iter()
        .filter_map(|&c| average_precision(dets, gts, c, iou_thresh).transpose())
        .collect::<Result<Vec<f64>>>()?;
    if aps.is_empty() {
        return Err(input_err!("none of the {} classes has ground truth", classes.len()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Fraction of ground-truth boxes matched after keeping the `k` best
/// detections of every image.
pub fn recall_at_k(dets: &[Detection], gts: &[GroundTruth], k: usize, iou_thresh: f64) -> Result<f64> {
    if k == 0 {
        return Err(config_err!("recall@k needs k ≥ 1"));
    }
    check_scores(dets)?;
    if gts.is_empty() {
        return Err(input_err!("recall is undefined without ground truth"));
    }
    let mut per_image: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        per_image.entry(d.image_id.as_str()).or_default().push(d);
    }
    let mut kept: BTreeMap<ClassId, Vec<&Detection>> = BTreeMap::new();
    for image in per_image.values() {
        for i in by_score(image).into_iter().take(k) {
            kept.entry(image[i].class_id).or_default().push(image[i]);
        }
    }
    let mut classes: Vec<ClassId> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut matched = 0usize;
    for c in classes {
        let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
        let class_dets = kept.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        matched += match_class(class_dets, &class_gts, iou_thresh).into_iter().filter(|&h| h).count();
    }
    Ok(matched as f64 / gts.len() as f64)
}

/// `2su/(s+u)`, or 0 when both are 0.
pub fn harmonic_mean(seen: f64, unseen: f64) -> Result<f64> {
    if !(seen >= 0.0 && unseen >= 0.0) || !seen.is_finite() || !unseen.is_finite() {
        return Err(input_err!("harmonic mean needs finite non-negative inputs, got {seen} and {unseen}"));
    }
    if seen + unseen == 0.0 {
        return Ok(0.0);
    }
    // written so that (x, x) returns x exactly
    Ok(seen * (2.0 * unseen / (seen + unseen)))
}

/// Fraction of records whose predicted class equals the label.
pub fn classification_accuracy(classifier: &UnseenClassifier, features: &RegionFeatureSet) -> Result<f64> {
    if features.is_empty() {
        return Err(input_err!("accuracy needs at least one record"));
    }
    if let Some(r) = features.records().iter().find(|r| !classifier.classes.contains(&r.class_id)) {
        return Err(input_err!("class {} is not scored by the classifier", r.class_id));
    }
    let predicted = classifier.predict(&features.feature_matrix())?;
    let correct = predicted.iter().zip(features.records()).filter(|(p, r)| **p == r.class_id).count();
    Ok(correct as f64 / features.len() as f64)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Mean silhouette coefficient under the Euclidean metric. Members of
/// singleton classes score 0, as do points with `a = b = 0`.
pub fn silhouette(features: &RegionFeatureSet) -> Result<f64> {
    let ids = features.class_ids();
    if ids.len() < 2 {
        return Err(input_err!("silhouette needs at least two classes, got {}", ids.len()));
    }
    let records = features.records();
    let label: Vec<usize> = records
        .iter()
        .map(|r| ids.iter().position(|&c| c == r.class_id).expect("collected above"))
        .collect();
    let mut sizes = vec![0usize; ids.len()];
    for &l in &label {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; ids.len()];
    for i in 0..records.len() {
        if sizes[label[i]] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..records.len() {
            if i != j {
                sums[label[j]] += distance(&records[i].feature, &records[j].feature);
            }
        }
        let a = sums[label[i]] / (sizes[label[i]] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&c| c != label[i])
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassScore {
    pub class_id: ClassId,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RecallScore {
    pub iou: f64,
    pub k: usize,
    pub recall: f64,
}

/// Metrics of one evaluation run. Detection fields are filled by
/// [`detection_report`]; classification fields by the pipeline.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    /// Precision-recall interpolation used for AP.
    pub interpolation: String,
    pub per_class_ap: Vec<ClassScore>,
    pub map: Option<f64>,
    pub recall: Vec<RecallScore>,
    /// Seen-class aggregate (mAP for detection, accuracy for classification).
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub hm: Option<f64>,
    /// Accuracy of the unseen-only classifier on real unseen features.
    pub unseen_accuracy: Option<f64>,
    pub silhouette: Option<f64>,
}

pub const INTERPOLATION: &str = "all-points";

impl EvalReport {
    pub fn new() -> Self {
        Self {
            interpolation: INTERPOLATION.into(),
            ..Self::default()
        }
    }
}

/// GZSD scoring: per-class AP and mAP at `iou_thresh` over all classes,
/// recall at `k` for every threshold in `recall_thresholds`, and seen/unseen
/// mAP combined by the harmonic mean.
pub fn detection_report(
    dets: &[Detection],
    gts: &[GroundTruth],
    seen: &[ClassId],
    unseen: &[ClassId],
    iou_thresh: f64,
    recall_thresholds: &[f64],
    k: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport::new();
    let all: Vec<ClassId> = seen.iter().chain(unseen).copied().collect();
    for &c in &all {
        if let Some(ap) = average_precision(dets, gts, c, iou_thresh)? {
            report.per_class_ap.push(ClassScore { class_id: c, value: ap });
        }
    }
    report.map = Some(mean_average_precision(dets, gts, &all, iou_thresh)?);
    for &t in recall_thresholds {
        report.recall.push(RecallScore {
            iou: t,
            k,
            recall: recall_at_k(dets, gts, k, t)?,
        });
    }
    let has_gt = |set: &[ClassId]| gts.iter().any(|g| set.contains(&g.class_id));
    if has_gt(seen) {
        report.seen = Some(mean_average_precision(dets, gts, seen, iou_thresh)?);
    }
    if has_gt(unseen) {
        report.unseen = Some(mean_average_precision(dets, gts, unseen, iou_thresh)?);
    }
    if let (Some(s), Some(u)) = (report.seen, report.unseen) {
        report.hm = Some(harmonic_mean(s, u)?);
    }
    Ok(report)
}
