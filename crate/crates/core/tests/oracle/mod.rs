//! Brute-force detection metrics, taxonomy and spectral helpers, and random
//! instances, written without the library so the two can be compared.

#![allow(dead_code)]

use std::collections::BTreeSet;

use kefs_core::evaluation::{BoundingBox, Detection, GroundTruth};
use kefs_core::graphs::{ClassTaxonomy, TaxonNode};
use kefs_core::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;

fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

/// `true` when detection `a` is processed before `b`.
fn before(dets: &[&Detection], a: usize, b: usize) -> bool {
    dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b)
}

/// Rank-ordered true-positive flags for one class.
fn greedy(dets: &[&Detection], gts: &[&GroundTruth], thresh: f64) -> Vec<bool> {
    let n = dets.len();
    let mut order = Vec::new();
    let mut taken = vec![false; n];
    for _ in 0..n {
        let mut pick = None;
        for i in 0..n {
            if !taken[i] && pick.is_none_or(|p| before(dets, i, p)) {
                pick = Some(i);
            }
        }
        let p = pick.unwrap();
        taken[p] = true;
        order.push(p);
    }
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for d in order {
        let mut best = -1.0;
        let mut best_g = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != dets[d].image_id {
                continue;
            }
            let o = overlap(dets[d].bbox.coords(), gt.bbox.coords());
            if o > best {
                best = o;
                best_g = Some(g);
            }
        }
        match best_g {
            Some(g) if best >= thresh => {
                used[g] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    hits
}

pub fn ap(dets: &[Detection], gts: &[GroundTruth], class: u64, thresh: f64) -> Option<f64> {
    let g: Vec<&GroundTruth> = gts.iter().filter(|x| x.class_id == class).collect();
    if g.is_empty() {
        return None;
    }
    let d: Vec<&Detection> = dets.iter().filter(|x| x.class_id == class).collect();
    let hits = greedy(&d, &g, thresh);
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut tp = 0.0;
    for (i, h) in hits.iter().enumerate() {
        if *h {
            tp += 1.0;
        }
        prec.push(tp / (i + 1) as f64);
        rec.push(tp / g.len() as f64);
    }
    let mut total = 0.0;
    let mut last = 0.0;
    for i in 0..hits.len() {
        if rec[i] > last {
            let envelope = prec[i..].iter().cloned().fold(0.0, f64::max);
            total += (rec[i] - last) * envelope;
            last = rec[i];
        }
    }
    Some(total)
}

pub fn map(dets: &[Detection], gts: &[GroundTruth], classes: &[u64], thresh: f64) -> Option<f64> {
    let aps: Vec<f64> = classes.iter().filter_map(|&c| ap(dets, gts, c, thresh)).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn recall(dets: &[Detection], gts: &[GroundTruth], k: usize, thresh: f64) -> f64 {
    let all: Vec<&Detection> = dets.iter().collect();
    // a detection survives when fewer than k of its image rank ahead of it
    let kept: Vec<usize> = (0..all.len())
        .filter(|&i| {
            (0..all.len())
                .filter(|&j| j != i && all[j].image_id == all[i].image_id && before(&all, j, i))
                .count()
                < k
        })
        .collect();
    let mut matched = 0;
    let mut classes: Vec<u64> = gts.iter().map(|g| g.class_id).collect();
    classes.sort();
    classes.dedup();
    for c in classes {
        let d: Vec<&Detection> = kept.iter().map(|&i| all[i]).filter(|x| x.class_id == c).collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|x| x.class_id == c).collect();
        matched += greedy(&d, &g, thresh).iter().filter(|&&h| h).count();
    }
    matched as f64 / gts.len() as f64
}

fn random_box(rng: &mut impl Rng) -> BoundingBox {
    let x = rng.random_range(0..8) as f64;
    let y = rng.random_range(0..8) as f64;
    let w = rng.random_range(1..5) as f64;
    let h = rng.random_range(1..5) as f64;
    BoundingBox::new(x, y, x + w, y + h).unwrap()
}

/// Up to 30 detections and 10 ground-truth boxes over 3 images and 3 classes
/// on a coarse grid, so overlaps and score ties are common. Ground truth is
/// never empty.
pub fn instance(rng: &mut impl Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = ["a", "b", "c"];
    let n_gt = rng.random_range(1..=10);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| GroundTruth {
            image_id: images[rng.random_range(0..3)].to_string(),
            class_id: rng.random_range(0..3),
            bbox: random_box(rng),
        })
        .collect();
    let n_det = rng.random_range(0..=30);
    let dets = (0..n_det)
        .map(|_| {
            // half the detections jitter a ground-truth box
            let bbox = if rng.random_bool(0.5) {
                let g = &gts[rng.random_range(0..gts.len())];
                let [x1, y1, x2, y2] = g.bbox.coords();
                let dx = rng.random_range(-1..=1) as f64 * 0.5;
                BoundingBox::new(x1 + dx, y1, x2 + dx, y2).unwrap()
            } else {
                random_box(rng)
            };
            Detection {
                image_id: images[rng.random_range(0..3)].to_string(),
                class_id: rng.random_range(0..3),
                bbox,
                score: rng.random_range(0..6) as f64 / 5.0,
            }
        })
        .collect();
    (dets, gts)
}

/// Random tree with every class leaf at depth `levels`. Returns the taxonomy
/// and the leaf ids.
pub fn random_tree(rng: &mut impl Rng, leaves: usize, levels: usize) -> (ClassTaxonomy, Vec<u64>) {
    let mut nodes = vec![TaxonNode { id: 0, parent: None, level: 0 }];
    let mut children: Vec<Vec<u64>> = vec![Vec::new()];
    let mut leaf_ids = Vec::new();
    for _ in 0..leaves {
        let mut cur = 0u64;
        for level in 1..=levels {
            let kids = &children[cur as usize];
            let reuse = level < levels && !kids.is_empty() && rng.random_bool(0.6);
            cur = if reuse {
                kids[rng.random_range(0..kids.len())]
            } else {
                let id = nodes.len() as u64;
                nodes.push(TaxonNode { id, parent: Some(cur), level });
                children.push(Vec::new());
                children[cur as usize].push(id);
                id
            };
        }
        leaf_ids.push(cur);
    }
    let mut shuffled = nodes.clone();
    shuffled.shuffle(rng);
    (ClassTaxonomy::new(levels, shuffled).unwrap(), leaf_ids)
}

/// Depth of the lowest common ancestor by walking parent pointers.
pub fn lca_depth(nodes: &[TaxonNode], a: u64, b: u64) -> usize {
    let find = |id: u64| nodes.iter().find(|n| n.id == id).unwrap().clone();
    let mut ancestors = BTreeSet::new();
    let mut cur = Some(a);
    while let Some(id) = cur {
        ancestors.insert(id);
        cur = find(id).parent;
    }
    let mut cur = b;
    loop {
        if ancestors.contains(&cur) {
            return find(cur).level;
        }
        cur = find(cur).parent.unwrap();
    }
}

/// Spectral radius via Gelfand's formula with repeated squaring.
pub fn gelfand_radius(m: &Matrix) -> f64 {
    let mut p = m.clone();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..40 {
        let norm = p.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        // keep entries O(1) and track the log of the removed factor
        p = p.scale(1.0 / norm);
        log_scale += norm.ln() / power;
        p = p.matmul(&p);
        power *= 2.0;
    }
    let norm = p.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    (log_scale + norm.ln() / power).exp()
}
