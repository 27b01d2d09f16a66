//! HOI mean average precision with Full / Rare / Non-Rare splits.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::boxes::iou;
use crate::inference::Detection;

/// `(object class, action)`.
pub type Category = (usize, usize);

pub const DEFAULT_RARE_THRESHOLD: usize = 10;
pub const IOU_THRESHOLD: f64 = 0.5;

/// Ground-truth triplet in pixel corners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtTriplet {
    pub image_id: u64,
    pub human_box: [f64; 4],
    pub object_box: Option<[f64; 4]>,
    pub object_class: usize,
    pub action: usize,
}

/// A detection attributed to an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub image_id: u64,
    #[serde(flatten)]
    pub detection: Detection,
}

/// True-positive flags for score-sorted detections of one category.
/// `gts[i]` are the candidate ground truths of the detection's image; each
/// can be consumed once.
pub fn match_detections(
    dets: &[(u64, [f64; 4], [f64; 4])],
    gts: &HashMap<u64, Vec<([f64; 4], Option<[f64; 4]>)>>,
    ignore_object: bool,
) -> Vec<bool> {
    let mut used: HashMap<u64, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    dets.iter()
        .map(|(img, h, o)| {
            let Some(cands) = gts.get(img) else { return false };
            let used = used.get_mut(img).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (i, (gh, go)) in cands.iter().enumerate() {
                if used[i] {
                    continue;
                }
                let ov = match (ignore_object, go) {
                    (false, Some(go)) => iou(*h, *gh).min(iou(*o, *go)),
                    _ => iou(*h, *gh),
                };
                if ov > IOU_THRESHOLD && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((i, ov));
                }
            }
            match best {
                Some((i, _)) => {
                    used[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP: area under the precision envelope. Recall
/// rises by exactly `1 / n_gt` at each true positive, so the area is the
/// envelope summed over true positives, divided once by `n_gt`.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect();
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let area: f64 = flags.iter().zip(&prec).filter(|(f, _)| **f).map(|(_, p)| p).sum();
    area / n_gt as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub object_class: usize,
    pub action: usize,
    pub ap: f64,
    pub n_gt: usize,
    pub rare: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub full: f64,
    /// `None` when no evaluated category is rare (or none is non-rare).
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub categories: Vec<CategoryAp>,
}

/// Per-category counts of training triplets, used for the rarity split.
pub fn category_counts(train: &[GtTriplet]) -> BTreeMap<Category, usize> {
    let mut counts = BTreeMap::new();
    for t in dedup(train) {
        *counts.entry((t.object_class, t.action)).or_insert(0) += 1;
    }
    counts
}

fn dedup(gts: &[GtTriplet]) -> Vec<&GtTriplet> {
    let mut seen = HashSet::new();
    gts.iter()
        .filter(|g| {
            let bits = |b: [f64; 4]| b.map(f64::to_bits);
            seen.insert((g.image_id, bits(g.human_box), g.object_box.map(bits), g.object_class, g.action))
        })
        .collect()
}

/// Score-ranked true-positive flags and ground-truth count for every
/// category that has ground truth.
pub fn category_flags(
    detections: &[ImageDetection],
    gts: &[GtTriplet],
    ignore_object: &[bool],
) -> Vec<(Category, Vec<bool>, usize)> {
    let mut by_cat: BTreeMap<Category, HashMap<u64, Vec<([f64; 4], Option<[f64; 4]>)>>> = BTreeMap::new();
    let mut n_gt: BTreeMap<Category, usize> = BTreeMap::new();
    for g in dedup(gts) {
        let cat = (g.object_class, g.action);
        by_cat.entry(cat).or_default().entry(g.image_id).or_default().push((g.human_box, g.object_box));
        *n_gt.entry(cat).or_insert(0) += 1;
    }
    let mut dets_by_cat: BTreeMap<Category, Vec<&ImageDetection>> = BTreeMap::new();
    for d in detections {
        dets_by_cat.entry((d.detection.object_class, d.detection.action)).or_default().push(d);
    }
    by_cat
        .iter()
        .map(|(cat, gts)| {
            let mut dets = dets_by_cat.remove(cat).unwrap_or_default();
            dets.sort_by(|a, b| b.detection.score.total_cmp(&a.detection.score));
            let flat: Vec<_> = dets.iter().map(|d| (d.image_id, d.detection.human_box, d.detection.object_box)).collect();
            let ignore = ignore_object.get(cat.1).copied().unwrap_or(false);
            (*cat, match_detections(&flat, gts, ignore), n_gt[cat])
        })
        .collect()
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            (tp as f64 / n_gt.max(1) as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Evaluates detections against ground truth. Categories with no test
/// ground truth are excluded; a category is rare when it has fewer than
/// `rare_threshold` training instances.
pub fn evaluate(
    detections: &[ImageDetection],
    gts: &[GtTriplet],
    train_counts: &BTreeMap<Category, usize>,
    rare_threshold: usize,
    ignore_object: &[bool],
) -> EvalReport {
    let categories: Vec<CategoryAp> = category_flags(detections, gts, ignore_object)
        .into_iter()
        .map(|(cat, flags, n)| CategoryAp {
            object_class: cat.0,
            action: cat.1,
            ap: average_precision(&flags, n),
            n_gt: n,
            rare: train_counts.get(&cat).copied().unwrap_or(0) < rare_threshold,
        })
        .collect();
    let mean = |it: Vec<f64>| (!it.is_empty()).then(|| it.iter().sum::<f64>() / it.len() as f64);
    EvalReport {
        full: mean(categories.iter().map(|c| c.ap).collect()).unwrap_or(0.0),
        rare: mean(categories.iter().filter(|c| c.rare).map(|c| c.ap).collect()),
        non_rare: mean(categories.iter().filter(|c| !c.rare).map(|c| c.ap).collect()),
        categories,
    }
}
