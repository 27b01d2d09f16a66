//! Set-prediction loss: per-layer Hungarian matching of triplet predictions
//! to grouped ground truth, then box, GIoU, class and action terms.

use hoi_tensor::{FocalParams, Graph, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::boxes::{box_l1, cxcywh_to_xyxy, giou, giou_var, row};
use crate::config::{ActionLoss, TrainConfig};
use crate::decoder::{PredictionSet, TripletVars};
use crate::matching::{hungarian, Assignment};

/// Ground-truth pairs of one image. Boxes are normalized `cx, cy, w, h`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub human_boxes: Array2<f64>,
    pub object_boxes: Array2<f64>,
    pub classes: Vec<usize>,
    /// `M × actions`, multi-hot.
    pub actions: Array2<f64>,
}

impl TargetSet {
    pub fn empty(n_actions: usize) -> Self {
        TargetSet {
            human_boxes: Array2::zeros((0, 4)),
            object_boxes: Array2::zeros((0, 4)),
            classes: Vec::new(),
            actions: Array2::zeros((0, n_actions)),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Reorders pairs so that new pair `i` is old pair `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let take = |a: &Array2<f64>| Array2::from_shape_fn((perm.len(), a.ncols()), |(i, j)| a[[perm[i], j]]);
        TargetSet {
            human_boxes: take(&self.human_boxes),
            object_boxes: take(&self.object_boxes),
            classes: perm.iter().map(|&i| self.classes[i]).collect(),
            actions: take(&self.actions),
        }
    }
}

/// Loss coefficients; the same values weight the matching cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bbox: f64,
    pub giou: f64,
    pub class: f64,
    pub action: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(t: &TrainConfig) -> Self {
        LossWeights { bbox: t.lambda_bbox, giou: t.lambda_giou, class: t.lambda_class, action: t.lambda_action }
    }
}

/// Matching cost between every query and every target of one image.
pub fn pairwise_cost(pred: &PredictionSet, target: &TargetSet, w: &LossWeights) -> Array2<f64> {
    let (hb, ob, cp, ap) = (
        pred.human_boxes.as_ref().expect("human boxes"),
        pred.object_boxes.as_ref().expect("object boxes"),
        pred.class_probs.as_ref().expect("class probabilities"),
        pred.action_probs.as_ref().expect("action probabilities"),
    );
    let n = hb.nrows();
    let m = target.len();
    let n_act = ap.ncols();
    Array2::from_shape_fn((n, m), |(i, j)| {
        let (ph, po) = (row(hb, i), row(ob, i));
        let (th, to) = (row(&target.human_boxes, j), row(&target.object_boxes, j));
        let l1 = box_l1(ph, th) + box_l1(po, to);
        let gl = (1.0 - giou(cxcywh_to_xyxy(ph), cxcywh_to_xyxy(th)))
            + (1.0 - giou(cxcywh_to_xyxy(po), cxcywh_to_xyxy(to)));
        let class = -cp[[i, target.classes[j]]];
        let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0usize, 0.0, 0usize);
        for k in 0..n_act {
            if target.actions[[j, k]] > 0.5 {
                pos += 1.0 - ap[[i, k]];
                npos += 1;
            } else {
                neg += ap[[i, k]];
                nneg += 1;
            }
        }
        let action = if npos > 0 { pos / npos as f64 } else { 0.0 } + if nneg > 0 { neg / nneg as f64 } else { 0.0 };
        w.bbox * l1 + w.giou * gl + w.class * class + w.action * action
    })
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub bbox: f64,
    pub giou: f64,
    pub class: f64,
    pub action: f64,
}

impl LossComponents {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.bbox * self.bbox + w.giou * self.giou + w.class * self.class + w.action * self.action
    }

    fn add(&mut self, o: &LossComponents) {
        self.bbox += o.bbox;
        self.giou += o.giou;
        self.class += o.class;
        self.action += o.action;
    }
}

/// Summary of one loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Components of the final prediction set.
    pub final_set: LossComponents,
    /// Components summed over every supervised set (final included).
    pub all_sets: LossComponents,
    pub matched_pairs: usize,
}

/// Options controlling classification and action terms.
#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub background_weight: f64,
    pub action: ActionLoss,
    /// Supervise every decoder layer, not only the final set.
    pub aux: bool,
}

impl From<&TrainConfig> for LossOptions {
    fn from(t: &TrainConfig) -> Self {
        LossOptions {
            weights: LossWeights::from(t),
            background_weight: t.background_class_weight,
            action: t.action_loss,
            aux: t.aux_loss,
        }
    }
}

/// Builds the total loss for a batch. `sets[b]` holds the triplet sets of
/// image `b` (final set last); each set of each image is matched independently.
pub fn total_loss(
    g: &mut Graph,
    sets: &[&[TripletVars]],
    targets: &[TargetSet],
    opts: &LossOptions,
) -> (Var, LossReport, Vec<Vec<Assignment>>) {
    assert_eq!(sets.len(), targets.len(), "one target set per image");
    let n_sets = sets.first().map_or(0, |s| s.len());
    let matched: usize = targets.iter().map(|t| t.len()).sum();
    let num_pairs = matched.max(1) as f64;
    let first = if opts.aux { 0 } else { n_sets.saturating_sub(1) };

    let mut terms = Vec::new();
    let mut all = LossComponents::default();
    let mut last = LossComponents::default();
    let mut assignments = vec![Vec::new(); sets.len()];
    for s in first..n_sets {
        let per_image: Vec<TripletVars> = sets.iter().map(|v| v[s]).collect();
        let plan: Vec<Assignment> = per_image
            .iter()
            .zip(targets)
            .map(|(p, t)| hungarian(&pairwise_cost(&p.values(g), t, &opts.weights)))
            .collect();
        let (var, comps) = set_loss(g, &per_image, targets, &plan, num_pairs, opts);
        terms.push(var);
        all.add(&comps);
        last = comps;
        for (b, a) in plan.into_iter().enumerate() {
            assignments[b].push(a);
        }
    }
    let total = match terms.len() {
        0 => g.zeros(1, 1),
        _ => {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t);
            }
            acc
        }
    };
    let report = LossReport { total: g.scalar(total), final_set: last, all_sets: all, matched_pairs: matched };
    (total, report, assignments)
}

/// Weighted loss of one prediction set across the batch.
fn set_loss(
    g: &mut Graph,
    preds: &[TripletVars],
    targets: &[TargetSet],
    plan: &[Assignment],
    num_pairs: f64,
    opts: &LossOptions,
) -> (Var, LossComponents) {
    let w = &opts.weights;
    let mut bbox_terms = Vec::new();
    let mut giou_terms = Vec::new();
    let mut class_terms = Vec::new();
    let mut action_terms = Vec::new();

    // Class weights are normalized over the whole batch.
    let mut weight_total = 0.0;
    let mut class_weights = Vec::new();
    for (p, (t, a)) in preds.iter().zip(targets.iter().zip(plan)) {
        let (n, c) = g.shape(p.class_logits);
        let bg = c - 1;
        let mut cw = Array2::zeros((n, c));
        let mut matched_to = vec![None; n];
        for &(q, j) in a {
            matched_to[q] = Some(j);
        }
        for q in 0..n {
            match matched_to[q] {
                Some(j) => {
                    cw[[q, t.classes[j]]] = 1.0;
                    weight_total += 1.0;
                }
                None => {
                    cw[[q, bg]] = opts.background_weight;
                    weight_total += opts.background_weight;
                }
            }
        }
        class_weights.push(cw);
    }
    let weight_total = if weight_total > 0.0 { weight_total } else { 1.0 };

    let focal = match opts.action {
        ActionLoss::Bce => FocalParams::None,
        ActionLoss::Focal { gamma, alpha } => FocalParams::Focal { gamma, alpha },
    };
    for ((p, t), (a, cw)) in preds.iter().zip(targets).zip(plan.iter().zip(class_weights)) {
        let logp = g.log_softmax(p.class_logits);
        let ce = g.weighted_sum(logp, cw.mapv(|v| -v / weight_total));
        class_terms.push(ce);

        let (n, n_act) = g.shape(p.action_logits);
        let mut act_t = Array2::zeros((n, n_act));
        for &(q, j) in a {
            act_t.row_mut(q).assign(&t.actions.row(j));
        }
        let bce = g.binary_cross_entropy(p.action_logits, act_t, focal);
        let s = g.sum(bce);
        action_terms.push(g.scale(s, 1.0 / num_pairs));

        if a.is_empty() {
            continue;
        }
        let qs: Vec<usize> = a.iter().map(|&(q, _)| q).collect();
        let js: Vec<usize> = a.iter().map(|&(_, j)| j).collect();
        let gather = |m: &Array2<f64>| Array2::from_shape_fn((js.len(), 4), |(i, k)| m[[js[i], k]]);
        for (pred, tgt) in [(p.human_boxes, gather(&t.human_boxes)), (p.object_boxes, gather(&t.object_boxes))] {
            let pr = g.gather_rows(pred, &qs);
            let tc = g.constant(tgt.clone());
            let d = g.sub(pr, tc);
            let d = g.abs(d);
            let l1 = g.sum(d);
            bbox_terms.push(g.scale(l1, 1.0 / num_pairs));
            let gv = giou_var(g, pr, &tgt);
            let gs = g.sum(gv);
            // Σ (1 − giou) = k − Σ giou
            let gl = g.scale(gs, -1.0 / num_pairs);
            giou_terms.push(g.add_scalar(gl, qs.len() as f64 / num_pairs));
        }
    }

    let sum_of = |g: &mut Graph, v: Vec<Var>| -> (Option<Var>, f64) {
        let mut it = v.into_iter();
        let first = it.next();
        let acc = first.map(|f| it.fold(f, |a, b| g.add(a, b)));
        let val = acc.map_or(0.0, |a| g.scalar(a));
        (acc, val)
    };
    let (b, bv) = sum_of(g, bbox_terms);
    let (u, uv) = sum_of(g, giou_terms);
    let (c, cv) = sum_of(g, class_terms);
    let (ac, av) = sum_of(g, action_terms);
    let mut weighted = Vec::new();
    for (term, lam) in [(b, w.bbox), (u, w.giou), (c, w.class), (ac, w.action)] {
        if let Some(t) = term {
            weighted.push(g.scale(t, lam));
        }
    }
    let total = sum_of(g, weighted).0.unwrap_or_else(|| g.zeros(1, 1));
    (total, LossComponents { bbox: bv, giou: uv, class: cv, action: av })
}
