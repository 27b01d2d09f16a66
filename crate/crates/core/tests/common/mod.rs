//! Oracles and probes shared by the integration tests and the acceptance
//! runner. Every check returns `Err(reason)` instead of panicking so the
//! runner can report it.

#![allow(dead_code)]

use std::collections::BTreeMap;

use hoi_core::boxes::iou;
use hoi_core::config::{BackboneKind, Config, ModelConfig, TrainConfig, ValidConfig};
use hoi_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use hoi_core::decoder::{DecoderTag, PredictionSet};
use hoi_core::evaluation::{evaluate, Category, GtTriplet, ImageDetection};
use hoi_core::featurizer::ImageBatch;
use hoi_core::inference::Detection;
use hoi_core::loss::{total_loss, LossOptions, TargetSet};
use hoi_core::matching::{assignment_cost, hungarian};
use hoi_core::model::HoiModel;
use hoi_tensor::nn::Ctx;
use hoi_tensor::Graph;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

/// D=8, 2 heads, one layer per stage except two per task decoder, 3 queries,
/// 3 object classes, 2 actions. 128×128 inputs give a 4×4 feature map.
pub fn gradcheck_config() -> ValidConfig {
    Config {
        model: ModelConfig {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
            n_queries: 3,
            n_obj_classes: 3,
            n_action_classes: 2,
            enc_base_layers: 1,
            enc_head_layers: 1,
            dec_base_layers: 1,
            dec_head_layers: 2,
            backbone: BackboneKind::Toy { widths: [4, 4, 4, 4] },
            ..Default::default()
        },
        train: TrainConfig::default(),
    }
    .validate()
    .unwrap()
}

/// Small model used by the architecture probes.
pub fn probe_config(edit: impl FnOnce(&mut ModelConfig)) -> ValidConfig {
    let mut model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        dropout: 0.0,
        n_queries: 5,
        n_obj_classes: 4,
        n_action_classes: 3,
        enc_base_layers: 1,
        enc_head_layers: 1,
        dec_base_layers: 2,
        dec_head_layers: 3,
        backbone: BackboneKind::Toy { widths: [4, 8, 8, 16] },
        ..Default::default()
    };
    edit(&mut model);
    Config { model, train: TrainConfig::default() }.validate().unwrap()
}

pub fn synthetic(n_images: usize, n_obj_classes: usize, n_actions: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec { n_images, image_size: 128, n_obj_classes, n_actions, seed, ..Default::default() };
    generate_synthetic(&spec).unwrap().into_dataset().unwrap()
}

fn batch_of(data: &Dataset) -> ImageBatch {
    let imgs: Vec<_> = data.samples.iter().map(|s| &s.image).collect();
    ImageBatch::from_rgb(&imgs)
}

fn targets_of(data: &Dataset) -> Vec<TargetSet> {
    data.samples.iter().map(|s| s.targets.clone()).collect()
}

/// Loss value plus a signature of every discrete choice made on the way:
/// piecewise-linear branches and the matching of each supervised set.
fn loss_of(model: &HoiModel, batch: &ImageBatch, targets: &[TargetSet], opts: &LossOptions) -> (f64, (u64, String)) {
    let mut g = Graph::new();
    let out = model.forward(&mut g, batch, &mut Ctx::eval()).unwrap();
    let sets: Vec<&[_]> = out.images.iter().map(|im| im.triplet_sets.as_slice()).collect();
    let (_, report, plan) = total_loss(&mut g, &sets, targets, opts);
    (report.total, (g.branch_signature(), format!("{plan:?}")))
}

/// Largest relative error between analytic gradients and central
/// differences, over every trainable parameter entry.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero gradients from turning rounding noise into large ratios.
/// A central difference whose two sides take different ReLU/max/min
/// branches or a different matching straddles a kink and says nothing about
/// the derivative; the step is then shrunk tenfold (down to
/// `GRADCHECK_MIN_EPS`). Entries still straddling are counted in
/// `straddled` and left out of the maximum.
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub entries: usize,
    pub shrunk: usize,
    pub straddled: usize,
}

pub const GRADCHECK_EPS: f64 = 1e-6;
pub const GRADCHECK_MIN_EPS: f64 = 1e-8;
pub const GRADCHECK_FLOOR: f64 = 1e-3;

pub fn gradcheck(seed: u64) -> GradcheckReport {
    let cfg = gradcheck_config();
    let data = synthetic(2, 3, 2, seed);
    let batch = batch_of(&data);
    let targets = targets_of(&data);
    let opts = LossOptions::from(&*cfg.train);
    let mut model = HoiModel::new(cfg.model.clone(), seed);

    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch, &mut Ctx::eval()).unwrap();
    let sets: Vec<&[_]> = out.images.iter().map(|im| im.triplet_sets.as_slice()).collect();
    let (loss, _, _) = total_loss(&mut g, &sets, &targets, &opts);
    let grads = g.backward(loss);

    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut report = GradcheckReport { max_rel_err: 0.0, worst: String::new(), entries: 0, shrunk: 0, straddled: 0 };
    for id in ids {
        let (rows, cols) = model.store.value(id).dim();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros((rows, cols)));
        for r in 0..rows {
            for c in 0..cols {
                let orig = model.store.value(id)[[r, c]];
                let mut eps = GRADCHECK_EPS;
                let numeric = loop {
                    model.store.value_mut(id)[[r, c]] = orig + eps;
                    let (up, sig_up) = loss_of(&model, &batch, &targets, &opts);
                    model.store.value_mut(id)[[r, c]] = orig - eps;
                    let (down, sig_down) = loss_of(&model, &batch, &targets, &opts);
                    model.store.value_mut(id)[[r, c]] = orig;
                    if sig_up == sig_down {
                        break Some((up - down) / (2.0 * eps));
                    }
                    if eps / 10.0 < GRADCHECK_MIN_EPS * 0.5 {
                        break None;
                    }
                    eps /= 10.0;
                };
                report.entries += 1;
                if eps < GRADCHECK_EPS {
                    report.shrunk += 1;
                }
                let Some(numeric) = numeric else {
                    report.straddled += 1;
                    continue;
                };
                let a = analytic[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = format!("{}[{r},{c}] analytic {a:e} numeric {numeric:e}", model.store.get(id).name);
                }
            }
        }
    }
    report
}

/// Minimum total over every injection of the smaller side into the larger.
pub fn brute_force_min(cost: &Array2<f64>) -> f64 {
    let (n, m) = cost.dim();
    let flip = n > m;
    let (small, large) = if flip { (m, n) } else { (n, m) };
    let at = |s: usize, l: usize| if flip { cost[[l, s]] } else { cost[[s, l]] };
    fn rec(s: usize, small: usize, used: &mut [bool], acc: f64, best: &mut f64, at: &dyn Fn(usize, usize) -> f64) {
        if s == small {
            *best = best.min(acc);
            return;
        }
        for l in 0..used.len() {
            if !used[l] {
                used[l] = true;
                rec(s + 1, small, used, acc + at(s, l), best, at);
                used[l] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, small, &mut vec![false; large], 0.0, &mut best, &at);
    best
}

/// Random cost matrices with dyadic entries, so every sum is exact and the
/// comparison can be exact too. Half of the trials use a coarse grid to
/// force ties.
pub fn hungarian_oracle(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let n = rng.random_range(1..=7);
        let m = rng.random_range(1..=7);
        let levels = if t % 2 == 0 { 4 } else { 1 << 20 };
        let cost = Array2::from_shape_fn((n, m), |_| rng.random_range(0..levels) as f64 / levels as f64 * 8.0 - 2.0);
        let a = hungarian(&cost);
        if a.len() != n.min(m) {
            return Err(format!("trial {t}: {} pairs for {n}x{m}", a.len()));
        }
        let mut rows: Vec<usize> = a.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = a.iter().map(|p| p.1).collect();
        rows.sort();
        rows.dedup();
        cols.sort();
        cols.dedup();
        if rows.len() != a.len() || cols.len() != a.len() {
            return Err(format!("trial {t}: assignment is not injective"));
        }
        let got = assignment_cost(&cost, &a);
        let want = brute_force_min(&cost);
        if got != want {
            return Err(format!("trial {t} ({n}x{m}): hungarian {got} vs exhaustive {want}"));
        }
    }
    Ok(format!("{trials} random matrices up to 7x7 match exhaustive search exactly"))
}

/// AP written as the sum over true positives of the best precision at any
/// rank reached at or after that true positive, divided by the GT count.
fn oracle_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::new();
    let mut hits = 0;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
    }
    let mut sum = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            sum += precision[k..].iter().fold(0.0f64, |a, &b| a.max(b));
        }
    }
    sum / n_gt as f64
}

/// Independent evaluator: per category, detections by descending score;
/// each claims the unclaimed ground truth of its image with the largest
/// pair overlap above one half.
pub fn oracle_map(
    dets: &[ImageDetection],
    gts: &[GtTriplet],
    train: &BTreeMap<Category, usize>,
    rare_threshold: usize,
    ignore: &[bool],
) -> (f64, Option<f64>, Option<f64>) {
    let mut cats: Vec<Category> = gts.iter().map(|g| (g.object_class, g.action)).collect();
    cats.sort();
    cats.dedup();
    let mut full = Vec::new();
    let mut rare = Vec::new();
    let mut non_rare = Vec::new();
    for cat in cats {
        let mut pool: Vec<&GtTriplet> = Vec::new();
        for g in gts.iter().filter(|g| (g.object_class, g.action) == cat) {
            if !pool.iter().any(|p| *p == g) {
                pool.push(g);
            }
        }
        let mut claimed = vec![false; pool.len()];
        let mut mine: Vec<&ImageDetection> =
            dets.iter().filter(|d| (d.detection.object_class, d.detection.action) == cat).collect();
        mine.sort_by(|a, b| b.detection.score.partial_cmp(&a.detection.score).unwrap());
        let mut tp = Vec::new();
        for d in mine {
            let mut pick: Option<(usize, f64)> = None;
            for (i, gt) in pool.iter().enumerate() {
                if claimed[i] || gt.image_id != d.image_id {
                    continue;
                }
                let h = iou(d.detection.human_box, gt.human_box);
                let ov = match gt.object_box {
                    Some(o) if !ignore[cat.1] => h.min(iou(d.detection.object_box, o)),
                    _ => h,
                };
                if ov > 0.5 && pick.map_or(true, |(_, b)| ov > b) {
                    pick = Some((i, ov));
                }
            }
            if let Some((i, _)) = pick {
                claimed[i] = true;
            }
            tp.push(pick.is_some());
        }
        let ap = oracle_ap(&tp, pool.len());
        full.push(ap);
        if train.get(&cat).copied().unwrap_or(0) < rare_threshold {
            rare.push(ap);
        } else {
            non_rare.push(ap);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (mean(&full).unwrap_or(0.0), mean(&rare), mean(&non_rare))
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x = rng.random_range(0.0..60.0);
    let y = rng.random_range(0.0..60.0);
    [x, y, x + rng.random_range(5.0..40.0), y + rng.random_range(5.0..40.0)]
}

fn jitter(rng: &mut ChaCha8Rng, b: [f64; 4], amount: f64) -> [f64; 4] {
    let mut out = b.map(|v| v + rng.random_range(-amount..amount));
    out[2] = out[2].max(out[0] + 1.0);
    out[3] = out[3].max(out[1] + 1.0);
    out
}

/// Random tiny evaluation problem: a few images, two object classes and two
/// actions, detections near (or far from) the ground truth.
pub fn random_eval_case(rng: &mut ChaCha8Rng) -> (Vec<ImageDetection>, Vec<GtTriplet>, BTreeMap<Category, usize>, Vec<bool>) {
    let n_images = rng.random_range(1..=3u64);
    let mut gts = Vec::new();
    for image_id in 0..n_images {
        for _ in 0..rng.random_range(0..=4) {
            gts.push(GtTriplet {
                image_id,
                human_box: random_box(rng),
                object_box: if rng.random_bool(0.1) { None } else { Some(random_box(rng)) },
                object_class: rng.random_range(0..2),
                action: rng.random_range(0..2),
            });
        }
        if rng.random_bool(0.2) && !gts.is_empty() {
            let dup = gts[rng.random_range(0..gts.len())].clone();
            gts.push(dup);
        }
    }
    let mut dets = Vec::new();
    for _ in 0..rng.random_range(0..=10) {
        let det = if !gts.is_empty() && rng.random_bool(0.7) {
            let g = &gts[rng.random_range(0..gts.len())];
            let amount = rng.random_range(0.1..12.0);
            let object = g.object_box.unwrap_or_else(|| random_box(rng));
            ImageDetection {
                image_id: g.image_id,
                detection: Detection {
                    human_box: jitter(rng, g.human_box, amount),
                    object_box: jitter(rng, object, amount),
                    object_class: if rng.random_bool(0.85) { g.object_class } else { rng.random_range(0..2) },
                    action: if rng.random_bool(0.85) { g.action } else { rng.random_range(0..2) },
                    score: rng.random_range(0.0..1.0),
                },
            }
        } else {
            ImageDetection {
                image_id: rng.random_range(0..n_images),
                detection: Detection {
                    human_box: random_box(rng),
                    object_box: random_box(rng),
                    object_class: rng.random_range(0..2),
                    action: rng.random_range(0..2),
                    score: rng.random_range(0.0..1.0),
                },
            }
        };
        dets.push(det);
    }
    let mut train = BTreeMap::new();
    for c in 0..2 {
        for a in 0..2 {
            train.insert((c, a), rng.random_range(0..20));
        }
    }
    let ignore = vec![rng.random_bool(0.3), rng.random_bool(0.3)];
    (dets, gts, train, ignore)
}

pub fn evaluator_oracle(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => close(a, b),
        (None, None) => true,
        _ => false,
    };
    for t in 0..trials {
        let (dets, gts, train, ignore) = random_eval_case(&mut rng);
        let got = evaluate(&dets, &gts, &train, 10, &ignore);
        let want = oracle_map(&dets, &gts, &train, 10, &ignore);
        if !close(got.full, want.0) || !close_opt(got.rare, want.1) || !close_opt(got.non_rare, want.2) {
            return Err(format!(
                "trial {t}: engine ({}, {:?}, {:?}) vs oracle {want:?}",
                got.full, got.rare, got.non_rare
            ));
        }
    }
    // Hand-traced rankings for a single ground truth per category.
    let b = [0.0, 0.0, 10.0, 10.0];
    let far = [50.0, 50.0, 60.0, 60.0];
    let gt = |img| GtTriplet { image_id: img, human_box: b, object_box: Some(b), object_class: 0, action: 0 };
    let det = |img, boxes: [f64; 4], score| ImageDetection {
        image_id: img,
        detection: Detection { human_box: boxes, object_box: boxes, object_class: 0, action: 0, score },
    };
    let train = BTreeMap::new();
    let cases = [
        (vec![det(0, b, 0.9)], vec![gt(0)], 1.0),
        (vec![det(0, far, 0.9), det(0, b, 0.8)], vec![gt(0)], 0.5),
        (vec![det(0, b, 0.9), det(0, far, 0.8), det(1, b, 0.7)], vec![gt(0), gt(1)], 5.0 / 6.0),
    ];
    // 1 and 1/2 are bit-exact; 5/6 has no exact binary form and may land
    // one rounding step from the literal.
    for (dets, gts, want) in cases {
        let got = evaluate(&dets, &gts, &train, 10, &[false]).full;
        if (got - want).abs() > f64::EPSILON || (want != 5.0 / 6.0 && got != want) {
            return Err(format!("hand case: got {got}, want {want}"));
        }
    }
    Ok(format!("{trials} random sets agree to 1e-9; hand cases 1, 1/2 bit-exact, 5/6 within one ulp"))
}

/// Forward pass in eval mode; returns every head's prediction set and the
/// graph values needed by the probes.
pub struct Probe {
    pub sets: Vec<PredictionSet>,
    pub final_set: PredictionSet,
    pub fused: Vec<Array2<f64>>,
    pub interaction: Vec<Array2<f64>>,
    pub encoded: [Array2<f64>; 3],
    pub attention_rows: Vec<Array2<f64>>,
}

pub fn probe(model: &HoiModel, data: &Dataset) -> Probe {
    let batch = batch_of(&data.truncated(1));
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch, &mut Ctx::eval()).unwrap();
    let im = &out.images[0];
    let enc = out.encoded.images[0];
    let mut attention_rows = Vec::new();
    for v in [im.attention.instance, im.attention.interaction] {
        attention_rows.extend(g.attention_probs(v).unwrap().iter().cloned());
    }
    Probe {
        sets: im.prediction_sets(&g),
        final_set: im.final_set().values(&g),
        fused: im.trace.fused.iter().map(|v| g.value(*v).clone()).collect(),
        interaction: im.trace.interaction.iter().map(|v| g.value(*v).clone()).collect(),
        encoded: [g.value(enc.hoi).clone(), g.value(enc.instance).clone(), g.value(enc.interaction).clone()],
        attention_rows,
    }
}

/// Adds a deterministic offset to every parameter whose name starts with
/// `prefix`. Returns how many arrays were touched.
pub fn perturb(model: &mut HoiModel, prefix: &str, amount: f64) -> usize {
    let ids: Vec<_> = model.store.ids_with_prefix(prefix).collect();
    for &id in &ids {
        let v = model.store.value_mut(id);
        let mut k = 0.0f64;
        v.mapv_inplace(|x| {
            k += 1.0;
            x + amount * (0.37 * k).sin()
        });
    }
    ids.len()
}

fn same(a: &Option<Array2<f64>>, b: &Option<Array2<f64>>) -> bool {
    a == b
}

/// Zeroed fusion weights reduce the block to `1.5 · γ_a`.
pub fn fusion_closed_form() -> Check {
    let data = synthetic(1, 4, 3, 11);
    let mut model = HoiModel::new(probe_config(|_| {}).model, 5);
    for id in model.store.ids_with_prefix("decoder.fusion.").collect::<Vec<_>>() {
        model.store.value_mut(id).fill(0.0);
    }
    let p = probe(&model, &data);
    if p.fused.len() != 2 {
        return Err(format!("expected 2 fusion outputs for 3 task layers, got {}", p.fused.len()));
    }
    for (i, (f, a)) in p.fused.iter().zip(&p.interaction).enumerate() {
        let err = (f - &(a * 1.5)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if err > 1e-12 {
            return Err(format!("layer {i}: fused differs from 1.5·γ_a by {err:e}"));
        }
    }
    Ok("zero-weight fusion equals 1.5·γ_a (max err ≤ 1e-12)".into())
}

/// The final interaction output does not depend on the final instance layer,
/// while earlier instance layers reach it through fusion.
pub fn last_layer_unfused() -> Check {
    let data = synthetic(1, 4, 3, 12);
    let cfg = probe_config(|_| {});
    let base = HoiModel::new(cfg.model.clone(), 6);
    let reference = probe(&base, &data).final_set;

    let mut m = base.clone();
    perturb(&mut m, "decoder.instance.layers.2.", 0.5);
    let p = probe(&m, &data).final_set;
    if !same(&p.action_probs, &reference.action_probs) {
        return Err("final action probabilities moved with the final instance layer".into());
    }
    if same(&p.class_probs, &reference.class_probs) {
        return Err("perturbation did not reach the instance predictions".into());
    }
    let mut m = base.clone();
    perturb(&mut m, "decoder.instance.layers.1.", 0.5);
    if same(&probe(&m, &data).final_set.action_probs, &reference.action_probs) {
        return Err("a non-final instance layer does not reach the interaction stream".into());
    }
    Ok("final interaction predictions invariant to the final instance layer".into())
}

/// With a shared encoder head the three head representations coincide.
pub fn shared_encoder_heads() -> Check {
    let data = synthetic(1, 4, 3, 13);
    let m = HoiModel::new(probe_config(|c| c.encoder_disentangled = false).model, 7);
    let p = probe(&m, &data);
    if p.encoded[0] != p.encoded[1] || p.encoded[0] != p.encoded[2] {
        return Err("shared encoder head produced different representations".into());
    }
    let m = HoiModel::new(probe_config(|_| {}).model, 7);
    let p = probe(&m, &data);
    if p.encoded[0] == p.encoded[1] || p.encoded[1] == p.encoded[2] {
        return Err("disentangled encoder heads coincide".into());
    }
    Ok("encoder_disentangled=false gives identical head representations".into())
}

fn changed_sets(before: &Probe, after: &Probe, field: fn(&PredictionSet) -> &Option<Array2<f64>>) -> Vec<(DecoderTag, usize)> {
    before
        .sets
        .iter()
        .zip(&after.sets)
        .filter(|(a, b)| field(a).is_some() && !same(field(a), field(b)))
        .map(|(a, _)| (a.tag, a.layer))
        .collect()
}

/// Heads are shared by every layer of one decoder and distinct across
/// decoders.
pub fn head_sharing() -> Check {
    let data = synthetic(1, 4, 3, 14);
    let base = HoiModel::new(probe_config(|_| {}).model, 8);
    let reference = probe(&base, &data);
    let count = |tag| reference.sets.iter().filter(|s| s.tag == tag).count();
    let (nb, ni, na) = (count(DecoderTag::Base), count(DecoderTag::Instance), count(DecoderTag::Interaction));
    if (nb, ni, na) != (2, 3, 3) {
        return Err(format!("prediction sets per decoder: {nb}/{ni}/{na}, want 2/3/3"));
    }
    fn class(s: &PredictionSet) -> &Option<Array2<f64>> {
        &s.class_probs
    }
    fn action(s: &PredictionSet) -> &Option<Array2<f64>> {
        &s.action_probs
    }
    fn boxes(s: &PredictionSet) -> &Option<Array2<f64>> {
        &s.human_boxes
    }
    let probes: [(&str, fn(&PredictionSet) -> &Option<Array2<f64>>, DecoderTag, usize); 4] = [
        ("heads.instance.class.", class, DecoderTag::Instance, ni),
        ("heads.instance.human_box.", boxes, DecoderTag::Instance, ni),
        ("heads.interaction.action.", action, DecoderTag::Interaction, na),
        ("heads.base.class.", class, DecoderTag::Base, nb),
    ];
    for (prefix, field, tag, n) in probes {
        let mut m = base.clone();
        if perturb(&mut m, prefix, 0.3) == 0 {
            return Err(format!("no parameters under {prefix}"));
        }
        let after = probe(&m, &data);
        let moved = changed_sets(&reference, &after, field);
        if moved.len() != n || moved.iter().any(|(t, _)| *t != tag) {
            return Err(format!("perturbing {prefix} moved {moved:?}, want all {n} {tag:?} layers only"));
        }
    }
    // Head parameters do not scale with depth.
    let deeper = HoiModel::new(probe_config(|c| c.dec_head_layers = 5).model, 8);
    for prefix in ["heads.instance.", "heads.interaction.", "heads.base."] {
        let a = base.store.ids_with_prefix(prefix).count();
        let b = deeper.store.ids_with_prefix(prefix).count();
        if a != b {
            return Err(format!("{prefix} has {a} arrays at depth 3 and {b} at depth 5"));
        }
    }
    Ok("heads shared across layers within a decoder, distinct across decoders".into())
}

pub fn softmax_rows() -> Check {
    let data = synthetic(1, 4, 3, 15);
    let mut worst = 0.0f64;
    for cfg in [
        probe_config(|_| {}),
        probe_config(|c| c.decoder_disentangled = false),
        probe_config(|c| c.association_mode = hoi_core::config::AssociationMode::QueryDecomposition),
    ] {
        let m = HoiModel::new(cfg.model.clone(), 9);
        let p = probe(&m, &data);
        for s in &p.sets {
            if let Some(c) = &s.class_probs {
                for r in c.rows() {
                    worst = worst.max((r.sum() - 1.0).abs());
                }
            }
        }
        for a in &p.attention_rows {
            for r in a.rows() {
                worst = worst.max((r.sum() - 1.0).abs());
            }
        }
    }
    if worst < 1e-6 {
        Ok(format!("class and attention rows sum to 1 (max dev {worst:e})"))
    } else {
        Err(format!("row sum deviates by {worst:e}"))
    }
}

pub fn all_architecture_probes() -> Vec<(&'static str, Check)> {
    vec![
        ("fusion closed form", fusion_closed_form()),
        ("no fusion at final layer", last_layer_unfused()),
        ("shared encoder heads", shared_encoder_heads()),
        ("head sharing", head_sharing()),
        ("softmax rows", softmax_rows()),
    ]
}

pub const R50_TOTAL_TARGET: f64 = 57.31e6;
/// Total minus the standard 25.56M residual-50 backbone.
pub const TRANSFORMER_TARGET: f64 = 57.31e6 - 25.56e6;

pub fn parameter_counts() -> Check {
    let toy = Config::default().validate().unwrap();
    let t = HoiModel::new(toy.model.clone(), 0).transformer_parameter_count() as f64;
    let mut r50 = Config::default();
    r50.model.backbone = BackboneKind::Resnet50;
    let total = HoiModel::new(r50.validate().unwrap().model.clone(), 0).parameter_count(None) as f64;
    let rel_t = (t - TRANSFORMER_TARGET).abs() / TRANSFORMER_TARGET;
    let rel_total = (total - R50_TOTAL_TARGET).abs() / R50_TOTAL_TARGET;
    let msg = format!(
        "R50 total {:.2}M ({:+.1}% vs 57.31M), transformer+heads {:.2}M ({:+.1}% vs 31.75M)",
        total / 1e6,
        100.0 * (total - R50_TOTAL_TARGET) / R50_TOTAL_TARGET,
        t / 1e6,
        100.0 * (t - TRANSFORMER_TARGET) / TRANSFORMER_TARGET
    );
    if rel_total <= 0.05 && rel_t <= 0.10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Same-seed first epochs agree to 1e-12, checkpoints survive a file round
/// trip bit for bit (bytes and forward pass), and the restored trainer
/// continues on the same trajectory.
pub fn determinism_and_persistence(n_images: usize) -> Check {
    use hoi_core::checkpoint::Checkpoint;
    use hoi_core::trainer::Trainer;

    let cfg = probe_config(|c| c.dropout = 0.1);
    let data = synthetic(n_images, 4, 3, 31);
    let mut a = Trainer::new(cfg.clone());
    let mut b = Trainer::new(cfg.clone());
    let ea = a.train_epoch(&data).map_err(|e| e.to_string())?;
    let eb = b.train_epoch(&data).map_err(|e| e.to_string())?;
    let gap = (ea.loss - eb.loss).abs();
    if gap > 1e-12 {
        return Err(format!("same-seed epoch-0 losses differ by {gap:e}"));
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ck.bin");
    let ck = a.checkpoint();
    ck.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    if loaded.to_bytes() != ck.to_bytes() {
        return Err("checkpoint bytes changed across save/load".into());
    }
    let restored = loaded.restore_model().map_err(|e| e.to_string())?;
    let before = probe(&a.model, &data);
    let after = probe(&restored, &data);
    if before.sets != after.sets {
        return Err("restored model's forward pass differs".into());
    }

    let mut resumed = Trainer::resume(&loaded).map_err(|e| e.to_string())?;
    let cont = a.train_epoch(&data).map_err(|e| e.to_string())?;
    let again = resumed.train_epoch(&data).map_err(|e| e.to_string())?;
    if cont.loss.to_bits() != again.loss.to_bits() {
        return Err(format!("resumed epoch loss {} vs unbroken {}", again.loss, cont.loss));
    }

    let json = serde_json::to_string(&data.annotations).map_err(|e| e.to_string())?;
    let back: hoi_core::data::AnnotationFile = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    if back != data.annotations {
        return Err("annotation JSON round trip is lossy".into());
    }
    Ok(format!("epoch-0 gap {gap:e}; checkpoint bytes and forward bit-identical; resume matches; JSON lossless"))
}
