//! Annotation and prediction files, triplet grouping, and the synthetic
//! scene generator.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{cxcywh_to_xyxy, iou, xyxy_to_cxcywh};
use crate::evaluation::{GtTriplet, ImageDetection};
use crate::loss::TargetSet;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{record}: {reason}")]
    Invalid { record: String, reason: String },
    #[error("unsupported schema version {0}")]
    Version(u32),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

fn invalid(record: impl Into<String>, reason: impl Into<String>) -> DataError {
    DataError::Invalid { record: record.into(), reason: reason.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file: String,
}

/// One annotated `<human, action, object>` triplet; boxes are pixel corners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTriplet {
    pub image_id: u64,
    pub human_box: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_box: Option<[f64; 4]>,
    pub object_class: usize,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub id: usize,
    pub name: String,
    /// The object box is not required for a correct detection of this action.
    #[serde(default)]
    pub ignore_object: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub schema_version: u32,
    pub images: Vec<ImageRecord>,
    pub triplets: Vec<RawTriplet>,
    pub actions: Vec<ActionRecord>,
    pub object_classes: Vec<String>,
}

fn check_box(record: &str, b: &[f64; 4], w: u32, h: u32) -> Result<(), DataError> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(invalid(record, "non-finite box coordinate"));
    }
    if b[2] < b[0] || b[3] < b[1] {
        return Err(invalid(record, format!("box {b:?} has negative extent")));
    }
    let eps = 1e-6;
    if b[0] < -eps || b[1] < -eps || b[2] > w as f64 + eps || b[3] > h as f64 + eps {
        return Err(invalid(record, format!("box {b:?} outside {w}x{h} image")));
    }
    Ok(())
}

impl AnnotationFile {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DataError::Version(self.schema_version));
        }
        let mut sizes = HashMap::new();
        for (i, im) in self.images.iter().enumerate() {
            if im.width == 0 || im.height == 0 {
                return Err(invalid(format!("images[{i}]"), "zero-sized image"));
            }
            if sizes.insert(im.id, (im.width, im.height)).is_some() {
                return Err(invalid(format!("images[{i}]"), format!("duplicate image id {}", im.id)));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.id != i {
                return Err(invalid(format!("actions[{i}]"), format!("id {} does not equal its position", a.id)));
            }
        }
        for (i, t) in self.triplets.iter().enumerate() {
            let rec = format!("triplets[{i}]");
            let Some(&(w, h)) = sizes.get(&t.image_id) else {
                return Err(invalid(rec, format!("unknown image id {}", t.image_id)));
            };
            if t.action >= self.actions.len() {
                return Err(invalid(rec, format!("action id {} out of range ({} actions)", t.action, self.actions.len())));
            }
            if t.object_class >= self.object_classes.len() {
                return Err(invalid(
                    rec,
                    format!("object class {} out of range ({} classes)", t.object_class, self.object_classes.len()),
                ));
            }
            check_box(&rec, &t.human_box, w, h)?;
            match &t.object_box {
                Some(b) => check_box(&rec, b, w, h)?,
                None if !self.actions[t.action].ignore_object => {
                    return Err(invalid(rec, "object box missing for an action that requires one"))
                }
                None => {}
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str, path: &Path) -> Result<Self, DataError> {
        let a: AnnotationFile =
            serde_json::from_str(s).map_err(|e| DataError::Json { path: path.to_path_buf(), source: e })?;
        a.validate()?;
        Ok(a)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let s = fs::read_to_string(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_json_str(&s, path)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let s = serde_json::to_string_pretty(self).map_err(|e| DataError::Json { path: path.to_path_buf(), source: e })?;
        fs::write(path, s).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn ignore_object_flags(&self) -> Vec<bool> {
        self.actions.iter().map(|a| a.ignore_object).collect()
    }

    pub fn triplets_of(&self, image_id: u64) -> Vec<&RawTriplet> {
        self.triplets.iter().filter(|t| t.image_id == image_id).collect()
    }

    pub fn gt_triplets(&self) -> Vec<GtTriplet> {
        self.triplets
            .iter()
            .map(|t| GtTriplet {
                image_id: t.image_id,
                human_box: t.human_box,
                object_box: t.object_box,
                object_class: t.object_class,
                action: t.action,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub schema_version: u32,
    pub detections: Vec<ImageDetection>,
}

impl PredictionFile {
    pub fn new(detections: Vec<ImageDetection>) -> Self {
        PredictionFile { schema_version: SCHEMA_VERSION, detections }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let s = fs::read_to_string(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        let p: PredictionFile =
            serde_json::from_str(&s).map_err(|e| DataError::Json { path: path.to_path_buf(), source: e })?;
        if p.schema_version != SCHEMA_VERSION {
            return Err(DataError::Version(p.schema_version));
        }
        for (i, d) in p.detections.iter().enumerate() {
            let s = d.detection.score;
            if !(0.0..=1.0).contains(&s) {
                return Err(invalid(format!("detections[{i}]"), format!("score {s} outside [0, 1]")));
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let s = serde_json::to_string(self).map_err(|e| DataError::Json { path: path.to_path_buf(), source: e })?;
        fs::write(path, s).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
    }
}

/// Distinct human-object pair with all of its actions. Pixel corners.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedPair {
    pub human_box: [f64; 4],
    pub object_box: Option<[f64; 4]>,
    pub object_class: usize,
    /// Sorted, without duplicates.
    pub actions: Vec<usize>,
}

/// Groups triplets sharing the same human box, object box and object class
/// (exact coordinate match), in order of first appearance.
pub fn group_triplets<'a>(triplets: impl IntoIterator<Item = &'a RawTriplet>) -> Vec<GroupedPair> {
    let mut index: HashMap<([u64; 4], Option<[u64; 4]>, usize), usize> = HashMap::new();
    let mut out: Vec<GroupedPair> = Vec::new();
    let bits = |b: [f64; 4]| b.map(f64::to_bits);
    for t in triplets {
        let key = (bits(t.human_box), t.object_box.map(bits), t.object_class);
        let i = *index.entry(key).or_insert_with(|| {
            out.push(GroupedPair {
                human_box: t.human_box,
                object_box: t.object_box,
                object_class: t.object_class,
                actions: Vec::new(),
            });
            out.len() - 1
        });
        if let Err(pos) = out[i].actions.binary_search(&t.action) {
            out[i].actions.insert(pos, t.action);
        }
    }
    out
}

/// Expands grouped pairs back into one triplet per action.
pub fn ungroup(image_id: u64, pairs: &[GroupedPair]) -> Vec<RawTriplet> {
    pairs
        .iter()
        .flat_map(|p| {
            p.actions.iter().map(move |&a| RawTriplet {
                image_id,
                human_box: p.human_box,
                object_box: p.object_box,
                object_class: p.object_class,
                action: a,
            })
        })
        .collect()
}

/// Pixel corners to normalized `cx, cy, w, h`.
pub fn normalize_box(b: [f64; 4], width: u32, height: u32) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    xyxy_to_cxcywh([b[0] / w, b[1] / h, b[2] / w, b[3] / h])
}

pub fn denormalize_box(b: [f64; 4], width: u32, height: u32) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    let c = cxcywh_to_xyxy(b);
    [c[0] * w, c[1] * h, c[2] * w, c[3] * h]
}

/// Training targets from grouped pairs. Pairs without an object box use the
/// human box in its place.
pub fn target_set(pairs: &[GroupedPair], n_actions: usize, width: u32, height: u32) -> TargetSet {
    let m = pairs.len();
    let mut t = TargetSet {
        human_boxes: Array2::zeros((m, 4)),
        object_boxes: Array2::zeros((m, 4)),
        classes: Vec::with_capacity(m),
        actions: Array2::zeros((m, n_actions)),
    };
    for (i, p) in pairs.iter().enumerate() {
        let hb = normalize_box(p.human_box, width, height);
        let ob = normalize_box(p.object_box.unwrap_or(p.human_box), width, height);
        for k in 0..4 {
            t.human_boxes[[i, k]] = hb[k];
            t.object_boxes[[i, k]] = ob[k];
        }
        t.classes.push(p.object_class);
        for &a in &p.actions {
            t.actions[[i, a]] = 1.0;
        }
    }
    t
}

/// An image with its grouped targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image_id: u64,
    pub image: RgbImage,
    pub targets: TargetSet,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub annotations: AnnotationFile,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Pairs annotation records with already-decoded images (same order as
    /// `annotations.images`).
    pub fn from_parts(annotations: AnnotationFile, images: Vec<RgbImage>) -> Result<Self, DataError> {
        if images.len() != annotations.images.len() {
            return Err(invalid("images", format!("{} images for {} records", images.len(), annotations.images.len())));
        }
        let mut by_image: HashMap<u64, Vec<&RawTriplet>> = HashMap::new();
        for t in &annotations.triplets {
            by_image.entry(t.image_id).or_default().push(t);
        }
        let n_actions = annotations.actions.len();
        let mut samples = Vec::with_capacity(images.len());
        for (i, (rec, img)) in annotations.images.iter().zip(images).enumerate() {
            if img.width() != rec.width || img.height() != rec.height {
                return Err(invalid(
                    format!("images[{i}]"),
                    format!("declared {}x{} but file is {}x{}", rec.width, rec.height, img.width(), img.height()),
                ));
            }
            let pairs = group_triplets(by_image.get(&rec.id).map(|v| v.as_slice()).unwrap_or(&[]).iter().copied());
            samples.push(Sample { image_id: rec.id, image: img, targets: target_set(&pairs, n_actions, rec.width, rec.height) });
        }
        Ok(Dataset { annotations, samples })
    }

    /// Loads an annotation file and the images it references (paths relative
    /// to the annotation file).
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let ann = AnnotationFile::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let images = ann
            .images
            .iter()
            .map(|r| {
                let p = dir.join(&r.file);
                image::open(&p).map(|i| i.to_rgb8()).map_err(|e| DataError::Image { path: p, source: e })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(ann, images)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_actions(&self) -> usize {
        self.annotations.actions.len()
    }

    pub fn n_obj_classes(&self) -> usize {
        self.annotations.object_classes.len()
    }

    /// Restricts the dataset to the first `n` images.
    pub fn truncated(&self, n: usize) -> Self {
        let samples: Vec<Sample> = self.samples.iter().take(n).cloned().collect();
        let keep: std::collections::HashSet<u64> = samples.iter().map(|s| s.image_id).collect();
        let mut annotations = self.annotations.clone();
        annotations.images.retain(|r| keep.contains(&r.id));
        annotations.triplets.retain(|t| keep.contains(&t.image_id));
        Dataset { annotations, samples }
    }
}

pub const SYNTHETIC_ACTIONS: [&str; 5] = ["above", "below", "left_of", "overlapping", "containing"];
const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [230, 210, 40]),
    ("magenta", [210, 50, 200]),
    ("cyan", [40, 200, 210]),
    ("orange", [240, 140, 30]),
    ("purple", [120, 50, 160]),
];
const AGENT_COLOR: [u8; 3] = [250, 250, 250];
const AGENT_BORDER: [u8; 3] = [10, 10, 10];

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub image_size: u32,
    pub n_obj_classes: usize,
    pub n_actions: usize,
    pub max_pairs: usize,
    /// Class `k` is drawn with probability proportional to `(k + 1)^(-skew)`.
    pub skew: f64,
    pub seed: u64,
    /// Identifier of the first image.
    #[serde(default)]
    pub first_id: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 100,
            image_size: 128,
            n_obj_classes: 6,
            n_actions: 5,
            max_pairs: 3,
            skew: 1.0,
            seed: 0,
            first_id: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |r: &str| Err(invalid("synthetic spec", r.to_string()));
        if self.n_actions == 0 || self.n_actions > SYNTHETIC_ACTIONS.len() {
            return bad("n_actions must be in 1..=5");
        }
        if self.n_obj_classes == 0 || self.n_obj_classes > SHAPES.len() * COLORS.len() {
            return bad("n_obj_classes must be in 1..=24");
        }
        if self.image_size < 64 {
            return bad("image_size must be at least 64");
        }
        if self.max_pairs == 0 {
            return bad("max_pairs must be positive");
        }
        if !self.skew.is_finite() || self.skew < 0.0 {
            return bad("skew must be finite and non-negative");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_obj_classes).map(|k| format!("{}_{}", COLORS[k / 3].0, SHAPES[k % 3])).collect()
    }

    pub fn class_weights(&self) -> Vec<f64> {
        (0..self.n_obj_classes).map(|k| ((k + 1) as f64).powf(-self.skew)).collect()
    }
}

/// SplitMix64 finalizer, used to derive independent per-image seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index))
}

fn center(b: [f64; 4]) -> (f64, f64) {
    ((b[0] + b[2]) * 0.5, (b[1] + b[3]) * 0.5)
}

fn contains(outer: [f64; 4], inner: [f64; 4]) -> bool {
    outer[0] <= inner[0] && outer[1] <= inner[1] && outer[2] >= inner[2] && outer[3] >= inner[3]
}

/// Spatial predicates between the agent and an object (image y grows down).
pub fn spatial_actions(agent: [f64; 4], object: [f64; 4], n_actions: usize) -> Vec<usize> {
    let (ax, ay) = center(agent);
    let (ox, oy) = center(object);
    let inside = contains(agent, object);
    let all = [
        oy < ay,
        oy > ay,
        ox < ax,
        iou(agent, object) > 0.0 && !inside && !contains(object, agent),
        inside,
    ];
    (0..n_actions).filter(|&a| all[a]).collect()
}

fn draw_shape(img: &mut RgbImage, shape: usize, b: [f64; 4], color: [u8; 3]) {
    let (x0, y0, x1, y1) = (b[0] as u32, b[1] as u32, b[2] as u32, b[3] as u32);
    let (cx, cy) = center(b);
    let (rx, ry) = ((b[2] - b[0]) * 0.5, (b[3] - b[1]) * 0.5);
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match shape {
                0 => true,
                1 => ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
                _ => {
                    // apex at the top centre
                    let t = (py - b[1]) / (b[3] - b[1]);
                    (px - cx).abs() <= t * rx
                }
            };
            if inside {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

fn draw_agent(img: &mut RgbImage, b: [f64; 4]) {
    let (x0, y0, x1, y1) = (b[0] as u32, b[1] as u32, b[2] as u32, b[3] as u32);
    for y in y0..y1 {
        for x in x0..x1 {
            let edge = x < x0 + 2 || y < y0 + 2 || x + 2 >= x1 || y + 2 >= y1;
            img.put_pixel(x, y, Rgb(if edge { AGENT_BORDER } else { AGENT_COLOR }));
        }
    }
}

/// Box with integer corners inside the image.
fn random_box<R: Rng>(rng: &mut R, size: u32, min: u32, max: u32) -> [f64; 4] {
    let w = rng.random_range(min..=max);
    let h = rng.random_range(min..=max);
    let x = rng.random_range(0..=size - w);
    let y = rng.random_range(0..=size - h);
    [x as f64, y as f64, (x + w) as f64, (y + h) as f64]
}

/// One synthetic image and its triplets.
pub fn render_synthetic_image(spec: &SyntheticSpec, index: usize) -> (RgbImage, Vec<RawTriplet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let s = spec.image_size;
    let image_id = spec.first_id + index as u64;
    let mut img = RgbImage::from_fn(s, s, |_, _| {
        let v = 90 + rng.random_range(0..40u8);
        Rgb([v, v, v])
    });
    let agent = random_box(&mut rng, s, s / 4, s * 3 / 8);
    draw_agent(&mut img, agent);
    let classes = WeightedIndex::new(spec.class_weights()).expect("positive class weights");
    let n_obj = rng.random_range(1..=spec.max_pairs);
    let mut triplets = Vec::new();
    let mut placed: Vec<[f64; 4]> = Vec::new();
    for _ in 0..n_obj {
        let class = classes.sample(&mut rng);
        // Objects that cannot be placed without piling onto others are skipped.
        let mut obj = [0.0; 4];
        let mut free = false;
        for _ in 0..20 {
            obj = if rng.random_bool(0.2) {
                let w = (agent[2] - agent[0]) as u32;
                let h = (agent[3] - agent[1]) as u32;
                let side = rng.random_range(s / 12..=(w.min(h) * 2 / 3).max(s / 12));
                let x = agent[0] as u32 + rng.random_range(0..=w.saturating_sub(side));
                let y = agent[1] as u32 + rng.random_range(0..=h.saturating_sub(side));
                [x as f64, y as f64, (x + side) as f64, (y + side) as f64]
            } else {
                random_box(&mut rng, s, s / 8, s / 4)
            };
            if placed.iter().all(|p| iou(*p, obj) < 0.3) {
                free = true;
                break;
            }
        }
        if !free {
            continue;
        }
        let actions = spatial_actions(agent, obj, spec.n_actions);
        draw_shape(&mut img, class % 3, obj, COLORS[class / 3].1);
        placed.push(obj);
        for a in actions {
            triplets.push(RawTriplet { image_id, human_box: agent, object_box: Some(obj), object_class: class, action: a });
        }
    }
    (img, triplets)
}

/// Generated images with their annotation file.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub annotations: AnnotationFile,
    pub images: Vec<RgbImage>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset, DataError> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.n_images);
    let mut records = Vec::with_capacity(spec.n_images);
    let mut triplets = Vec::new();
    for i in 0..spec.n_images {
        let (img, t) = render_synthetic_image(spec, i);
        let id = spec.first_id + i as u64;
        records.push(ImageRecord { id, width: spec.image_size, height: spec.image_size, file: format!("{id:06}.png") });
        images.push(img);
        triplets.extend(t);
    }
    let annotations = AnnotationFile {
        schema_version: SCHEMA_VERSION,
        images: records,
        triplets,
        actions: SYNTHETIC_ACTIONS[..spec.n_actions]
            .iter()
            .enumerate()
            .map(|(id, n)| ActionRecord { id, name: n.to_string(), ignore_object: false })
            .collect(),
        object_classes: spec.class_names(),
    };
    Ok(SyntheticDataset { annotations, images })
}

impl SyntheticDataset {
    pub fn into_dataset(self) -> Result<Dataset, DataError> {
        Dataset::from_parts(self.annotations, self.images)
    }

    /// Writes PNG images and `annotations.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, DataError> {
        fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
        for (rec, img) in self.annotations.images.iter().zip(&self.images) {
            let p = dir.join(&rec.file);
            img.save(&p).map_err(|e| DataError::Image { path: p, source: e })?;
        }
        let ann = dir.join("annotations.json");
        self.annotations.save(&ann)?;
        Ok(ann)
    }
}

/// Result of re-deriving synthetic action labels from box geometry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub pairs_checked: usize,
    pub mismatches: Vec<String>,
}

/// Checks that every pair's labels equal the spatial predicates of its
/// boxes and that each object is visible in the rendered image.
pub fn audit_synthetic(ds: &SyntheticDataset) -> AuditReport {
    let n_actions = ds.annotations.actions.len();
    let mut report = AuditReport::default();
    for (rec, img) in ds.annotations.images.iter().zip(&ds.images) {
        let pairs = group_triplets(ds.annotations.triplets_of(rec.id));
        for p in pairs {
            report.pairs_checked += 1;
            let ob = p.object_box.expect("synthetic pairs have objects");
            let expect = spatial_actions(p.human_box, ob, n_actions);
            if expect != p.actions {
                report.mismatches.push(format!("image {}: labels {:?}, geometry {:?}", rec.id, p.actions, expect));
            }
            let color = COLORS[p.object_class / 3].1;
            let visible = (ob[1] as u32..ob[3] as u32)
                .any(|y| (ob[0] as u32..ob[2] as u32).any(|x| img.get_pixel(x, y).0 == color));
            if !visible {
                report.mismatches.push(format!("image {}: object of class {} not rendered", rec.id, p.object_class));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(h: [f64; 4], o: [f64; 4], c: usize, a: usize) -> RawTriplet {
        RawTriplet { image_id: 0, human_box: h, object_box: Some(o), object_class: c, action: a }
    }

    #[test]
    fn grouping_examples() {
        let h = [0.0, 0.0, 10.0, 10.0];
        let o = [5.0, 5.0, 8.0, 9.0];
        let g = group_triplets(&[t(h, o, 1, 3), t(h, o, 1, 0)]);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].actions, vec![0, 3]);
        let tgt = target_set(&g, 4, 20, 20);
        assert_eq!(tgt.actions.row(0).to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(group_triplets(&[t(h, o, 1, 3), t(h, [1.0, 1.0, 2.0, 2.0], 1, 3)]).len(), 2);
        assert!(group_triplets(&[]).is_empty());
        assert_eq!(group_triplets(&[t(h, o, 1, 3), t(h, o, 1, 3)])[0].actions, vec![3]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec { n_images: 5, seed: 7, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.images, b.images);
        assert_eq!(
            serde_json::to_string(&a.annotations).unwrap(),
            serde_json::to_string(&b.annotations).unwrap()
        );
    }

    #[test]
    fn above_predicate() {
        let agent = [40.0, 40.0, 80.0, 80.0];
        let acts = spatial_actions(agent, [50.0, 10.0, 60.0, 20.0], 5);
        assert!(acts.contains(&0) && !acts.contains(&1));
        let inside = spatial_actions(agent, [50.0, 50.0, 60.0, 60.0], 5);
        assert!(inside.contains(&4) && !inside.contains(&3));
    }

    #[test]
    fn audit_passes_on_generated_data() {
        let spec = SyntheticSpec { n_images: 50, seed: 3, ..Default::default() };
        let ds = generate_synthetic(&spec).unwrap();
        let r = audit_synthetic(&ds);
        assert!(r.pairs_checked > 50);
        assert!(r.mismatches.is_empty(), "{:?}", r.mismatches);
        ds.annotations.validate().unwrap();
    }

    #[test]
    fn uniform_classes_without_skew() {
        let spec = SyntheticSpec { skew: 0.0, ..Default::default() };
        let dist = WeightedIndex::new(spec.class_weights()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0f64; 6];
        let n = 10_000;
        for _ in 0..n {
            counts[dist.sample(&mut rng)] += 1.0;
        }
        let e = n as f64 / 6.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        // 99.9th percentile of chi-square with 5 degrees of freedom
        assert!(chi2 < 20.52, "chi2 = {chi2}");
    }

    #[test]
    fn validation_names_records() {
        let spec = SyntheticSpec { n_images: 2, ..Default::default() };
        let mut ann = generate_synthetic(&spec).unwrap().annotations;
        ann.triplets[0].action = 9;
        let msg = ann.validate().unwrap_err().to_string();
        assert!(msg.contains("triplets[0]") && msg.contains("action id 9"), "{msg}");
    }

    #[test]
    fn annotation_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { n_images: 3, ..Default::default() };
        let ds = generate_synthetic(&spec).unwrap();
        let path = ds.write(dir.path()).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.annotations, ds.annotations);
        let direct = ds.clone().into_dataset().unwrap();
        for (a, b) in loaded.samples.iter().zip(&direct.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.targets, b.targets);
        }
    }

    fn corner_box() -> impl Strategy<Value = [f64; 4]> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..50.0f64, 0.5..50.0f64).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
    }

    proptest! {
        #[test]
        fn normalization_round_trips(b in corner_box()) {
            let back = denormalize_box(normalize_box(b, 100, 120), 100, 120);
            for k in 0..4 {
                prop_assert!((back[k] - b[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn grouping_is_idempotent(
            raw in proptest::collection::vec((0usize..3, 0usize..3, 0usize..2, 0usize..4), 0..12)
        ) {
            let boxes = [[0.0, 0.0, 5.0, 5.0], [1.0, 2.0, 3.0, 4.0], [2.0, 2.0, 9.0, 9.0]];
            let ts: Vec<RawTriplet> = raw.iter().map(|&(h, o, c, a)| t(boxes[h], boxes[o], c, a)).collect();
            let g = group_triplets(&ts);
            let again = group_triplets(&ungroup(0, &g));
            prop_assert_eq!(g, again);
        }
    }
}
