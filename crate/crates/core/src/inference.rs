//! Turning final predictions into scored triplet detections.

use hoi_tensor::nn::Ctx;
use hoi_tensor::Graph;
use serde::{Deserialize, Serialize};

use crate::boxes::{cxcywh_to_xyxy, row};
use crate::data::Sample;
use crate::decoder::PredictionSet;
use crate::evaluation::ImageDetection;
use crate::featurizer::{FeaturizerError, ImageBatch};
use crate::model::HoiModel;

/// One ranked `<human, action, object>` detection. Boxes are pixel corners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    pub object_class: usize,
    pub action: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessOptions {
    pub score_threshold: f64,
    /// Take the class argmax over all classes including background and drop
    /// queries whose argmax is background.
    pub background_argmax: bool,
}

impl Default for PostprocessOptions {
    fn default() -> Self {
        PostprocessOptions { score_threshold: 0.0, background_argmax: false }
    }
}

fn to_pixels(b: [f64; 4], width: f64, height: f64) -> [f64; 4] {
    let c = cxcywh_to_xyxy(b);
    [c[0] * width, c[1] * height, c[2] * width, c[3] * height]
}

/// One detection per (query, action) scored `max_k c_k · a_j`, filtered by
/// threshold and sorted by descending score (ties by query, then action).
pub fn postprocess(pred: &PredictionSet, width: u32, height: u32, opts: &PostprocessOptions) -> Vec<Detection> {
    let hb = pred.human_boxes.as_ref().expect("human boxes");
    let ob = pred.object_boxes.as_ref().expect("object boxes");
    let cp = pred.class_probs.as_ref().expect("class probabilities");
    let ap = pred.action_probs.as_ref().expect("action probabilities");
    let n_fg = cp.ncols() - 1;
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for q in 0..cp.nrows() {
        let upto = if opts.background_argmax { n_fg + 1 } else { n_fg };
        let mut best = 0;
        for k in 1..upto {
            if cp[[q, k]] > cp[[q, best]] {
                best = k;
            }
        }
        if best == n_fg {
            continue;
        }
        let obj_score = cp[[q, best]];
        let human_box = to_pixels(row(hb, q), w, h);
        let object_box = to_pixels(row(ob, q), w, h);
        for j in 0..ap.ncols() {
            let score = obj_score * ap[[q, j]];
            if score >= opts.score_threshold {
                out.push(Detection { human_box, object_box, object_class: best, action: j, score });
            }
        }
    }
    // Stable sort keeps query/action order among equal scores.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Final prediction sets for a list of images, in evaluation mode.
pub fn predict(model: &HoiModel, samples: &[&Sample], batch_size: usize) -> Result<Vec<PredictionSet>, FeaturizerError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let imgs: Vec<&image::RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let batch = ImageBatch::from_rgb(&imgs);
        let mut g = Graph::new();
        let output = model.forward(&mut g, &batch, &mut Ctx::eval())?;
        out.extend(output.images.iter().map(|im| im.final_set().values(&g)));
    }
    Ok(out)
}

/// Runs the model over `samples` and post-processes every image.
pub fn detect(
    model: &HoiModel,
    samples: &[&Sample],
    batch_size: usize,
    opts: &PostprocessOptions,
) -> Result<Vec<ImageDetection>, FeaturizerError> {
    let preds = predict(model, samples, batch_size)?;
    let mut out = Vec::new();
    for (s, p) in samples.iter().zip(preds) {
        for detection in postprocess(&p, s.image.width(), s.image.height(), opts) {
            out.push(ImageDetection { image_id: s.image_id, detection });
        }
    }
    Ok(out)
}
