//! Backbone features and the fixed 2-D sinusoidal positional embedding.

use hoi_tensor::nn::{Conv2d, Ctx};
use hoi_tensor::{Graph, ParamGroup, ParamId, ParamStore, Var, Window};
use ndarray::{Array2, Array3, Array4};
use rand::Rng;

use crate::config::{BackboneKind, ModelConfig};

#[derive(Debug, thiserror::Error)]
pub enum FeaturizerError {
    #[error("image {height}x{width} is smaller than the backbone stride {stride}")]
    TooSmall { height: usize, width: usize, stride: usize },
    #[error("positional embedding width {0} is not divisible by 4")]
    EmbedWidth(usize),
    #[error("invalid image batch: {0}")]
    Batch(String),
}

/// Per-channel normalization applied to 8-bit RGB input.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Normalized pixels plus a padding mask (`true` = padded).
#[derive(Clone, Debug)]
pub struct ImageBatch {
    /// `B × C × H × W`
    pub pixels: Array4<f64>,
    /// `B × H × W`
    pub pad_mask: Array3<bool>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>, pad_mask: Array3<bool>) -> Result<Self, FeaturizerError> {
        let (b, _, h, w) = pixels.dim();
        if pad_mask.dim() != (b, h, w) {
            return Err(FeaturizerError::Batch(format!(
                "mask shape {:?} does not match pixels {:?}",
                pad_mask.dim(),
                pixels.dim()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(FeaturizerError::Batch("non-finite pixel value".into()));
        }
        Ok(ImageBatch { pixels, pad_mask })
    }

    /// Normalizes and pads RGB images to a common size (bottom/right padding).
    pub fn from_rgb(images: &[&image::RgbImage]) -> Self {
        let h = images.iter().map(|i| i.height() as usize).max().unwrap_or(0);
        let w = images.iter().map(|i| i.width() as usize).max().unwrap_or(0);
        let mut pixels = Array4::zeros((images.len(), 3, h, w));
        let mut pad_mask = Array3::from_elem((images.len(), h, w), true);
        for (b, img) in images.iter().enumerate() {
            for (x, y, p) in img.enumerate_pixels() {
                let (x, y) = (x as usize, y as usize);
                pad_mask[[b, y, x]] = false;
                for c in 0..3 {
                    pixels[[b, c, y, x]] = (p.0[c] as f64 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
                }
            }
        }
        ImageBatch { pixels, pad_mask }
    }

    pub fn len(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().3
    }

    /// Image `b` as an `(H·W) × C` matrix.
    pub fn image_matrix(&self, b: usize) -> Array2<f64> {
        let (_, c, h, w) = self.pixels.dim();
        Array2::from_shape_fn((h * w, c), |(p, ch)| self.pixels[[b, ch, p / w, p % w]])
    }

    /// Downsamples the padding mask of image `b` to `h × w` by nearest lookup.
    pub fn feature_mask(&self, b: usize, h: usize, w: usize) -> Vec<bool> {
        let (ih, iw) = (self.height(), self.width());
        (0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                self.pad_mask[[b, y * ih / h, x * iw / w]]
            })
            .collect()
    }
}

/// Flattened backbone output for a batch.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    /// One `HW × D` node per image.
    pub features: Vec<Var>,
    pub height: usize,
    pub width: usize,
    /// `true` marks padded feature cells, per image.
    pub flat_mask: Vec<Vec<bool>>,
}

/// Fixed 2-D sine/cosine embedding: the first `D/2` channels encode the row,
/// the rest the column, each interleaving `sin` (even) and `cos` (odd).
pub fn positional_embedding(height: usize, width: usize, d: usize) -> Result<Array2<f64>, FeaturizerError> {
    if d % 4 != 0 || d == 0 {
        return Err(FeaturizerError::EmbedWidth(d));
    }
    let half = d / 2;
    let scale = 2.0 * std::f64::consts::PI;
    let mut out = Array2::zeros((height * width, d));
    for y in 0..height {
        for x in 0..width {
            let row = y * width + x;
            let coords = [y as f64 / height as f64 * scale, x as f64 / width as f64 * scale];
            for (axis, &pos) in coords.iter().enumerate() {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
                    out[[row, axis * half + 2 * i]] = (pos / freq).sin();
                    out[[row, axis * half + 2 * i + 1]] = (pos / freq).cos();
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct ToyBackbone {
    blocks: Vec<Conv2d>,
}

impl ToyBackbone {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, widths: [usize; 4], rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            let (k, s, p) = if i == 0 { (4, 4, 0) } else { (3, 2, 1) };
            blocks.push(Conv2d::new(
                store,
                &format!("backbone.blocks.{i}"),
                cin,
                cout,
                k,
                s,
                p,
                true,
                ParamGroup::Backbone,
                rng,
            ));
            cin = cout;
        }
        ToyBackbone { blocks }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let (mut x, mut h, mut w) = (x, h, w);
        for block in &self.blocks {
            let (y, nh, nw) = block.forward(g, store, x, h, w);
            x = g.relu(y);
            h = nh;
            w = nw;
        }
        (x, h, w)
    }
}

/// Batch norm with frozen statistics, folded into a per-channel affine map.
#[derive(Clone, Debug)]
struct FrozenBatchNorm {
    scale: ParamId,
    shift: ParamId,
}

impl FrozenBatchNorm {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        FrozenBatchNorm {
            scale: store.add_buffer(format!("{name}.scale"), Array2::ones((1, channels)), ParamGroup::Backbone),
            shift: store.add_buffer(format!("{name}.shift"), Array2::zeros((1, channels)), ParamGroup::Backbone),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let scale = g.param(store, self.scale);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(x, scale);
        g.add_row(y, shift)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Bottleneck {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        width: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let cout = width * 4;
        let conv = |store: &mut ParamStore, n: &str, ci, co, k, s, p, rng: &mut R| {
            Conv2d::new(store, &format!("{name}.{n}"), ci, co, k, s, p, false, ParamGroup::Backbone, rng)
        };
        let conv1 = conv(store, "conv1", cin, width, 1, 1, 0, rng);
        let bn1 = FrozenBatchNorm::new(store, &format!("{name}.bn1"), width);
        let conv2 = conv(store, "conv2", width, width, 3, stride, 1, rng);
        let bn2 = FrozenBatchNorm::new(store, &format!("{name}.bn2"), width);
        let conv3 = conv(store, "conv3", width, cout, 1, 1, 0, rng);
        let bn3 = FrozenBatchNorm::new(store, &format!("{name}.bn3"), cout);
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                conv(store, "downsample.0", cin, cout, 1, stride, 0, rng),
                FrozenBatchNorm::new(store, &format!("{name}.downsample.1"), cout),
            )
        });
        Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, downsample }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let (y, _, _) = self.conv1.forward(g, store, x, h, w);
        let y = self.bn1.forward(g, store, y);
        let y = g.relu(y);
        let (y, oh, ow) = self.conv2.forward(g, store, y, h, w);
        let y = self.bn2.forward(g, store, y);
        let y = g.relu(y);
        let (y, _, _) = self.conv3.forward(g, store, y, oh, ow);
        let y = self.bn3.forward(g, store, y);
        let identity = match &self.downsample {
            Some((conv, bn)) => {
                let (d, _, _) = conv.forward(g, store, x, h, w);
                bn.forward(g, store, d)
            }
            None => x,
        };
        let sum = g.add(y, identity);
        (g.relu(sum), oh, ow)
    }
}

#[derive(Clone, Debug)]
struct ResNet50 {
    stem: Conv2d,
    stem_bn: FrozenBatchNorm,
    stages: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    const OUT_CHANNELS: usize = 2048;

    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) -> Self {
        let stem = Conv2d::new(store, "backbone.conv1", 3, 64, 7, 2, 3, false, ParamGroup::Backbone, rng);
        let stem_bn = FrozenBatchNorm::new(store, "backbone.bn1", 64);
        let mut stages = Vec::new();
        let mut cin = 64;
        for (i, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let stride = if b == 0 && i > 0 { 2 } else { 1 };
                stage.push(Bottleneck::new(store, &format!("backbone.layer{}.{b}", i + 1), cin, width, stride, rng));
                cin = width * 4;
            }
            stages.push(stage);
        }
        ResNet50 { stem, stem_bn, stages }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let (y, h, w) = self.stem.forward(g, store, x, h, w);
        let y = self.stem_bn.forward(g, store, y);
        let y = g.relu(y);
        let win = Window { height: h, width: w, channels: 64, kernel: 3, stride: 2, padding: 1 };
        let mut x = g.max_pool(y, win);
        let (mut h, mut w) = (win.out_height(), win.out_width());
        for stage in &self.stages {
            for block in stage {
                let (y, nh, nw) = block.forward(g, store, x, h, w);
                x = y;
                h = nh;
                w = nw;
            }
        }
        (x, h, w)
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Toy(ToyBackbone),
    Resnet50(Box<ResNet50>),
}

/// Backbone followed by the 1×1 channel reduction to `D`.
#[derive(Clone, Debug)]
pub struct Featurizer {
    backbone: Backbone,
    pub input_proj: Conv2d,
}

impl Featurizer {
    pub const STRIDE: usize = 32;

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (backbone, channels) = match &cfg.backbone {
            BackboneKind::Toy { widths } => (Backbone::Toy(ToyBackbone::new(store, *widths, rng)), widths[3]),
            BackboneKind::Resnet50 => (Backbone::Resnet50(Box::new(ResNet50::new(store, rng))), ResNet50::OUT_CHANNELS),
        };
        // The projection belongs to the transformer learning-rate group.
        let input_proj = Conv2d::new(store, "input_proj", channels, cfg.d_model, 1, 1, 0, true, ParamGroup::Transformer, rng);
        Featurizer { backbone, input_proj }
    }

    pub fn backbone_channels(&self) -> usize {
        self.input_proj.in_channels
    }

    /// Backbone features for every image of the batch, flattened to `HW × D`.
    pub fn extract_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &ImageBatch,
        _ctx: &mut Ctx,
    ) -> Result<FeatureMap, FeaturizerError> {
        let (ih, iw) = (batch.height(), batch.width());
        if ih < Self::STRIDE || iw < Self::STRIDE {
            return Err(FeaturizerError::TooSmall { height: ih, width: iw, stride: Self::STRIDE });
        }
        let mut features = Vec::with_capacity(batch.len());
        let mut flat_mask = Vec::with_capacity(batch.len());
        let (mut fh, mut fw) = (0, 0);
        for b in 0..batch.len() {
            let x = g.constant(batch.image_matrix(b));
            let (y, h, w) = match &self.backbone {
                Backbone::Toy(t) => t.forward(g, store, x, ih, iw),
                Backbone::Resnet50(r) => r.forward(g, store, x, ih, iw),
            };
            let (y, h, w) = self.input_proj.forward(g, store, y, h, w);
            features.push(y);
            flat_mask.push(batch.feature_mask(b, h, w));
            fh = h;
            fw = w;
        }
        Ok(FeatureMap { features, height: fh, width: fw, flat_mask })
    }
}
