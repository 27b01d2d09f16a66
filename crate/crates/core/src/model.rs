//! The full detector: featurizer, encoder, decoder and the parameter store.

use hoi_tensor::nn::Ctx;
use hoi_tensor::{Graph, ParamGroup, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, ValidModelConfig};
use crate::decoder::{Decoder, ImageDecoding};
use crate::encoder::{Encoder, EncoderBundle};
use crate::featurizer::{positional_embedding, Featurizer, FeaturizerError, ImageBatch};

#[derive(Clone, Debug)]
pub struct HoiModel {
    pub config: ValidModelConfig,
    pub store: ParamStore,
    pub featurizer: Featurizer,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Output of one forward pass; all nodes live in the caller's graph.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub encoded: EncoderBundle,
    pub images: Vec<ImageDecoding>,
    pub feature_height: usize,
    pub feature_width: usize,
}

impl HoiModel {
    /// Builds a model with parameters drawn from a generator seeded by `seed`.
    pub fn new(config: ValidModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let featurizer = Featurizer::new(&mut store, &config, &mut rng);
        let encoder = Encoder::new(&mut store, &config, &mut rng);
        let decoder = Decoder::new(&mut store, &config, &mut rng);
        HoiModel { config, store, featurizer, encoder, decoder }
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph, batch: &ImageBatch, ctx: &mut Ctx) -> Result<ModelOutput, FeaturizerError> {
        let fm = self.featurizer.extract_features(g, &self.store, batch, ctx)?;
        let pos = g.constant(positional_embedding(fm.height, fm.width, self.config.d_model)?);
        let encoded = self.encoder.encode(g, &self.store, &fm.features, pos, &fm.flat_mask, ctx);
        let images = self.decoder.decode(g, &self.store, &encoded, ctx);
        Ok(ModelOutput { encoded, images, feature_height: fm.height, feature_width: fm.width })
    }

    /// Trainable parameter count, optionally restricted to one group.
    pub fn parameter_count(&self, group: Option<ParamGroup>) -> usize {
        match group {
            Some(gr) => self.store.num_trainable_in(gr),
            None => self.store.num_trainable(),
        }
    }

    /// Trainable parameters outside the backbone and its input projection.
    pub fn transformer_parameter_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable && p.group == ParamGroup::Transformer && !p.name.starts_with("input_proj."))
            .map(|(_, p)| p.value.len())
            .sum()
    }
}
