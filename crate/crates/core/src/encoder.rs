//! Base encoder plus the three task-specific head encoders.

use hoi_tensor::nn::{Ctx, LayerNorm, Linear, MultiHeadAttention};
use hoi_tensor::{Graph, ParamGroup, ParamStore, Var};
use rand::Rng;

use crate::config::{AssociationMode, ModelConfig};

/// Post-norm self-attention + feed-forward layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub linear1: Linear,
    pub linear2: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, t) = (cfg.d_model, ParamGroup::Transformer);
        EncoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.n_heads, t, rng),
            linear1: Linear::new(store, &format!("{name}.linear1"), d, cfg.ffn_dim, t, rng),
            linear2: Linear::new(store, &format!("{name}.linear2"), cfg.ffn_dim, d, t, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, t),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, t),
        }
    }

    /// Returns the layer output and the attention-probability node.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        pos: Var,
        mask: Option<&[bool]>,
        ctx: &mut Ctx,
    ) -> (Var, Var) {
        let qk = g.add(x, pos);
        let attn = self.self_attn.forward(g, store, qk, qk, x, mask);
        let a = ctx.dropout(g, attn.output);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, store, x);
        let h = self.linear1.forward(g, store, x);
        let h = g.relu(h);
        let h = ctx.dropout(g, h);
        let h = self.linear2.forward(g, store, h);
        let h = ctx.dropout(g, h);
        let x = g.add(x, h);
        (self.norm2.forward(g, store, x), attn.weights)
    }
}

fn run_stack(
    layers: &[EncoderLayer],
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    pos: Var,
    mask: Option<&[bool]>,
    ctx: &mut Ctx,
) -> Var {
    layers.iter().fold(x, |x, l| l.forward(g, store, x, pos, mask, ctx).0)
}

/// Encoder outputs for one image, each `HW × D`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedImage {
    pub base: Var,
    pub hoi: Var,
    pub instance: Var,
    pub interaction: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderBundle {
    pub images: Vec<EncodedImage>,
    /// Positional embedding node shared by every image.
    pub pos: Var,
    pub flat_mask: Vec<Vec<bool>>,
}

#[derive(Clone, Debug)]
enum HeadStacks {
    /// A stack is `None` when no decoder reads its output.
    Separate {
        hoi: Option<Vec<EncoderLayer>>,
        instance: Option<Vec<EncoderLayer>>,
        interaction: Option<Vec<EncoderLayer>>,
    },
    Shared(Vec<EncoderLayer>),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub base: Vec<EncoderLayer>,
    heads: HeadStacks,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let stack = |store: &mut ParamStore, prefix: &str, n: usize, rng: &mut R| {
            (0..n)
                .map(|i| EncoderLayer::new(store, &format!("{prefix}.layers.{i}"), cfg, rng))
                .collect::<Vec<_>>()
        };
        let base = stack(store, "encoder.base", cfg.enc_base_layers, rng);
        let heads = if cfg.encoder_disentangled {
            let base_decoder = !cfg.decoder_disentangled || cfg.association_mode == AssociationMode::FeatureDecomposition;
            let hoi = base_decoder.then(|| stack(store, "encoder.hoi", cfg.enc_head_layers, rng));
            let instance = cfg.decoder_disentangled.then(|| stack(store, "encoder.instance", cfg.enc_head_layers, rng));
            let interaction =
                cfg.decoder_disentangled.then(|| stack(store, "encoder.interaction", cfg.enc_head_layers, rng));
            HeadStacks::Separate { hoi, instance, interaction }
        } else {
            HeadStacks::Shared(stack(store, "encoder.shared_head", cfg.enc_head_layers, rng))
        };
        Encoder { base, heads }
    }

    /// Runs the base stack and then every head stack from the base output.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[Var],
        pos: Var,
        flat_mask: &[Vec<bool>],
        ctx: &mut Ctx,
    ) -> EncoderBundle {
        let images = features
            .iter()
            .zip(flat_mask)
            .map(|(&x, mask)| {
                let mask = Some(mask.as_slice());
                let base = run_stack(&self.base, g, store, x, pos, mask, ctx);
                match &self.heads {
                    HeadStacks::Separate { hoi, instance, interaction } => {
                        // Absent stacks pass the base output through; nothing reads it.
                        let mut run = |s: &Option<Vec<EncoderLayer>>| {
                            s.as_ref().map_or(base, |s| run_stack(s, g, store, base, pos, mask, ctx))
                        };
                        EncodedImage { base, hoi: run(hoi), instance: run(instance), interaction: run(interaction) }
                    }
                    HeadStacks::Shared(shared) => {
                        let h = run_stack(shared, g, store, base, pos, mask, ctx);
                        EncodedImage { base, hoi: h, instance: h, interaction: h }
                    }
                }
            })
            .collect();
        EncoderBundle { images, pos, flat_mask: flat_mask.to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hoi_tensor::nn::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(disentangled: bool, head_layers: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            enc_base_layers: 2,
            enc_head_layers: head_layers,
            encoder_disentangled: disentangled,
            ..Default::default()
        }
    }

    fn run(cfg: &ModelConfig) -> (Graph, ParamStore, EncoderBundle) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(normal(&mut rng, 1.0, (6, 16)));
        let pos = g.constant(crate::featurizer::positional_embedding(2, 3, 16).unwrap());
        let bundle = enc.encode(&mut g, &store, &[x], pos, &[vec![false; 6]], &mut Ctx::eval());
        (g, store, bundle)
    }

    #[test]
    fn heads_differ_when_disentangled() {
        let (g, _, b) = run(&small(true, 2));
        let im = b.images[0];
        assert_ne!(g.value(im.hoi), g.value(im.instance));
        assert_ne!(g.value(im.instance), g.value(im.interaction));
        assert_eq!(g.shape(im.base), (6, 16));
    }

    #[test]
    fn shared_heads_alias() {
        let (g, _, b) = run(&small(false, 2));
        let im = b.images[0];
        assert_eq!(g.value(im.hoi), g.value(im.instance));
        assert_eq!(g.value(im.hoi), g.value(im.interaction));
    }

    #[test]
    fn zero_head_layers_is_identity() {
        let (g, _, b) = run(&small(true, 0));
        let im = b.images[0];
        for v in [im.hoi, im.instance, im.interaction] {
            assert_eq!(g.value(v), g.value(im.base));
        }
    }

    #[test]
    fn instance_loss_reaches_base_only() {
        let (mut g, store, b) = run(&small(true, 1));
        let loss = g.sum(b.images[0].instance);
        let grads = g.backward(loss);
        let touched = |prefix: &str| {
            store
                .ids_with_prefix(prefix)
                .any(|id| grads.get(id).is_some_and(|gr| gr.iter().any(|v| *v != 0.0)))
        };
        assert!(touched("encoder.base."));
        assert!(touched("encoder.instance."));
        assert!(!touched("encoder.hoi."));
        assert!(!touched("encoder.interaction."));
    }

    #[test]
    fn unread_stacks_are_not_built() {
        let names = |cfg: &ModelConfig| {
            let mut store = ParamStore::new();
            Encoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0));
            let has = |p: &str| store.ids_with_prefix(p).next().is_some();
            [has("encoder.hoi."), has("encoder.instance."), has("encoder.interaction.")]
        };
        assert_eq!(names(&small(true, 1)), [true, true, true]);
        let entangled = ModelConfig { decoder_disentangled: false, ..small(true, 1) };
        assert_eq!(names(&entangled), [true, false, false]);
        let query = ModelConfig { association_mode: AssociationMode::QueryDecomposition, ..small(true, 1) };
        assert_eq!(names(&query), [false, true, true]);
    }

    #[test]
    fn attention_concentrates_on_single_unmasked_position() {
        let cfg = small(true, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "l", &cfg, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(normal(&mut rng, 1.0, (5, 16)));
        let pos = g.zeros(5, 16);
        let mask = [true, true, false, true, true];
        let (out, w) = layer.forward(&mut g, &store, x, pos, Some(&mask), &mut Ctx::eval());
        assert_eq!(g.shape(out), (5, 16));
        for head in g.attention_probs(w).unwrap() {
            for row in head.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert_eq!(row[2], 1.0);
            }
        }
    }
}
