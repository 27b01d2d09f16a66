//! Coarse-to-fine decoding: a base decoder builds the unified HOI
//! representation, then instance and interaction decoders refine it in
//! lockstep, with instance-to-interaction fusion between layers.

use hoi_tensor::nn::{normal, Ctx, LayerNorm, Linear, Mlp, MultiHeadAttention};
use hoi_tensor::{Graph, ParamGroup, ParamId, ParamStore, Var};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AssociationMode, ModelConfig};
use crate::encoder::{EncodedImage, EncoderBundle};

/// Self-attention → cross-attention → feed-forward, post-norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub linear1: Linear,
    pub linear2: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, t) = (cfg.d_model, ParamGroup::Transformer);
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.n_heads, t, rng),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.n_heads, t, rng),
            linear1: Linear::new(store, &format!("{name}.linear1"), d, cfg.ffn_dim, t, rng),
            linear2: Linear::new(store, &format!("{name}.linear2"), cfg.ffn_dim, d, t, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, t),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, t),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d, t),
        }
    }

    /// Returns the layer output and the cross-attention probability node.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tgt: Var,
        memory: Var,
        pos: Var,
        query_pos: Var,
        mask: Option<&[bool]>,
        ctx: &mut Ctx,
    ) -> (Var, Var) {
        let qk = g.add(tgt, query_pos);
        let s = self.self_attn.forward(g, store, qk, qk, tgt, None);
        let s = ctx.dropout(g, s.output);
        let x = g.add(tgt, s);
        let x = self.norm1.forward(g, store, x);

        let q = g.add(x, query_pos);
        let k = g.add(memory, pos);
        let c = self.cross_attn.forward(g, store, q, k, memory, mask);
        let co = ctx.dropout(g, c.output);
        let x = g.add(x, co);
        let x = self.norm2.forward(g, store, x);

        let h = self.linear1.forward(g, store, x);
        let h = g.relu(h);
        let h = ctx.dropout(g, h);
        let h = self.linear2.forward(g, store, h);
        let h = ctx.dropout(g, h);
        let x = g.add(x, h);
        (self.norm3.forward(g, store, x), c.weights)
    }
}

/// Learned query embeddings.
#[derive(Clone, Debug)]
pub struct QueryBank {
    pub hoi: Option<ParamId>,
    pub instance: Option<ParamId>,
    pub interaction: Option<ParamId>,
    pub unified: Option<ParamId>,
}

impl QueryBank {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let shape = (cfg.n_queries, cfg.d_model);
        let q = |store: &mut ParamStore, name: &str, rng: &mut R| {
            store.add(format!("queries.{name}"), normal(rng, 1.0, shape), ParamGroup::Transformer)
        };
        let query_mode = cfg.association_mode == AssociationMode::QueryDecomposition && cfg.decoder_disentangled;
        let task_queries = cfg.decoder_disentangled && !query_mode;
        QueryBank {
            hoi: (!query_mode).then(|| q(store, "hoi", rng)),
            instance: task_queries.then(|| q(store, "instance", rng)),
            interaction: task_queries.then(|| q(store, "interaction", rng)),
            unified: query_mode.then(|| q(store, "unified", rng)),
        }
    }
}

/// Prediction heads; a decoder only owns the heads for what it predicts.
#[derive(Clone, Debug, Default)]
pub struct Heads {
    pub human_box: Option<Mlp>,
    pub object_box: Option<Mlp>,
    pub class: Option<Linear>,
    pub action: Option<Linear>,
}

impl Heads {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        instance: bool,
        interaction: bool,
        rng: &mut R,
    ) -> Self {
        let (d, t) = (cfg.d_model, ParamGroup::Transformer);
        let boxes = |store: &mut ParamStore, which: &str, rng: &mut R| {
            Mlp::new(store, &format!("{name}.{which}"), &[d, d, d, 4], t, rng)
        };
        let mut heads = Heads::default();
        if instance {
            heads.human_box = Some(boxes(store, "human_box", rng));
            heads.object_box = Some(boxes(store, "object_box", rng));
            heads.class = Some(Linear::new(store, &format!("{name}.class"), d, cfg.n_obj_classes + 1, t, rng));
        }
        if interaction {
            heads.action = Some(Linear::new(store, &format!("{name}.action"), d, cfg.n_action_classes, t, rng));
        }
        heads
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> HeadVars {
        let mut boxes = |mlp: &Option<Mlp>| {
            mlp.as_ref().map(|m| {
                let b = m.forward(g, store, x);
                g.sigmoid(b)
            })
        };
        let human_boxes = boxes(&self.human_box);
        let object_boxes = boxes(&self.object_box);
        HeadVars {
            human_boxes,
            object_boxes,
            class_logits: self.class.as_ref().map(|l| l.forward(g, store, x)),
            action_logits: self.action.as_ref().map(|l| l.forward(g, store, x)),
        }
    }
}

/// Graph nodes produced by one head application. Boxes are post-sigmoid
/// `cx, cy, w, h`; class and action entries are logits.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeadVars {
    pub human_boxes: Option<Var>,
    pub object_boxes: Option<Var>,
    pub class_logits: Option<Var>,
    pub action_logits: Option<Var>,
}

/// Which decoder produced a set of predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderTag {
    Base,
    Instance,
    Interaction,
    /// Instance and interaction outputs of the same layer grouped by query.
    Combined,
}

/// Complete triplet predictions as graph nodes (for losses).
#[derive(Clone, Copy, Debug)]
pub struct TripletVars {
    pub tag: DecoderTag,
    pub layer: usize,
    pub human_boxes: Var,
    pub object_boxes: Var,
    pub class_logits: Var,
    pub action_logits: Var,
}

impl TripletVars {
    fn from_heads(tag: DecoderTag, layer: usize, inst: HeadVars, inter: HeadVars) -> Self {
        TripletVars {
            tag,
            layer,
            human_boxes: inst.human_boxes.expect("instance heads"),
            object_boxes: inst.object_boxes.expect("instance heads"),
            class_logits: inst.class_logits.expect("instance heads"),
            action_logits: inter.action_logits.expect("interaction heads"),
        }
    }

    /// Normalized probabilities for this set.
    pub fn values(&self, g: &Graph) -> PredictionSet {
        PredictionSet {
            tag: self.tag,
            layer: self.layer,
            human_boxes: Some(g.value(self.human_boxes).clone()),
            object_boxes: Some(g.value(self.object_boxes).clone()),
            class_probs: Some(softmax_rows(g.value(self.class_logits))),
            action_probs: Some(g.value(self.action_logits).mapv(sigmoid)),
        }
    }
}

/// Per-query predictions of one decoder layer. Fields a decoder does not
/// predict are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub tag: DecoderTag,
    pub layer: usize,
    pub human_boxes: Option<Array2<f64>>,
    pub object_boxes: Option<Array2<f64>>,
    /// Softmax over `classes + 1`, background last.
    pub class_probs: Option<Array2<f64>>,
    pub action_probs: Option<Array2<f64>>,
}

impl PredictionSet {
    fn from_heads(tag: DecoderTag, layer: usize, g: &Graph, h: &HeadVars) -> Self {
        PredictionSet {
            tag,
            layer,
            human_boxes: h.human_boxes.map(|v| g.value(v).clone()),
            object_boxes: h.object_boxes.map(|v| g.value(v).clone()),
            class_probs: h.class_logits.map(|v| softmax_rows(g.value(v))),
            action_probs: h.action_logits.map(|v| g.value(v).mapv(sigmoid)),
        }
    }

    pub fn n_queries(&self) -> usize {
        [&self.human_boxes, &self.class_probs, &self.action_probs]
            .iter()
            .find_map(|a| a.as_ref().map(|a| a.nrows()))
            .unwrap_or(0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Instance-to-interaction attentional fusion block.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub channel: Mlp,
    pub instance: Mlp,
}

impl Fusion {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let t = ParamGroup::Transformer;
        Fusion {
            channel: Mlp::new(store, &format!("{name}.channel"), &[2 * d, d, d], t, rng),
            instance: Mlp::new(store, &format!("{name}.instance"), &[d, d, d], t, rng),
        }
    }

    /// `γ_a + β ⊙ γ_a + MLP(γ_d)` with `β = σ(MLP([γ_a; γ_d]))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, gamma_d: Var, gamma_a: Var) -> Var {
        let cat = g.concat_cols(&[gamma_a, gamma_d]);
        let beta = self.channel.forward(g, store, cat);
        let beta = g.sigmoid(beta);
        let gated = g.mul(beta, gamma_a);
        let inst = self.instance.forward(g, store, gamma_d);
        let s = g.add(gamma_a, gated);
        g.add(s, inst)
    }
}

/// Raw per-layer representations of the two task decoders.
#[derive(Clone, Debug, Default)]
pub struct TaskTrace {
    pub instance: Vec<Var>,
    pub interaction: Vec<Var>,
    /// Fused interaction representation after every non-final layer.
    pub fused: Vec<Var>,
}

/// Cross-attention probabilities of the last layer of each decoder that
/// feeds the final predictions.
#[derive(Clone, Copy, Debug)]
pub struct FinalAttention {
    pub instance: Var,
    pub interaction: Var,
}

/// Everything the decoder produced for one image.
#[derive(Clone, Debug)]
pub struct ImageDecoding {
    /// Unified representation after every base layer.
    pub unified: Vec<Var>,
    pub trace: TaskTrace,
    /// Head outputs per decoder and layer.
    pub heads: Vec<(DecoderTag, usize, HeadVars)>,
    /// Triplet sets used for supervision, final set last.
    pub triplet_sets: Vec<TripletVars>,
    pub attention: FinalAttention,
}

impl ImageDecoding {
    pub fn final_set(&self) -> &TripletVars {
        self.triplet_sets.last().expect("decoder produced no predictions")
    }

    /// Per-decoder prediction sets (base layers, then instance, then interaction).
    pub fn prediction_sets(&self, g: &Graph) -> Vec<PredictionSet> {
        self.heads
            .iter()
            .map(|(tag, layer, h)| PredictionSet::from_heads(*tag, *layer, g, h))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub queries: QueryBank,
    pub base_layers: Vec<DecoderLayer>,
    pub instance_layers: Vec<DecoderLayer>,
    pub interaction_layers: Vec<DecoderLayer>,
    pub fusion: Vec<Fusion>,
    /// Perceptrons from the unified representation (or unified queries) to
    /// the task decoders.
    pub to_instance: Option<Mlp>,
    pub to_interaction: Option<Mlp>,
    pub base_heads: Heads,
    pub instance_heads: Heads,
    pub interaction_heads: Heads,
    mode: AssociationMode,
    disentangled: bool,
    n_queries: usize,
    d_model: usize,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let t = ParamGroup::Transformer;
        let queries = QueryBank::new(store, cfg, rng);
        let stack = |store: &mut ParamStore, prefix: &str, n: usize, rng: &mut R| {
            (0..n)
                .map(|i| DecoderLayer::new(store, &format!("decoder.{prefix}.layers.{i}"), cfg, rng))
                .collect::<Vec<_>>()
        };
        let query_mode = cfg.association_mode == AssociationMode::QueryDecomposition;
        if !cfg.decoder_disentangled {
            let base_layers = stack(store, "base", cfg.dec_base_layers + cfg.dec_head_layers, rng);
            let base_heads = Heads::new(store, "heads.base", cfg, true, true, rng);
            return Decoder {
                queries,
                base_layers,
                instance_layers: Vec::new(),
                interaction_layers: Vec::new(),
                fusion: Vec::new(),
                to_instance: None,
                to_interaction: None,
                base_heads,
                instance_heads: Heads::default(),
                interaction_heads: Heads::default(),
                mode: cfg.association_mode,
                disentangled: false,
                n_queries: cfg.n_queries,
                d_model: d,
            };
        }
        let base_layers = if query_mode { Vec::new() } else { stack(store, "base", cfg.dec_base_layers, rng) };
        let instance_layers = stack(store, "instance", cfg.dec_head_layers, rng);
        let interaction_layers = stack(store, "interaction", cfg.dec_head_layers, rng);
        let fusion = if cfg.fusion_enabled {
            (0..cfg.dec_head_layers.saturating_sub(1))
                .map(|i| Fusion::new(store, &format!("decoder.fusion.{i}"), d, rng))
                .collect()
        } else {
            Vec::new()
        };
        let (inst_name, inter_name) = if query_mode {
            ("decoder.query_to_instance", "decoder.query_to_interaction")
        } else {
            ("decoder.embed_instance", "decoder.embed_interaction")
        };
        let to_instance = Some(Mlp::new(store, inst_name, &[d, d, d], t, rng));
        let to_interaction = Some(Mlp::new(store, inter_name, &[d, d, d], t, rng));
        let base_heads = if base_layers.is_empty() {
            Heads::default()
        } else {
            Heads::new(store, "heads.base", cfg, true, true, rng)
        };
        let instance_heads = Heads::new(store, "heads.instance", cfg, true, false, rng);
        let interaction_heads = Heads::new(store, "heads.interaction", cfg, false, true, rng);
        Decoder {
            queries,
            base_layers,
            instance_layers,
            interaction_layers,
            fusion,
            to_instance,
            to_interaction,
            base_heads,
            instance_heads,
            interaction_heads,
            mode: cfg.association_mode,
            disentangled: true,
            n_queries: cfg.n_queries,
            d_model: d,
        }
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bundle: &EncoderBundle,
        ctx: &mut Ctx,
    ) -> Vec<ImageDecoding> {
        bundle
            .images
            .iter()
            .zip(&bundle.flat_mask)
            .map(|(enc, mask)| self.decode_image(g, store, enc, bundle.pos, mask, ctx))
            .collect()
    }

    fn decode_image(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedImage,
        pos: Var,
        mask: &[bool],
        ctx: &mut Ctx,
    ) -> ImageDecoding {
        let mask = Some(mask);
        let mut heads = Vec::new();
        let mut triplet_sets = Vec::new();
        let mut unified = Vec::new();

        // Base decoder (also the whole decoder when not disentangled).
        let mut base_attn = None;
        if !self.base_layers.is_empty() {
            let q_hoi = g.param(store, self.queries.hoi.expect("hoi queries"));
            let mut x = g.zeros(self.n_queries, self.d_model);
            for (i, layer) in self.base_layers.iter().enumerate() {
                let (y, attn) = layer.forward(g, store, x, enc.hoi, pos, q_hoi, mask, ctx);
                x = y;
                base_attn = Some(attn);
                unified.push(y);
                let h = self.base_heads.apply(g, store, y);
                heads.push((DecoderTag::Base, i, h));
                triplet_sets.push(TripletVars::from_heads(DecoderTag::Base, i, h, h));
            }
        }
        if !self.disentangled {
            let attn = base_attn.expect("decoder has at least one layer");
            return ImageDecoding {
                unified,
                trace: TaskTrace::default(),
                heads,
                triplet_sets,
                attention: FinalAttention { instance: attn, interaction: attn },
            };
        }

        let to_inst = self.to_instance.as_ref().unwrap();
        let to_inter = self.to_interaction.as_ref().unwrap();
        let (mut xd, mut xa, qd, qa) = match self.mode {
            AssociationMode::FeatureDecomposition => {
                let q_inst = g.param(store, self.queries.instance.expect("instance queries"));
                let q_inter = g.param(store, self.queries.interaction.expect("interaction queries"));
                let u = *unified.last().expect("base decoder output");
                let xd = to_inst.forward(g, store, u);
                let xa = to_inter.forward(g, store, u);
                (xd, xa, q_inst, q_inter)
            }
            AssociationMode::QueryDecomposition => {
                let uq = g.param(store, self.queries.unified.expect("unified queries"));
                let qd = to_inst.forward(g, store, uq);
                let qa = to_inter.forward(g, store, uq);
                let zd = g.zeros(self.n_queries, self.d_model);
                let za = g.zeros(self.n_queries, self.d_model);
                (zd, za, qd, qa)
            }
        };

        let n = self.instance_layers.len();
        let mut trace = TaskTrace::default();
        let mut inst_heads = Vec::with_capacity(n);
        let mut inter_heads = Vec::with_capacity(n);
        let mut attention = None;
        for i in 0..n {
            let (gd, attn_d) = self.instance_layers[i].forward(g, store, xd, enc.instance, pos, qd, mask, ctx);
            let (ga, attn_a) = self.interaction_layers[i].forward(g, store, xa, enc.interaction, pos, qa, mask, ctx);
            trace.instance.push(gd);
            trace.interaction.push(ga);
            inst_heads.push(self.instance_heads.apply(g, store, gd));
            inter_heads.push(self.interaction_heads.apply(g, store, ga));
            xd = gd;
            xa = ga;
            if i + 1 < n {
                if let Some(f) = self.fusion.get(i) {
                    xa = f.forward(g, store, gd, ga);
                    trace.fused.push(xa);
                }
            } else {
                attention = Some(FinalAttention { instance: attn_d, interaction: attn_a });
            }
        }
        for (i, h) in inst_heads.iter().enumerate() {
            heads.push((DecoderTag::Instance, i, *h));
        }
        for (i, h) in inter_heads.iter().enumerate() {
            heads.push((DecoderTag::Interaction, i, *h));
        }
        for i in 0..n {
            triplet_sets.push(TripletVars::from_heads(DecoderTag::Combined, i, inst_heads[i], inter_heads[i]));
        }
        ImageDecoding {
            unified,
            trace,
            heads,
            triplet_sets,
            attention: attention.expect("task decoders have at least one layer"),
        }
    }
}
