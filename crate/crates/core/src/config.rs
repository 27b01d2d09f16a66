//! Architecture and optimization hyperparameters.
//!
//! Raw [`ModelConfig`]/[`TrainConfig`] values deserialize from JSON with every
//! field optional; [`validate`] checks the invariants and hands back the
//! `Valid*` wrappers that model construction and training require.

use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad override `{0}`: expected key=value with a known dotted key")]
    Override(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.into() }
}

/// How the two task decoders obtain their inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    /// Task decoders start from an embedding of the base decoder's unified
    /// representation.
    FeatureDecomposition,
    /// No base decoder; learned unified queries are mapped into per-task
    /// queries and the task decoders start from zeros.
    QueryDecomposition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneKind {
    /// Four strided conv blocks (stride 4, 2, 2, 2) with the given widths.
    Toy { widths: [usize; 4] },
    /// Standard 50-layer residual network with frozen batch norm, 2048 output channels.
    Resnet50,
}

impl Default for BackboneKind {
    fn default() -> Self {
        BackboneKind::Toy { widths: [16, 32, 64, 128] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub n_queries: usize,
    pub n_obj_classes: usize,
    pub n_action_classes: usize,
    pub enc_base_layers: usize,
    pub enc_head_layers: usize,
    pub dec_base_layers: usize,
    pub dec_head_layers: usize,
    pub encoder_disentangled: bool,
    pub fusion_enabled: bool,
    pub association_mode: AssociationMode,
    /// `false` selects the single-decoder baseline emitting full triplets.
    pub decoder_disentangled: bool,
    pub backbone: BackboneKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            n_heads: 8,
            ffn_dim: 2048,
            dropout: 0.1,
            n_queries: 100,
            n_obj_classes: 80,
            n_action_classes: 117,
            enc_base_layers: 4,
            enc_head_layers: 2,
            dec_base_layers: 2,
            dec_head_layers: 4,
            encoder_disentangled: true,
            fusion_enabled: true,
            association_mode: AssociationMode::FeatureDecomposition,
            decoder_disentangled: true,
            backbone: BackboneKind::default(),
        }
    }
}

/// Which loss drives the sigmoid action outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionLoss {
    Bce,
    Focal { gamma: f64, alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_bbox: f64,
    pub lambda_giou: f64,
    pub lambda_class: f64,
    pub lambda_action: f64,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub warmup_epochs: usize,
    pub freeze_backbone: bool,
    pub background_class_weight: f64,
    pub score_threshold: f64,
    pub seed: u64,
    pub grad_clip_norm: f64,
    pub action_loss: ActionLoss,
    /// Supervise every decoder layer, not only the last.
    pub aux_loss: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Evaluate on the held-out set every this many epochs (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_bbox: 2.5,
            lambda_giou: 1.0,
            lambda_class: 1.0,
            lambda_action: 1.0,
            lr_transformer: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 80,
            lr_drop_epoch: 65,
            lr_drop_factor: 0.1,
            warmup_epochs: 10,
            freeze_backbone: false,
            background_class_weight: 0.1,
            score_threshold: 0.0,
            seed: 42,
            grad_clip_norm: 0.1,
            action_loss: ActionLoss::Bce,
            aux_loss: true,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

/// A [`ModelConfig`] whose invariants have been checked.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidModelConfig(ModelConfig);

/// A [`TrainConfig`] whose invariants have been checked.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidTrainConfig(TrainConfig);

impl Deref for ValidModelConfig {
    type Target = ModelConfig;
    fn deref(&self) -> &ModelConfig {
        &self.0
    }
}

impl Deref for ValidTrainConfig {
    type Target = TrainConfig;
    fn deref(&self) -> &TrainConfig {
        &self.0
    }
}

impl ValidModelConfig {
    pub fn into_inner(self) -> ModelConfig {
        self.0
    }
}

impl ValidTrainConfig {
    pub fn into_inner(self) -> TrainConfig {
        self.0
    }
}

impl ModelConfig {
    pub fn validate(self) -> Result<ValidModelConfig, ConfigError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("n_queries", self.n_queries),
            ("n_obj_classes", self.n_obj_classes),
            ("n_action_classes", self.n_action_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid(
                "d_model",
                format!("{} is not divisible by n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        if self.d_model % 4 != 0 {
            return Err(invalid(
                "d_model",
                format!("{} must be divisible by 4 for the 2-D positional embedding", self.d_model),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if self.dec_base_layers + self.dec_head_layers == 0 {
            return Err(invalid("dec_head_layers", "base plus task decoder layers must be at least 1"));
        }
        if self.decoder_disentangled && self.dec_head_layers == 0 {
            return Err(invalid(
                "dec_head_layers",
                "the disentangled decoder needs at least one task layer to emit predictions",
            ));
        }
        if let BackboneKind::Toy { widths } = &self.backbone {
            if widths.contains(&0) {
                return Err(invalid("backbone", "toy backbone widths must be positive"));
            }
        }
        Ok(ValidModelConfig(self))
    }

    /// Baseline mode ignores fusion and association settings.
    pub fn uses_fusion(&self) -> bool {
        self.decoder_disentangled && self.fusion_enabled
    }
}

impl TrainConfig {
    pub fn validate(self) -> Result<ValidTrainConfig, ConfigError> {
        let lambdas = [
            ("lambda_bbox", self.lambda_bbox),
            ("lambda_giou", self.lambda_giou),
            ("lambda_class", self.lambda_class),
            ("lambda_action", self.lambda_action),
        ];
        for (field, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("{v} must be a finite non-negative weight")));
            }
        }
        for (field, v) in [
            ("lr_transformer", self.lr_transformer),
            ("lr_backbone", self.lr_backbone),
            ("weight_decay", self.weight_decay),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("{v} must be finite and non-negative")));
            }
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(invalid("lr_drop_factor", format!("{} outside (0, 1]", self.lr_drop_factor)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(invalid(
                "warmup_epochs",
                format!("{} exceeds epochs = {}", self.warmup_epochs, self.epochs),
            ));
        }
        if !(0.0..=1.0).contains(&self.background_class_weight) {
            return Err(invalid("background_class_weight", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(invalid("score_threshold", "must lie in [0, 1]"));
        }
        if let ActionLoss::Focal { gamma, alpha } = self.action_loss {
            if gamma < 0.0 || !(0.0..=1.0).contains(&alpha) {
                return Err(invalid("action_loss", "focal gamma must be >= 0 and alpha in [0, 1]"));
            }
        }
        Ok(ValidTrainConfig(self))
    }
}

/// Both configurations, as stored in a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidConfig {
    pub model: ValidModelConfig,
    pub train: ValidTrainConfig,
}

/// Checks both configurations; the first violated invariant is reported.
pub fn validate(model: ModelConfig, train: TrainConfig) -> Result<ValidConfig, ConfigError> {
    Ok(ValidConfig { model: model.validate()?, train: train.validate()? })
}

impl Config {
    pub fn validate(self) -> Result<ValidConfig, ConfigError> {
        validate(self.model, self.train)
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Loads a file (or defaults) and applies `section.field=value` overrides.
    /// Values parse as JSON when possible and as bare strings otherwise.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(self)?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        Ok(serde_json::from_value(value)?)
    }
}

fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    }
    *slot = parsed;
    Ok(())
}

impl ValidConfig {
    pub fn to_config(&self) -> Config {
        Config { model: (*self.model).clone(), train: (*self.train).clone() }
    }
}
