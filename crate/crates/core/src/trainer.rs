//! Optimization loop: parameter groups, warmup freezing, step decay,
//! checkpoints and a line-delimited JSON metrics log.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use hoi_tensor::nn::Ctx;
use hoi_tensor::optim::{clip_grad_norm, AdamW, StepRate};
use hoi_tensor::{Graph, ParamGroup, ParamId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError, TrainProgress};
use crate::config::{ConfigError, ValidConfig};
use crate::data::{derive_seed, Dataset, Sample};
use crate::evaluation::{category_counts, evaluate, EvalReport, DEFAULT_RARE_THRESHOLD};
use crate::featurizer::{FeaturizerError, ImageBatch};
use crate::inference::{detect, PostprocessOptions};
use crate::loss::{total_loss, LossComponents, LossOptions, TargetSet};
use crate::model::HoiModel;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: u64 },
    #[error("parameter `{0}` took part in the loss but received no gradient")]
    MissingGradient(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Featurizer(#[from] FeaturizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("metrics log: {0}")]
    Log(#[from] std::io::Error),
}

/// Learning rates of the two parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub transformer: f64,
    pub backbone: f64,
}

/// Step-decayed learning rates for `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &crate::config::TrainConfig) -> GroupRates {
    let f = if epoch >= cfg.lr_drop_epoch { cfg.lr_drop_factor } else { 1.0 };
    GroupRates { transformer: cfg.lr_transformer * f, backbone: cfg.lr_backbone * f }
}

/// Trainable parameters of each learning-rate group.
pub fn param_groups(model: &HoiModel) -> (Vec<ParamId>, Vec<ParamId>) {
    let mut backbone = Vec::new();
    let mut transformer = Vec::new();
    for (id, p) in model.store.iter() {
        if !p.trainable {
            continue;
        }
        match p.group {
            ParamGroup::Backbone => backbone.push(id),
            ParamGroup::Transformer => transformer.push(id),
        }
    }
    (backbone, transformer)
}

/// Per-step metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub final_set: LossComponents,
    pub all_sets: LossComponents,
    pub grad_norm: f64,
    pub lr: GroupRates,
}

/// Per-epoch metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    pub final_set: LossComponents,
    pub lr: GroupRates,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<MapRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub full: f64,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
}

impl From<&EvalReport> for MapRecord {
    fn from(r: &EvalReport) -> Self {
        MapRecord { full: r.full, rare: r.rare, non_rare: r.non_rare }
    }
}

pub struct Trainer {
    pub model: HoiModel,
    pub config: ValidConfig,
    pub optim: AdamW,
    pub progress: TrainProgress,
    /// Parameters held fixed during the warmup epochs.
    pub warmup_frozen: HashSet<ParamId>,
    pub history: Vec<EpochRecord>,
    log: Option<Box<dyn Write>>,
    log_steps: bool,
}

impl Trainer {
    /// A fresh model initialized from the training seed.
    pub fn new(config: ValidConfig) -> Self {
        let model = HoiModel::new(config.model.clone(), derive_seed(config.train.seed, u64::MAX));
        Self::with_model(model, config)
    }

    pub fn with_model(model: HoiModel, config: ValidConfig) -> Self {
        Trainer {
            model,
            config,
            optim: AdamW::default(),
            progress: TrainProgress::default(),
            warmup_frozen: HashSet::new(),
            history: Vec::new(),
            log: None,
            log_steps: true,
        }
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self, TrainError> {
        let config = ck.config.clone().validate()?;
        let model = ck.restore_model()?;
        let optim = ck.restore_optimizer(&model)?;
        let mut t = Self::with_model(model, config);
        t.optim = optim;
        t.progress = ck.progress.clone();
        Ok(t)
    }

    /// Sends metrics records to `w`, one JSON object per line.
    pub fn set_log(&mut self, w: Box<dyn Write>, per_step: bool) {
        self.log = Some(w);
        self.log_steps = per_step;
    }

    /// Loads every parameter of `ck` whose name and shape match the model and
    /// freezes those for the warmup epochs. Returns the number loaded.
    pub fn load_partial(&mut self, ck: &Checkpoint) -> usize {
        let mut loaded = 0;
        for (name, value) in &ck.params {
            let Some(id) = self.model.store.id(name) else { continue };
            if self.model.store.value(id).dim() != value.dim() {
                log::warn!("skipping `{name}`: shape {:?} differs from checkpoint", value.dim());
                continue;
            }
            *self.model.store.value_mut(id) = value.clone();
            if self.model.store.get(id).trainable {
                self.warmup_frozen.insert(id);
            }
            loaded += 1;
        }
        if loaded == 0 {
            log::warn!("checkpoint shares no parameters with the model; warmup trains everything");
        }
        loaded
    }

    /// Parameters excluded from the update at `epoch`.
    pub fn frozen_at(&self, epoch: usize) -> HashSet<ParamId> {
        let mut frozen = HashSet::new();
        if epoch < self.config.train.warmup_epochs {
            frozen.extend(self.warmup_frozen.iter().copied());
        }
        if self.config.train.freeze_backbone {
            frozen.extend(param_groups(&self.model).0);
        }
        frozen
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, self.config.to_config(), Some(&self.optim), self.progress.clone())
    }

    fn emit<T: Serialize>(&mut self, rec: &T) -> Result<(), TrainError> {
        if let Some(w) = self.log.as_mut() {
            serde_json::to_writer(&mut *w, rec).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }

    /// Epoch order of sample indices, derived from the seed and epoch only.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.train.seed, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on a batch; returns the step record.
    pub fn train_step(&mut self, batch: &[&Sample], epoch: usize) -> Result<StepRecord, TrainError> {
        let tc = &self.config.train;
        let lr = lr_at(epoch, tc);
        let images: Vec<&image::RgbImage> = batch.iter().map(|s| &s.image).collect();
        let targets: Vec<TargetSet> = batch.iter().map(|s| s.targets.clone()).collect();
        let ib = ImageBatch::from_rgb(&images);

        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed ^ 0x5eed, self.progress.step));
        let mut ctx = Ctx::train(self.model.config.dropout, &mut rng);
        let out = self.model.forward(&mut g, &ib, &mut ctx)?;
        let sets: Vec<&[_]> = out.images.iter().map(|im| im.triplet_sets.as_slice()).collect();
        let (loss, report, _) = total_loss(&mut g, &sets, &targets, &LossOptions::from(&**tc));
        if !report.total.is_finite() {
            return Err(TrainError::Diverged { epoch, step: self.progress.step });
        }
        let mut grads = g.backward(loss);
        // Without targets the box and action heads legitimately get no gradient.
        if targets.iter().all(|t| !t.is_empty()) {
            self.audit_gradients(&g, &grads)?;
        }
        let grad_norm = clip_grad_norm(&mut grads, tc.grad_clip_norm);
        let frozen = self.frozen_at(epoch);
        let store = &self.model.store;
        let groups: Vec<ParamGroup> = store.iter().map(|(_, p)| p.group).collect();
        let wd = tc.weight_decay;
        self.optim.step(&mut self.model.store, &grads, &frozen, |id| StepRate {
            lr: match groups[id.index()] {
                ParamGroup::Backbone => lr.backbone,
                ParamGroup::Transformer => lr.transformer,
            },
            weight_decay: wd,
        });
        self.progress.step += 1;
        Ok(StepRecord {
            kind: "step".into(),
            epoch,
            step: self.progress.step,
            loss: report.total,
            final_set: report.final_set,
            all_sets: report.all_sets,
            grad_norm,
            lr,
        })
    }

    /// Every trainable parameter that entered the graph must have a gradient.
    /// Only meaningful when every image in the batch has targets.
    fn audit_gradients(&self, g: &Graph, grads: &hoi_tensor::Gradients) -> Result<(), TrainError> {
        for id in g.params_used() {
            if self.model.store.get(id).trainable && grads.get(id).is_none() {
                return Err(TrainError::MissingGradient(self.model.store.get(id).name.clone()));
            }
        }
        Ok(())
    }

    /// Runs one full epoch over `data`.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochRecord, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let epoch = self.progress.epoch;
        let order = self.epoch_order(data.len(), epoch);
        let bs = self.config.train.batch_size;
        let mut total = 0.0;
        let mut final_set = LossComponents::default();
        let mut steps = 0usize;
        for chunk in order.chunks(bs) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let rec = self.train_step(&batch, epoch)?;
            total += rec.loss;
            final_set.bbox += rec.final_set.bbox;
            final_set.giou += rec.final_set.giou;
            final_set.class += rec.final_set.class;
            final_set.action += rec.final_set.action;
            steps += 1;
            if self.log_steps {
                self.emit(&rec)?;
            }
        }
        let n = steps as f64;
        let rec = EpochRecord {
            kind: "epoch".into(),
            epoch,
            step: self.progress.step,
            loss: total / n,
            final_set: LossComponents {
                bbox: final_set.bbox / n,
                giou: final_set.giou / n,
                class: final_set.class / n,
                action: final_set.action / n,
            },
            lr: lr_at(epoch, &self.config.train),
            map: None,
        };
        self.progress.epoch += 1;
        Ok(rec)
    }

    /// Full-split mAP of the current model on `data`, with rarity taken from
    /// `train` counts.
    pub fn evaluate(&self, data: &Dataset, train: &Dataset) -> Result<EvalReport, TrainError> {
        evaluate_model(&self.model, data, train, self.config.train.batch_size, self.config.train.score_threshold)
    }

    /// Trains until the configured number of epochs, evaluating and
    /// checkpointing at the configured cadence. Checkpoints go to `run_dir`.
    pub fn fit(&mut self, train: &Dataset, eval: Option<&Dataset>, run_dir: Option<&Path>) -> Result<(), TrainError> {
        let tc = self.config.train.clone();
        while self.progress.epoch < tc.epochs {
            let mut rec = self.train_epoch(train)?;
            let done = self.progress.epoch;
            if let Some(ev) = eval {
                if tc.eval_every > 0 && (done % tc.eval_every == 0 || done == tc.epochs) {
                    rec.map = Some(MapRecord::from(&self.evaluate(ev, train)?));
                }
            }
            log::info!("epoch {} loss {:.4}", rec.epoch, rec.loss);
            self.emit(&rec)?;
            self.history.push(rec);
            if let Some(dir) = run_dir {
                if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done < tc.epochs {
                    self.checkpoint().save(&dir.join(format!("checkpoint_epoch{done:04}.bin")))?;
                }
            }
        }
        if let Some(dir) = run_dir {
            self.checkpoint().save(&dir.join("checkpoint_final.bin"))?;
        }
        Ok(())
    }
}

/// Detects on every sample of `data` and scores against its annotations.
pub fn evaluate_model(
    model: &HoiModel,
    data: &Dataset,
    train: &Dataset,
    batch_size: usize,
    score_threshold: f64,
) -> Result<EvalReport, TrainError> {
    let samples: Vec<&Sample> = data.samples.iter().collect();
    let opts = PostprocessOptions { score_threshold, ..Default::default() };
    let dets = detect(model, &samples, batch_size, &opts)?;
    Ok(evaluate(
        &dets,
        &data.annotations.gt_triplets(),
        &category_counts(&train.annotations.gt_triplets()),
        DEFAULT_RARE_THRESHOLD,
        &data.annotations.ignore_object_flags(),
    ))
}
