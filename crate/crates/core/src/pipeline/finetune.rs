use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, Task};
use super::metrics::MetricsRecord;
use super::train::{check_finite, schedule_for, Optimizer};
use crate::backbone::{cls_logits, forward_images, layer_group, seg_logits, BackboneWeights, Mode};
use crate::data::{Image, SegExample};
use crate::error::{Error, Result};
use crate::numerics::{layer_lr_multiplier, AdamConfig, Tape};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub layer_decay: f64,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    /// Overrides the backbone's stochastic-depth rate when set.
    pub drop_path: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            task: Task::Classify,
            epochs: 10,
            batch: 32,
            peak_lr: 1e-3,
            min_lr: 1e-6,
            warmup_epochs: 1.0,
            layer_decay: 0.65,
            label_smoothing: 0.1,
            adam: AdamConfig::default(),
            clip_norm: None,
            drop_path: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("finetune.batch", "must be positive"));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::config("finetune.layer_decay", format!("{} is not in (0, 1]", self.layer_decay)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("finetune.label_smoothing", "must be in [0, 1)"));
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0 && self.warmup_epochs >= 0.0) {
            return Err(Error::config("finetune.peak_lr", "rates and warmup must be non-negative"));
        }
        if self.drop_path.is_some_and(|p| !(0.0..1.0).contains(&p)) {
            return Err(Error::config("finetune.drop_path", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub weights: BackboneWeights,
    pub metrics: Vec<MetricsRecord>,
}

/// Attaches a fresh zero-initialized task head to `init` and trains every
/// parameter except the mask embedding, with layer-wise learning-rate decay.
/// `classes` is the head width: class count, or segment labels including
/// background. After each epoch the model is evaluated on `eval`.
pub fn finetune(
    init: &BackboneWeights,
    train: &[SegExample],
    eval: &[SegExample],
    classes: usize,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if classes < 2 {
        return Err(Error::invalid("a task head needs at least two classes"));
    }
    let mut weights = init.clone();
    weights.attach_head(cfg.task.head(), classes);
    if let Some(p) = cfg.drop_path {
        weights.config.drop_path = p;
    }
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::invalid("fine-tuning needs a non-empty training set"));
    }
    let bcfg = weights.config.clone();
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = (cfg.warmup_epochs * steps_per_epoch as f64).round() as usize;
    let layers = bcfg.layers;
    let decay = cfg.layer_decay;
    let frozen = |name: &str| name == "embed.mask";
    let mut opt = Optimizer::new(
        &weights.params,
        schedule_for(cfg.peak_lr, cfg.min_lr, warmup, total)?,
        cfg.adam,
        cfg.clip_norm,
        |name| layer_lr_multiplier(layer_group(name), layers, decay),
        frozen,
    );
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, "finetune-order", epoch as u64));
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch) {
            let images: Vec<Image> = idx.iter().map(|&i| train[i].image.clone()).collect();
            let mut drop_rng = substream(cfg.seed, "finetune-drop", step as u64);
            let mut tape = Tape::new();
            let p = weights.params.bind(&mut tape, |n| !frozen(n));
            let enc = forward_images(&mut tape, &p, &bcfg, &images, None, Mode::Train, Some(&mut drop_rng))?;
            let loss = match cfg.task {
                Task::Classify => {
                    let logits = cls_logits(&mut tape, &p, &bcfg, enc.hidden, images.len())?;
                    let targets: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
                    tape.cross_entropy_smoothed(logits, &targets, cfg.label_smoothing)?
                }
                Task::Segment => {
                    let (h, w) = (images[0].height, images[0].width);
                    let logits = seg_logits(&mut tape, &p, &bcfg, enc.hidden, images.len(), (h, w))?;
                    let targets: Vec<usize> = idx
                        .iter()
                        .flat_map(|&i| train[i].seg.iter().map(|&v| v as usize))
                        .collect();
                    tape.cross_entropy(logits, &targets)?
                }
            };
            let lv = tape.value(loss).item() as f64;
            check_finite(step, "fine-tuning loss", lv)?;
            loss_sum += lv;
            let mut grads = tape.backward(loss)?;
            let grads = p.collect(&mut grads);
            drop(p);
            opt.step(&mut weights.params, grads, step)?;
            step += 1;
        }
        metrics.push(MetricsRecord::new(epoch, "train", "loss", loss_sum / steps_per_epoch as f64));
        if !eval.is_empty() {
            for (name, v) in evaluate(&weights, eval, cfg.task)?.named() {
                metrics.push(MetricsRecord::new(epoch, "eval", &name, v));
            }
        }
    }
    weights.config.drop_path = init.config.drop_path;
    Ok(FinetuneOutput { weights, metrics })
}

/// First epoch (1-based) whose value reaches `fraction` of the final value.
pub fn epochs_to_fraction(curve: &[(usize, f64)], fraction: f64) -> Option<usize> {
    let last = curve.last()?.1;
    curve.iter().find(|(_, v)| *v >= fraction * last).map(|(e, _)| *e)
}
