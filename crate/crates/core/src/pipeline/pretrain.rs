use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use super::train::{check_finite, schedule_for, Optimizer};
use crate::backbone::{forward_images, head_at_positions, BackboneConfig, BackboneWeights, Head, Mode};
use crate::data::{augment, patchify, AugmentConfig, Image};
use crate::error::{Error, Result};
use crate::masking::{draw_mask, BlockMaskConfig, MaskSet};
use crate::numerics::{AdamConfig, Element, Tape, Tensor};
use crate::rng::{substream, StreamRng};
use crate::tokenizer::{argmax_rows, TokenizerWeights};

/// What the pre-training head predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Visual tokens at masked positions.
    Mim,
    /// Normalized raw pixels at masked positions.
    Pixel,
    /// Visual tokens at every position.
    MimAllPositions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub mask: BlockMaskConfig,
    pub objective: Objective,
    pub augment: AugmentConfig,
    /// Training metrics are averaged and logged every this many steps.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch: 32,
            peak_lr: 1.5e-3,
            min_lr: 1e-5,
            warmup_steps: 150,
            adam: AdamConfig::default(),
            clip_norm: Some(3.0),
            mask: BlockMaskConfig::default(),
            objective: Objective::Mim,
            augment: AugmentConfig::default(),
            log_every: 10,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("pretrain.batch", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("pretrain.log_every", "must be positive"));
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0) {
            return Err(Error::config("pretrain.peak_lr", "learning rates must be non-negative"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("pretrain.clip_norm", "must be positive when set"));
        }
        self.mask.validate()?;
        self.augment.validate()
    }
}

/// Result of a pre-training run.
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub weights: BackboneWeights,
    pub metrics: Vec<MetricsRecord>,
}

/// Per-channel mean and standard deviation over a dataset, used to normalize
/// pixel regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl PixelStats {
    pub fn of(images: &[Image]) -> Self {
        let c = images.first().map_or(3, |i| i.channels);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0usize;
        for img in images {
            for px in img.data.chunks_exact(c) {
                for (k, &v) in px.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64).powi(2);
                }
            }
            n += img.height * img.width;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        PixelStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    /// Normalized patch vectors `[N, P*P*C]` of one image.
    pub fn targets(&self, img: &Image, patch: usize) -> Result<Vec<f32>> {
        let g = patchify(img, patch)?;
        let c = self.mean.len();
        Ok(g.data
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect())
    }
}

fn sample_batch(dataset: &[Image], cfg: &PretrainConfig, rng: &mut StreamRng) -> Vec<Image> {
    (0..cfg.batch)
        .map(|_| {
            let img = &dataset[rng.gen_range(0..dataset.len())];
            augment(img, &cfg.augment, rng)
        })
        .collect()
}

/// Top-1 hits of `logits` rows against `targets`.
pub(crate) fn hits<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(targets).filter(|(a, b)| a == b).count()
}

/// Accumulates training metrics between log points.
struct Window {
    sums: Vec<(&'static str, f64, f64)>,
}

impl Window {
    fn new() -> Self {
        Window { sums: Vec::new() }
    }

    fn add(&mut self, name: &'static str, num: f64, den: f64) {
        match self.sums.iter_mut().find(|(n, ..)| *n == name) {
            Some(e) => {
                e.1 += num;
                e.2 += den;
            }
            None => self.sums.push((name, num, den)),
        }
    }

    fn flush(&mut self, step: usize, out: &mut Vec<MetricsRecord>) {
        for (name, num, den) in self.sums.drain(..) {
            if den > 0.0 {
                out.push(MetricsRecord::new(step, "train", name, num / den));
            }
        }
    }
}

/// Shared loop for the three objectives. `tokenizer` is required for the
/// token objectives.
fn pretrain(
    dataset: &[Image],
    tokenizer: Option<&TokenizerWeights>,
    init: BackboneWeights,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("pre-training needs a non-empty dataset"));
    }
    let bcfg = init.config.clone();
    let g = bcfg.grid();
    let tokenizer = match (cfg.objective, tokenizer) {
        (Objective::Pixel, _) => None,
        (_, Some(t)) => {
            if t.config.grid() != g || t.config.image_size != bcfg.image_size {
                return Err(Error::invalid(format!(
                    "tokenizer grid {0}x{0} does not align with the {g}x{g} patch grid",
                    t.config.grid()
                )));
            }
            Some(t)
        }
        (_, None) => return Err(Error::invalid("token objectives need a tokenizer")),
    };
    let mut weights = init;
    let (head, head_out) = match cfg.objective {
        Objective::Pixel => (Head::Pixel, bcfg.patch_dim()),
        _ => (Head::Mim, tokenizer.map_or(0, |t| t.config.vocab)),
    };
    if weights.head() != Some((head, head_out)) {
        weights.attach_head(head, head_out);
    }
    let pixel_stats = PixelStats::of(dataset);
    let mut opt = Optimizer::new(
        &weights.params,
        schedule_for(cfg.peak_lr, cfg.min_lr, cfg.warmup_steps, cfg.steps)?,
        cfg.adam,
        cfg.clip_norm,
        |_| 1.0,
        |_| false,
    );
    let mut metrics = Vec::new();
    let mut window = Window::new();
    for step in 0..cfg.steps {
        let mut rng = substream(cfg.seed, "pretrain-batch", step as u64);
        let mut drop_rng = substream(cfg.seed, "pretrain-drop", step as u64);
        let images = sample_batch(dataset, cfg, &mut rng);
        let masks = step_masks(cfg, g, step);
        let masked_total: usize = masks.iter().map(MaskSet::len).sum();
        if masked_total == 0 && cfg.objective != Objective::MimAllPositions {
            return Err(Error::invalid("mask ratio yields no masked patches for a masked objective"));
        }
        let tokens = match tokenizer {
            Some(t) => t.tokenize_batch(&images)?,
            None => Vec::new(),
        };

        let mut tape = Tape::new();
        let p = weights.params.bind(&mut tape, |_| true);
        let enc = forward_images(&mut tape, &p, &bcfg, &images, Some(&masks), Mode::Train, Some(&mut drop_rng))?;
        let loss = match cfg.objective {
            Objective::Mim => {
                let pos: Vec<&[usize]> = masks.iter().map(MaskSet::positions).collect();
                let logits = head_at_positions(&mut tape, &p, &bcfg, enc.hidden, Head::Mim, &pos)?;
                let targets: Vec<usize> = masks
                    .iter()
                    .zip(&tokens)
                    .flat_map(|(m, t)| m.positions().iter().map(|&i| t.tokens[i]))
                    .collect();
                let loss = tape.cross_entropy(logits, &targets)?;
                window.add("accuracy", hits(tape.value(logits), &targets) as f64, targets.len() as f64);
                loss
            }
            Objective::MimAllPositions => {
                let all: Vec<usize> = (0..g * g).collect();
                let pos: Vec<&[usize]> = vec![&all[..]; images.len()];
                let logits = head_at_positions(&mut tape, &p, &bcfg, enc.hidden, Head::Mim, &pos)?;
                let targets: Vec<usize> = tokens.iter().flat_map(|t| t.tokens.iter().copied()).collect();
                let loss = tape.cross_entropy(logits, &targets)?;
                let pred = argmax_rows(tape.value(logits));
                let (mut mh, mut uh) = (0usize, 0usize);
                for (b, m) in masks.iter().enumerate() {
                    let flags = m.flags();
                    for i in 0..g * g {
                        let k = b * g * g + i;
                        if pred[k] == targets[k] {
                            if flags[i] {
                                mh += 1;
                            } else {
                                uh += 1;
                            }
                        }
                    }
                }
                let n_all = targets.len();
                window.add("accuracy", (mh + uh) as f64, n_all as f64);
                window.add("accuracy_masked", mh as f64, masked_total as f64);
                window.add("accuracy_unmasked", uh as f64, (n_all - masked_total) as f64);
                loss
            }
            Objective::Pixel => {
                let pos: Vec<&[usize]> = masks.iter().map(MaskSet::positions).collect();
                let pred = head_at_positions(&mut tape, &p, &bcfg, enc.hidden, Head::Pixel, &pos)?;
                let d = bcfg.patch_dim();
                let mut target = Vec::with_capacity(masked_total * d);
                for (img, m) in images.iter().zip(&masks) {
                    let t = pixel_stats.targets(img, bcfg.patch)?;
                    for &i in m.positions() {
                        target.extend_from_slice(&t[i * d..(i + 1) * d]);
                    }
                }
                let tv = tape.constant(Tensor::new([masked_total, d], target)?);
                tape.mse(pred, tv)?
            }
        };
        let loss_v = tape.value(loss).item() as f64;
        check_finite(step, "pre-training loss", loss_v)?;
        window.add("loss", loss_v, 1.0);
        window.add("masked_patches", masked_total as f64, images.len() as f64);

        let mut grads = tape.backward(loss)?;
        let grads = p.collect(&mut grads);
        drop(p);
        let norm = opt.step(&mut weights.params, grads, step)?;
        window.add("grad_norm", norm, 1.0);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            window.add("lr", opt.lr_at(step), 1.0);
            window.flush(step, &mut metrics);
        }
    }
    Ok(PretrainOutput { weights, metrics })
}

/// Masked image modeling: predict the tokenizer's visual tokens of masked
/// patches from the corrupted sequence.
/// Masks used at `step` of a run with `cfg` on a `grid x grid` patch grid.
/// They depend only on the seed, step, batch size, and mask config, so runs
/// that differ in objective alone see identical masks.
pub fn step_masks(cfg: &PretrainConfig, grid: usize, step: usize) -> Vec<MaskSet> {
    let mut rng = substream(cfg.seed, "pretrain-mask", step as u64);
    (0..cfg.batch).map(|_| draw_mask(grid, grid, &cfg.mask, &mut rng)).collect()
}

pub fn pretrain_mim(
    dataset: &[Image],
    tokenizer: &TokenizerWeights,
    backbone: &BackboneConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    let cfg = PretrainConfig {
        objective: Objective::Mim,
        ..cfg.clone()
    };
    pretrain(dataset, Some(tokenizer), BackboneWeights::init(backbone, cfg.seed)?, &cfg)
}

/// Regresses normalized raw pixels of masked patches.
pub fn pretrain_pixel(dataset: &[Image], backbone: &BackboneConfig, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    let cfg = PretrainConfig {
        objective: Objective::Pixel,
        ..cfg.clone()
    };
    pretrain(dataset, None, BackboneWeights::init(backbone, cfg.seed)?, &cfg)
}

/// Predicts visual tokens at every position, masked or not.
pub fn pretrain_all_tokens(
    dataset: &[Image],
    tokenizer: &TokenizerWeights,
    backbone: &BackboneConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    let cfg = PretrainConfig {
        objective: Objective::MimAllPositions,
        ..cfg.clone()
    };
    pretrain(dataset, Some(tokenizer), BackboneWeights::init(backbone, cfg.seed)?, &cfg)
}

/// Dispatches on `cfg.objective`, continuing from `init` when given.
pub fn run_pretrain(
    dataset: &[Image],
    tokenizer: Option<&TokenizerWeights>,
    backbone: &BackboneConfig,
    init: Option<BackboneWeights>,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    let init = match init {
        Some(w) => w,
        None => BackboneWeights::init(backbone, cfg.seed)?,
    };
    pretrain(dataset, tokenizer, init, cfg)
}

/// Held-out masked-token loss and top-1 accuracy in eval mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MimEval {
    pub loss: f64,
    pub accuracy: f64,
    pub masked: usize,
}

pub fn evaluate_mim(
    weights: &BackboneWeights,
    tokenizer: &TokenizerWeights,
    images: &[Image],
    mask: &BlockMaskConfig,
    seed: u64,
) -> Result<MimEval> {
    if weights.head().map(|h| h.0) != Some(Head::Mim) {
        return Err(Error::TaskMismatch {
            requested: "mim".into(),
            found: format!("{:?}", weights.head().map(|h| h.0)).to_lowercase(),
        });
    }
    let g = weights.config.grid();
    let (mut nll, mut hit, mut count) = (0.0, 0usize, 0usize);
    for (c, chunk) in images.chunks(64).enumerate() {
        let mut rng = substream(seed, "mim-eval", c as u64);
        let masks: Vec<MaskSet> = chunk.iter().map(|_| draw_mask(g, g, mask, &mut rng)).collect();
        let tokens = tokenizer.tokenize_batch(chunk)?;
        let targets: Vec<usize> = masks
            .iter()
            .zip(&tokens)
            .flat_map(|(m, t)| m.positions().iter().map(|&i| t.tokens[i]))
            .collect();
        if targets.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let p = weights.params.bind(&mut tape, |_| false);
        let enc = forward_images(&mut tape, &p, &weights.config, chunk, Some(&masks), Mode::Eval, None)?;
        let pos: Vec<&[usize]> = masks.iter().map(MaskSet::positions).collect();
        let logits = head_at_positions(&mut tape, &p, &weights.config, enc.hidden, Head::Mim, &pos)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        nll += tape.value(loss).item() as f64 * targets.len() as f64;
        hit += hits(tape.value(logits), &targets);
        count += targets.len();
    }
    let n = count.max(1) as f64;
    Ok(MimEval {
        loss: nll / n,
        accuracy: hit as f64 / n,
        masked: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_shapes_dataset;
    use crate::pipeline::metrics::series;
    use crate::tokenizer::TokenizerConfig;

    fn setup() -> (Vec<Image>, TokenizerWeights, BackboneConfig, PretrainConfig) {
        let images: Vec<Image> = generate_shapes_dataset(16, 8, 4, 0).into_iter().map(|e| e.image).collect();
        let tok = TokenizerWeights::init(
            &TokenizerConfig {
                image_size: 8,
                patch: 2,
                vocab: 8,
                hidden: 4,
                width: 8,
                code_dim: 4,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let bcfg = BackboneConfig {
            image_size: 8,
            patch: 2,
            layers: 1,
            dim: 8,
            heads: 2,
            mlp_dim: 16,
            ..Default::default()
        };
        let cfg = PretrainConfig {
            steps: 6,
            batch: 3,
            warmup_steps: 2,
            log_every: 1,
            mask: BlockMaskConfig {
                min_block: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        (images, tok, bcfg, cfg)
    }

    #[test]
    fn step_zero_loss_is_uniform_and_runs_reproduce() {
        let (images, tok, bcfg, cfg) = setup();
        let a = pretrain_mim(&images, &tok, &bcfg, &cfg).unwrap();
        let loss = series(&a.metrics, "train", "loss");
        assert!((loss[0].1 - 8f64.ln()).abs() < 1e-6);
        let b = pretrain_mim(&images, &tok, &bcfg, &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let (images, tok, bcfg, cfg) = setup();
        let cfg = PretrainConfig {
            peak_lr: 0.0,
            min_lr: 0.0,
            ..cfg
        };
        let out = pretrain_mim(&images, &tok, &bcfg, &cfg).unwrap();
        let mut init = BackboneWeights::init(&bcfg, cfg.seed).unwrap();
        init.attach_head(Head::Mim, 8);
        assert_eq!(out.weights, init);
    }

    #[test]
    fn pixel_objective_on_blank_images_is_zero() {
        let (_, _, bcfg, cfg) = setup();
        let blank = vec![Image::zeros(8, 8, 3); 4];
        let out = pretrain_pixel(&blank, &bcfg, &cfg).unwrap();
        assert!(series(&out.metrics, "train", "loss").iter().all(|&(_, v)| v == 0.0));
    }

    #[test]
    fn all_tokens_with_zero_ratio_runs() {
        let (images, tok, bcfg, cfg) = setup();
        let cfg = PretrainConfig {
            mask: BlockMaskConfig {
                ratio: 0.0,
                ..cfg.mask.clone()
            },
            ..cfg
        };
        let out = pretrain_all_tokens(&images, &tok, &bcfg, &cfg).unwrap();
        assert!(series(&out.metrics, "train", "loss").iter().all(|&(_, v)| v.is_finite()));
        assert!(pretrain_mim(&images, &tok, &bcfg, &cfg).is_err());
    }

    #[test]
    fn misaligned_tokenizer_rejected() {
        let (images, tok, bcfg, cfg) = setup();
        let bcfg = BackboneConfig { patch: 4, ..bcfg };
        assert!(pretrain_mim(&images, &tok, &bcfg, &cfg).is_err());
    }

    #[test]
    fn pixel_stats() {
        let imgs = vec![Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap()];
        let s = PixelStats::of(&imgs);
        assert_eq!((s.mean[0], s.std[0]), (0.5, 0.5));
        assert_eq!(s.targets(&imgs[0], 1).unwrap(), vec![-1.0, 1.0]);
    }
}
