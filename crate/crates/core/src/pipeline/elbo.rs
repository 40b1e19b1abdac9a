use serde::{Deserialize, Serialize};

use crate::backbone::{forward_images, head_at_positions, BackboneWeights, Head, Mode};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::masking::{draw_mask, BlockMaskConfig, MaskSet};
use crate::numerics::{Tape, Tensor};
use crate::rng::substream;
use crate::tokenizer::{mean_mse, TokenizerWeights};

/// Both terms of the two-stage variational bound, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    /// Mean of log p(x | argmax tokens) under a unit-variance Gaussian decoder.
    pub stage1_term: f64,
    /// Mean over images of the summed masked-position log-likelihood of the
    /// tokenizer's argmax tokens.
    pub stage2_term: f64,
    pub batch: usize,
    /// Mean masked positions per image.
    pub mean_masked: f64,
    /// Training-style cross-entropy per masked token over the batch.
    pub loss_per_token: f64,
}

impl ElboReport {
    pub fn total(&self) -> f64 {
        self.stage1_term + self.stage2_term
    }
}

/// Log-density of `x` under N(`mean`, I), summed over every pixel value.
pub fn gaussian_log_density(x: &Image, mean: &Image) -> f64 {
    let d = x.data.len() as f64;
    let sq: f64 = x.data.iter().zip(&mean.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    -0.5 * sq - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row[target] as f64 - lse
}

pub fn evaluate_elbo(
    images: &[Image],
    tokenizer: &TokenizerWeights,
    weights: &BackboneWeights,
    mask: &BlockMaskConfig,
    seed: u64,
) -> Result<ElboReport> {
    if images.is_empty() {
        return Err(Error::invalid("the bound needs at least one image"));
    }
    if weights.head().map(|h| h.0) != Some(Head::Mim) {
        return Err(Error::TaskMismatch {
            requested: "mim".into(),
            found: format!("{:?}", weights.head().map(|h| h.0)).to_lowercase(),
        });
    }
    let g = weights.config.grid();
    if tokenizer.config.grid() != g {
        return Err(Error::invalid("tokenizer grid does not match the patch grid"));
    }
    let (mut stage1, mut stage2, mut ce_sum, mut masked) = (0.0, 0.0, 0.0, 0usize);
    for (c, chunk) in images.chunks(64).enumerate() {
        let tokens = tokenizer.tokenize_batch(chunk)?;
        let recon = tokenizer.decode_batch(&tokens)?;
        stage1 += chunk.iter().zip(&recon).map(|(x, r)| gaussian_log_density(x, r)).sum::<f64>();

        let mut rng = substream(seed, "elbo-mask", c as u64);
        let masks: Vec<MaskSet> = chunk.iter().map(|_| draw_mask(g, g, mask, &mut rng)).collect();
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
        ce_sum += tape.value(loss).item() as f64 * targets.len() as f64;
        let lv: &Tensor = tape.value(logits);
        stage2 += targets.iter().enumerate().map(|(r, &t)| log_softmax_at(lv.row(r), t)).sum::<f64>();
        masked += targets.len();
    }
    let n = images.len() as f64;
    Ok(ElboReport {
        stage1_term: stage1 / n,
        stage2_term: stage2 / n,
        batch: images.len(),
        mean_masked: masked as f64 / n,
        loss_per_token: if masked == 0 { 0.0 } else { ce_sum / masked as f64 },
    })
}

/// Reconstruction error of the tokenizer alone, for reporting next to the bound.
pub fn tokenizer_recon_mse(images: &[Image], tokenizer: &TokenizerWeights) -> Result<f64> {
    let grids = tokenizer.tokenize_batch(images)?;
    Ok(mean_mse(images, &tokenizer.decode_batch(&grids)?))
}
