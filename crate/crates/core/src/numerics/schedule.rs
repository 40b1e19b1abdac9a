use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from zero followed by cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, min_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        let s = LrSchedule {
            peak_lr,
            min_lr,
            warmup_steps,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::invalid(format!(
                "need 0 <= min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            )));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::invalid(format!(
                "need warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Learning rate at `step`; steps past the end clamp to `min_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(step, self)
    }
}

pub fn cosine_lr(step: usize, s: &LrSchedule) -> f64 {
    if step >= s.total_steps {
        return s.min_lr;
    }
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Which depth a parameter belongs to for layer-wise learning-rate decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerGroup {
    /// Patch projection, position embeddings, special/mask embeddings.
    Embedding,
    /// Transformer block, 1-indexed from the input.
    Block(usize),
    /// Final norm and task heads.
    Top,
}

/// Multipliers for layer-wise decay `d` over `num_layers` blocks: the top gets
/// 1, block `l` gets `d^(L+1-l)`, embeddings get `d^(L+1)`.
pub fn layer_lr_multipliers(num_layers: usize, decay: f64) -> Result<Vec<(LayerGroup, f64)>> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::invalid(format!("layer decay {decay} not in (0, 1]")));
    }
    let l = num_layers as i32;
    let mut out = vec![(LayerGroup::Top, 1.0)];
    for block in (1..=num_layers).rev() {
        out.push((LayerGroup::Block(block), decay.powi(l + 1 - block as i32)));
    }
    out.push((LayerGroup::Embedding, decay.powi(l + 1)));
    Ok(out)
}

/// Multiplier for a single group; see [`layer_lr_multipliers`].
pub fn layer_lr_multiplier(group: LayerGroup, num_layers: usize, decay: f64) -> f64 {
    let l = num_layers as i32;
    match group {
        LayerGroup::Top => 1.0,
        LayerGroup::Block(b) => decay.powi(l + 1 - b as i32),
        LayerGroup::Embedding => decay.powi(l + 1),
    }
}
