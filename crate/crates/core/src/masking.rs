//! Blockwise and random masking of the patch grid, and replacement of masked
//! patch embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Masked positions on an `h x w` grid, stored as sorted flat indices
/// `i * w + j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub h: usize,
    pub w: usize,
    positions: Vec<usize>,
}

impl MaskSet {
    pub fn new(h: usize, w: usize, mut positions: Vec<usize>) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if let Some(&p) = positions.last() {
            if p >= h * w {
                return Err(Error::invalid(format!("mask position {p} outside {h}x{w} grid")));
            }
        }
        Ok(MaskSet { h, w, positions })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        MaskSet {
            h,
            w,
            positions: Vec::new(),
        }
    }

    pub fn all(h: usize, w: usize) -> Self {
        MaskSet {
            h,
            w,
            positions: (0..h * w).collect(),
        }
    }

    fn from_flags(h: usize, w: usize, flags: &[bool]) -> Self {
        MaskSet {
            h,
            w,
            positions: (0..h * w).filter(|&i| flags[i]).collect(),
        }
    }

    pub fn num_positions(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn contains(&self, i: usize) -> bool {
        self.positions.binary_search(&i).is_ok()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.num_positions()];
        for &p in &self.positions {
            f[p] = true;
        }
        f
    }

    pub fn ratio(&self) -> f64 {
        self.len() as f64 / self.num_positions() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Blockwise,
    Random,
}

/// Masking parameters. `ratio` is the target fraction of masked patches;
/// `cap`, when set, is a hard upper bound on `|M|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockMaskConfig {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub min_block: usize,
    pub aspect: [f64; 2],
    pub cap: Option<usize>,
}

impl Default for BlockMaskConfig {
    fn default() -> Self {
        BlockMaskConfig {
            strategy: MaskStrategy::Blockwise,
            ratio: 0.4,
            min_block: 16,
            aspect: [0.3, 1.0 / 0.3],
            cap: None,
        }
    }
}

impl BlockMaskConfig {
    /// A ratio of zero is allowed and yields empty masks.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::config("mask.ratio", format!("{} is not in [0, 1)", self.ratio)));
        }
        if self.min_block == 0 {
            return Err(Error::config("mask.min_block", "must be positive"));
        }
        let [lo, hi] = self.aspect;
        if !(lo > 0.0 && lo <= hi && (lo * hi - 1.0).abs() < 1e-9) {
            return Err(Error::config(
                "mask.aspect",
                format!("{:?} must be a reciprocal pair lo <= 1/lo", self.aspect),
            ));
        }
        if self.cap == Some(0) {
            return Err(Error::config("mask.cap", "must be positive when set"));
        }
        Ok(())
    }

    /// `ceil(ratio * n)`.
    pub fn target(&self, n: usize) -> usize {
        (self.ratio * n as f64 - 1e-9).ceil().max(0.0) as usize
    }
}

/// One rectangle drawn by [`blockwise_mask_blocks`], before union.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    /// Drawn patch count.
    pub s: usize,
    /// Drawn aspect ratio.
    pub r: f64,
    /// Extent before clamping to the grid.
    pub raw_rows: usize,
    pub raw_cols: usize,
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Block extents for size `s` and aspect `r`: `round(sqrt(s*r)) x round(sqrt(s/r))`.
pub fn block_dims(s: usize, r: f64) -> (usize, usize) {
    let s = s as f64;
    ((s * r).sqrt().round() as usize, (s / r).sqrt().round() as usize)
}

/// Consecutive rejected blocks after which a capped draw stops.
const MAX_CAP_REJECTIONS: usize = 10;

pub fn blockwise_mask<R: Rng + ?Sized>(h: usize, w: usize, cfg: &BlockMaskConfig, rng: &mut R) -> MaskSet {
    blockwise_mask_blocks(h, w, cfg, rng).0
}

/// Blockwise masking that also returns every drawn block.
pub fn blockwise_mask_blocks<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    cfg: &BlockMaskConfig,
    rng: &mut R,
) -> (MaskSet, Vec<Block>) {
    let n = h * w;
    let target = cfg.target(n);
    let mut flags = vec![false; n];
    let mut count = 0usize;
    let mut blocks = Vec::new();
    let mut rejections = 0;
    while count < target {
        let budget = (cfg.ratio * n as f64 - count as f64).floor();
        let s = if budget < cfg.min_block as f64 {
            cfg.min_block
        } else {
            rng.gen_range(cfg.min_block..=budget as usize)
        };
        let r = if cfg.aspect[1] > cfg.aspect[0] {
            rng.gen_range(cfg.aspect[0]..cfg.aspect[1])
        } else {
            cfg.aspect[0]
        };
        let (raw_rows, raw_cols) = block_dims(s, r);
        let rows = raw_rows.clamp(1, h);
        let cols = raw_cols.clamp(1, w);
        let top = rng.gen_range(0..=h - rows);
        let left = rng.gen_range(0..=w - cols);

        let added = (top..top + rows)
            .flat_map(|i| (left..left + cols).map(move |j| i * w + j))
            .filter(|&p| !flags[p])
            .count();
        if let Some(cap) = cfg.cap {
            if count + added > cap {
                rejections += 1;
                if rejections >= MAX_CAP_REJECTIONS {
                    break;
                }
                continue;
            }
        }
        rejections = 0;
        for i in top..top + rows {
            flags[i * w + left..i * w + left + cols].fill(true);
        }
        count += added;
        blocks.push(Block {
            s,
            r,
            raw_rows,
            raw_cols,
            top,
            left,
            rows,
            cols,
        });
        if cfg.cap.is_some_and(|c| count >= c) {
            break;
        }
    }
    (MaskSet::from_flags(h, w, &flags), blocks)
}

/// `count` positions of an `n`-patch sequence, uniformly without replacement.
/// The result is a single-row mask set (`h = 1`, `w = n`).
pub fn random_mask<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Result<MaskSet> {
    if count > n {
        return Err(Error::invalid(format!("cannot mask {count} of {n} positions")));
    }
    let positions = rand::seq::index::sample(rng, n, count).into_vec();
    MaskSet::new(1, n, positions)
}

/// Draws a mask on an `h x w` grid with the configured strategy. Random
/// masking uses the same count blockwise masking aims for, limited by `cap`.
pub fn draw_mask<R: Rng + ?Sized>(h: usize, w: usize, cfg: &BlockMaskConfig, rng: &mut R) -> MaskSet {
    match cfg.strategy {
        MaskStrategy::Blockwise => blockwise_mask(h, w, cfg, rng),
        MaskStrategy::Random => {
            let n = h * w;
            let count = cfg.target(n).min(cfg.cap.unwrap_or(n)).min(n);
            let m = random_mask(n, count, rng).expect("count <= n");
            MaskSet {
                h,
                w,
                positions: m.positions,
            }
        }
    }
}

/// Replaces rows of `patches` (`[N, D]`) at masked positions with `e_mask`.
pub fn apply_mask<T: Element>(patches: &Tensor<T>, mask: &MaskSet, e_mask: &[T]) -> Result<Tensor<T>> {
    let (n, d) = (patches.rows(), patches.cols());
    if patches.ndim() != 2 || e_mask.len() != d {
        return Err(Error::shape("apply_mask", patches.shape(), &[e_mask.len()]));
    }
    if mask.num_positions() != n {
        return Err(Error::invalid(format!(
            "mask over {} positions applied to {n} patches",
            mask.num_positions()
        )));
    }
    let mut out = patches.clone();
    for &p in mask.positions() {
        out.data_mut()[p * d..(p + 1) * d].copy_from_slice(e_mask);
    }
    Ok(out)
}
