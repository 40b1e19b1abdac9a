use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Random resized crop, horizontal flip, and color jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image area.
    pub scale: [f64; 2],
    /// Crop aspect ratio (width / height), sampled log-uniformly.
    pub ratio: [f64; 2],
    pub flip_prob: f64,
    /// Brightness, contrast, and saturation factors are drawn from
    /// `[1 - jitter, 1 + jitter]`.
    pub color_jitter: f64,
    /// Output side length; `None` keeps the input dimensions.
    pub resolution: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale: [0.4, 1.0],
            ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            color_jitter: 0.4,
            resolution: None,
        }
    }
}

impl AugmentConfig {
    /// Augmentation that returns its input unchanged.
    pub fn identity() -> Self {
        AugmentConfig {
            scale: [1.0, 1.0],
            ratio: [1.0, 1.0],
            flip_prob: 0.0,
            color_jitter: 0.0,
            resolution: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [s0, s1] = self.scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::config("augment.scale", format!("{:?} is not within (0, 1]", self.scale)));
        }
        let [r0, r1] = self.ratio;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::config("augment.ratio", format!("{:?} is not an increasing positive range", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("augment.flip_prob", "must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.color_jitter) {
            return Err(Error::config("augment.color_jitter", "must be in [0, 1)"));
        }
        if self.resolution == Some(0) {
            return Err(Error::config("augment.resolution", "must be positive"));
        }
        Ok(())
    }
}

pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let (top, left, ch, cw) = sample_crop(img.height, img.width, cfg, rng);
    let side_h = cfg.resolution.unwrap_or(img.height);
    let side_w = cfg.resolution.unwrap_or(img.width);
    let mut out = resize_crop(img, top, left, ch, cw, side_h, side_w);
    if cfg.flip_prob > 0.0 && rng.gen::<f64>() < cfg.flip_prob {
        flip_horizontal(&mut out);
    }
    if cfg.color_jitter > 0.0 {
        let j = cfg.color_jitter;
        let b = rng.gen_range(1.0 - j..=1.0 + j) as f32;
        let c = rng.gen_range(1.0 - j..=1.0 + j) as f32;
        let s = rng.gen_range(1.0 - j..=1.0 + j) as f32;
        jitter(&mut out, b, c, s);
    }
    out
}

fn sample_crop<R: Rng + ?Sized>(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.ratio[0].ln(), cfg.ratio[1].ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.scale[0], cfg.scale[1]);
        let aspect = uniform(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    // Fall back to the largest centered crop within the aspect bounds.
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.ratio[0] {
        (((w as f64) / cfg.ratio[0]).round() as usize, w)
    } else if in_ratio > cfg.ratio[1] {
        (h, ((h as f64) * cfg.ratio[1]).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Bilinear resampling of a crop with half-pixel centers and edge clamping.
fn resize_crop(img: &Image, top: usize, left: usize, ch: usize, cw: usize, oh: usize, ow: usize) -> Image {
    let c = img.channels;
    if (ch, cw) == (oh, ow) {
        let mut out = Image::zeros(oh, ow, c);
        for y in 0..oh {
            let src = ((top + y) * img.width + left) * c;
            out.data[y * ow * c..(y + 1) * ow * c].copy_from_slice(&img.data[src..src + ow * c]);
        }
        return out;
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let s = n_in as f32 / n_out as f32;
        (0..n_out)
            .map(|o| {
                let x = ((o as f32 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f32);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, x - i0 as f32)
            })
            .collect()
    };
    let ty = taps(ch, oh);
    let tx = taps(cw, ow);
    let mut out = Image::zeros(oh, ow, c);
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            for k in 0..c {
                let p = |yy: usize, xx: usize| img.at(top + yy, left + xx, k);
                let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                *out.at_mut(y, x, k) = v;
            }
        }
    }
    out
}

fn flip_horizontal(img: &mut Image) {
    let (w, c) = (img.width, img.channels);
    for row in img.data.chunks_exact_mut(w * c) {
        for x in 0..w / 2 {
            for k in 0..c {
                row.swap(x * c + k, (w - 1 - x) * c + k);
            }
        }
    }
}

fn gray(px: &[f32]) -> f32 {
    if px.len() >= 3 {
        0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
    } else {
        px[0]
    }
}

fn jitter(img: &mut Image, brightness: f32, contrast: f32, saturation: f32) {
    let c = img.channels;
    img.data.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));

    let mean = img.data.chunks_exact(c).map(gray).sum::<f32>() / (img.height * img.width) as f32;
    img.data
        .iter_mut()
        .for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));

    for px in img.data.chunks_exact_mut(c) {
        let g = gray(px);
        px.iter_mut()
            .for_each(|v| *v = ((*v - g) * saturation + g).clamp(0.0, 1.0));
    }
}
