//! Attention-map rendering to binary PGM (P5) graymaps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneWeights;
use crate::data::Image;
use crate::error::{Error, Result};

/// Which query patches to render.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reference {
    All,
    Patches(Vec<usize>),
}

/// Min-max normalizes `values` to 0..=255. A constant input maps to 128.
pub fn normalize_to_u8(values: &[f32]) -> Vec<u8> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > min) {
        return vec![128; values.len()];
    }
    let span = (max - min) as f64;
    values
        .iter()
        .map(|&v| ((v - min) as f64 / span * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Nearest-neighbor upscale of a row-major `h x w` grid to `out_h x out_w`.
pub fn upscale_nearest(grid: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let gy = y * h / out_h;
        for x in 0..out_w {
            out.push(grid[gy * w + x * w / out_w]);
        }
    }
    out
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maxval 255 into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::invalid(format!("not a P5 graymap: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval is not 255"));
    }
    let data = &bytes[(i + 1).min(bytes.len())..];
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

/// Writes one graymap per (head, reference patch) for `layer` (1-indexed) and
/// returns the paths. Each map is that patch's attention over the patch grid
/// (the special token's column is dropped), scaled to the image size.
pub fn render_attention(
    weights: &BackboneWeights,
    image: &Image,
    reference: &Reference,
    layer: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let c = &weights.config;
    let (g, n, s) = (c.grid(), c.num_patches(), c.seq_len());
    let refs: Vec<usize> = match reference {
        Reference::All => (0..n).collect(),
        Reference::Patches(p) => {
            if let Some(&bad) = p.iter().find(|&&i| i >= n) {
                return Err(Error::invalid(format!("reference patch {bad} out of range for {n} patches")));
            }
            p.clone()
        }
    };
    let maps = weights.attention_maps(image, layer)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for head in 0..c.heads {
        for &r in &refs {
            let row = maps.row(head * s + 1 + r);
            let grid = normalize_to_u8(&row[1..]);
            let pixels = upscale_nearest(&grid, g, g, image.height, image.width);
            let path = out_dir.join(format!("attn_l{layer}_h{head}_p{r:03}.pgm"));
            fs::write(&path, encode_pgm(image.width, image.height, &pixels)).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Writes an image as an 8-bit graymap of its channel mean.
pub fn write_image_pgm(image: &Image, path: &Path) -> Result<()> {
    let c = image.channels;
    let gray: Vec<u8> = image
        .data
        .chunks(c)
        .map(|px| (px.iter().sum::<f32>() / c as f32 * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    fs::write(path, encode_pgm(image.width, image.height, &gray)).map_err(|e| Error::io(path, e))
}
