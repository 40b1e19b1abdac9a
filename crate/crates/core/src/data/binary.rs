use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Image, LabeledExample, SegExample};
use crate::error::{Error, Result};

/// Fixed record layout: one label byte followed by `H*W*C` pixel bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryLayout {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl BinaryLayout {
    pub fn record_len(&self) -> usize {
        1 + self.height * self.width * self.channels
    }
}

pub fn read_binary_dataset(path: &Path, layout: &BinaryLayout) -> Result<Vec<LabeledExample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, layout)
}

fn parse_records(bytes: &[u8], layout: &BinaryLayout) -> Result<Vec<LabeledExample>> {
    let rec = layout.record_len();
    if rec == 1 || layout.num_classes == 0 || layout.num_classes > 256 {
        return Err(Error::invalid(format!("degenerate binary layout {layout:?}")));
    }
    if bytes.len() % rec != 0 {
        return Err(Error::Dataset {
            offset: (bytes.len() / rec * rec) as u64,
            msg: format!(
                "truncated record: {} trailing bytes, record size is {rec}",
                bytes.len() % rec
            ),
        });
    }
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, chunk)| {
            let label = chunk[0] as usize;
            if label >= layout.num_classes {
                return Err(Error::Dataset {
                    offset: (i * rec) as u64,
                    msg: format!("label {label} out of range for {} classes", layout.num_classes),
                });
            }
            let data = chunk[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledExample {
                image: Image::new(layout.height, layout.width, layout.channels, data)?,
                label,
            })
        })
        .collect()
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes examples in the layout read by [`read_binary_dataset`]; pixels are
/// quantized to bytes.
pub fn write_binary_dataset(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        if ex.label > u8::MAX as usize {
            return Err(Error::invalid(format!("label {} does not fit a byte", ex.label)));
        }
        out.push(ex.label as u8);
        out.extend(ex.image.data.iter().map(|&v| quantize(v)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Segmentation maps stored back to back, `H*W` bytes each.
pub fn write_seg_maps(path: &Path, examples: &[SegExample]) -> Result<()> {
    let out: Vec<u8> = examples.iter().flat_map(|e| e.seg.iter().copied()).collect();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads maps written by [`write_seg_maps`]; every value must be below
/// `num_seg_classes`.
pub fn read_seg_maps(path: &Path, height: usize, width: usize, num_seg_classes: usize) -> Result<Vec<Vec<u8>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rec = height * width;
    if rec == 0 || bytes.len() % rec != 0 {
        return Err(Error::Dataset {
            offset: if rec == 0 { 0 } else { (bytes.len() / rec * rec) as u64 },
            msg: format!("segmentation file is not a whole number of {height}x{width} maps"),
        });
    }
    if let Some(pos) = bytes.iter().position(|&b| b as usize >= num_seg_classes) {
        return Err(Error::Dataset {
            offset: pos as u64,
            msg: format!("segment label {} out of range for {num_seg_classes} classes", bytes[pos]),
        });
    }
    Ok(bytes.chunks_exact(rec).map(<[u8]>::to_vec).collect())
}
