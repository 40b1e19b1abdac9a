//! Images, datasets, augmentation, and the patch view of an image.

mod augment;
mod binary;
mod patch;
mod shapes;

pub use augment::{augment, AugmentConfig};
pub use binary::{read_binary_dataset, read_seg_maps, write_binary_dataset, write_seg_maps, BinaryLayout};
pub use patch::{patchify, unpatchify, PatchGrid};
pub use shapes::{generate_shapes_dataset, ShapeKind, MAX_SHAPE_CLASSES};

use crate::error::{Error, Result};

/// Row-major `H x W x C` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f32 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel-first copy (`C x H x W`), the layout convolutions consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.data.len()];
        let hw = self.height * self.width;
        for p in 0..hw {
            for c in 0..self.channels {
                out[c * hw + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f32]) -> Result<Self> {
        let hw = height * width;
        if chw.len() != hw * channels {
            return Err(Error::invalid("from_chw: length mismatch"));
        }
        let mut data = vec![0.0; chw.len()];
        for p in 0..hw {
            for c in 0..channels {
                data[p * channels + c] = chw[c * hw + p];
            }
        }
        Image::new(height, width, channels, data)
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Image with a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

/// Image with a class label and a per-pixel label map (`0` = background,
/// `label + 1` on the object).
#[derive(Clone, Debug, PartialEq)]
pub struct SegExample {
    pub image: Image,
    pub label: usize,
    pub seg: Vec<u8>,
}

impl SegExample {
    pub fn labeled(&self) -> LabeledExample {
        LabeledExample {
            image: self.image.clone(),
            label: self.label,
        }
    }
}
