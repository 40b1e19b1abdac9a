use super::Image;
use crate::error::{Error, Result};

/// An image split into `grid_h x grid_w` square patches, each flattened in
/// `(row, col, channel)` order; patches are stored in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PatchGrid {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Number of stored patch vectors.
    pub fn len(&self) -> usize {
        self.data.len() / self.patch_dim().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn patch_vec(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.data[i * d..(i + 1) * d]
    }
}

pub fn patchify(img: &Image, patch: usize) -> Result<PatchGrid> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(Error::invalid(format!(
            "image {}x{} is not divisible by patch size {patch}",
            img.height, img.width
        )));
    }
    let (gh, gw, c) = (img.height / patch, img.width / patch, img.channels);
    let mut data = Vec::with_capacity(img.data.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * img.width + gx * patch) * c;
                data.extend_from_slice(&img.data[start..start + patch * c]);
            }
        }
    }
    Ok(PatchGrid {
        grid_h: gh,
        grid_w: gw,
        patch,
        channels: c,
        data,
    })
}

pub fn unpatchify(
    grid: &PatchGrid,
    patch: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Image> {
    let consistent = patch > 0
        && grid.patch == patch
        && grid.channels == channels
        && height % patch == 0
        && width % patch == 0
        && grid.grid_h == height / patch
        && grid.grid_w == width / patch
        && grid.data.len() == height * width * channels;
    if !consistent {
        return Err(Error::invalid(format!(
            "patch grid ({} values, {}x{} grid, P={}) does not describe a {height}x{width}x{channels} image with P={patch}",
            grid.data.len(),
            grid.grid_h,
            grid.grid_w,
            grid.patch
        )));
    }
    let mut img = Image::zeros(height, width, channels);
    let row = patch * channels;
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let pv = grid.patch_vec(gy * grid.grid_w + gx);
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * width + gx * patch) * channels;
                img.data[start..start + row].copy_from_slice(&pv[py * row..(py + 1) * row]);
            }
        }
    }
    Ok(img)
}
