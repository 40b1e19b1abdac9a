use rand::Rng;

use super::{Image, SegExample};
use crate::rng::substream;

/// Object classes of the procedural dataset; the class label of an example is
/// the index of its shape kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Frame,
    Bar,
}

pub const MAX_SHAPE_CLASSES: usize = 8;

impl ShapeKind {
    pub const ALL: [ShapeKind; MAX_SHAPE_CLASSES] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::Frame,
        ShapeKind::Bar,
    ];

    /// Whether offset `(dy, dx)` from the center, in units of the radius, is
    /// inside the shape.
    fn contains(self, dy: f32, dx: f32) -> bool {
        let (ay, ax) = (dy.abs(), dx.abs());
        match self {
            ShapeKind::Square => ay <= 0.8 && ax <= 0.8,
            ShapeKind::Disk => dy * dy + dx * dx <= 1.0,
            ShapeKind::Triangle => dy >= -0.9 && dy <= 0.8 && ax <= (dy + 0.9) * 0.55,
            ShapeKind::Cross => (ay <= 0.3 && ax <= 1.0) || (ax <= 0.3 && ay <= 1.0),
            ShapeKind::Ring => {
                let r2 = dy * dy + dx * dx;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Diamond => ay + ax <= 1.0,
            ShapeKind::Frame => ay.max(ax) <= 0.9 && ay.max(ax) >= 0.5,
            ShapeKind::Bar => ay <= 0.3 && ax <= 1.0,
        }
    }
}

/// Procedural dataset: one colored shape per image on a striped, noisy
/// background. Example `i` depends only on `(seed, i)`.
///
/// `num_classes` is clamped to `1..=MAX_SHAPE_CLASSES`.
pub fn generate_shapes_dataset(count: usize, size: usize, num_classes: usize, seed: u64) -> Vec<SegExample> {
    let k = num_classes.clamp(1, MAX_SHAPE_CLASSES);
    (0..count)
        .map(|i| generate_one(size, k, seed, i as u64))
        .collect()
}

fn generate_one(size: usize, k: usize, seed: u64, index: u64) -> SegExample {
    let mut rng = substream(seed, "shapes", index);
    let label = rng.gen_range(0..k);
    let kind = ShapeKind::ALL[label];

    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.3));
    let stripe_amp = rng.gen_range(0.02..0.08f32);
    let freq = rng.gen_range(0.15..0.6f32);
    let theta = rng.gen_range(0.0..std::f32::consts::PI);
    let (sin_t, cos_t) = theta.sin_cos();
    let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..1.0f32));

    let s = size as f32;
    let radius = rng.gen_range(s * 0.26..s * 0.4);
    let cy = rng.gen_range(radius..s - radius);
    let cx = rng.gen_range(radius..s - radius);

    let mut img = Image::zeros(size, size, 3);
    let mut seg = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            let inside = kind.contains((py - cy) / radius, (px - cx) / radius);
            let pix = if inside {
                seg[y * size + x] = (label + 1) as u8;
                color
            } else {
                let stripe = stripe_amp * (freq * (px * cos_t + py * sin_t)).sin();
                base.map(|b| b + stripe)
            };
            for (c, v) in pix.iter().enumerate() {
                let noise = rng.gen_range(-0.04..0.04f32);
                *img.at_mut(y, x, c) = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    SegExample {
        image: img,
        label,
        seg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(generate_shapes_dataset(4, 32, 3, 7), generate_shapes_dataset(4, 32, 3, 7));
        assert_ne!(generate_shapes_dataset(4, 32, 3, 7), generate_shapes_dataset(4, 32, 3, 8));
    }

    #[test]
    fn seg_labels_are_background_or_class() {
        for ex in generate_shapes_dataset(64, 32, 8, 1) {
            assert!(ex.seg.iter().all(|&v| v == 0 || v as usize == ex.label + 1));
            assert!(ex.seg.iter().any(|&v| v != 0), "shape drawn for class {}", ex.label);
            assert!(ex.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        let n = 3000;
        let mut hist = [0usize; 3];
        for ex in generate_shapes_dataset(n, 8, 3, 11) {
            hist[ex.label] += 1;
        }
        for h in hist {
            assert!((h as f64 - 1000.0).abs() <= 100.0, "{hist:?}");
        }
    }
}
