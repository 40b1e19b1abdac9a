//! Seeded random streams. Every consumer derives its own substream from
//! `(seed, purpose, index)` so results never depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gumbel, StandardNormal};

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: &str, index: u64) -> StreamRng {
    let mut h = splitmix(seed);
    for b in purpose.bytes() {
        h = splitmix(h ^ b as u64);
    }
    h = splitmix(h ^ index);
    ChaCha8Rng::seed_from_u64(h)
}

/// Standard Gumbel(0, 1) sample.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(Gumbel::new(0.0, 1.0).expect("unit Gumbel"))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
