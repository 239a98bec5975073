#![allow(dead_code)]

use moek::numkit::RealMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> RealMatrix {
    RealMatrix::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi)).unwrap()
}

/// Activations with correlated channels: a random mix of fewer latent
/// signals plus noise.
pub fn correlated(rng: &mut ChaCha8Rng, channels: usize, tokens: usize) -> RealMatrix {
    let latent = (channels / 2).max(1);
    let mix = uniform(rng, channels, latent, -1.0, 1.0);
    let z = uniform(rng, latent, tokens, -1.0, 1.0);
    let noise = uniform(rng, channels, tokens, -0.1, 0.1);
    moek::numkit::matmul(&mix, &z).unwrap().add(&noise).unwrap()
}

pub const OUTLIER_FACTOR: f64 = 100.0;

/// Weights `out x in` and calibration activations `in x tokens` where a few
/// input channels are scaled up by [`OUTLIER_FACTOR`].
pub fn outlier_fixture(seed: u64) -> (RealMatrix, RealMatrix) {
    let (out, inp, tokens) = (8, 16, 64);
    let mut r = rng(seed);
    let w = uniform(&mut r, out, inp, -1.0, 1.0);
    let mut x = uniform(&mut r, inp, tokens, -1.0, 1.0).into_vec();
    let c1 = r.gen_range(0..inp);
    let c2 = (c1 + 1 + r.gen_range(0..inp - 1)) % inp;
    for c in [c1, c2] {
        for v in &mut x[c * tokens..(c + 1) * tokens] {
            *v *= OUTLIER_FACTOR;
        }
    }
    (w, RealMatrix::new(inp, tokens, x).unwrap())
}
