#![allow(dead_code)]

use moek::numkit::RealMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> RealMatrix {
    RealMatrix::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi)).unwrap()
}

/// Straight triple loop, no skipping.
pub fn naive_matmul(a: &RealMatrix, b: &RealMatrix) -> RealMatrix {
    assert_eq!(a.cols(), b.rows());
    RealMatrix::from_fn(a.rows(), b.cols(), |i, j| {
        let mut s = 0.0;
        for k in 0..a.cols() {
            s += a.get(i, k) * b.get(k, j);
        }
        s
    })
    .unwrap()
}

pub fn rel_err(a: &RealMatrix, b: &RealMatrix) -> f64 {
    let d = a.sub(b).unwrap().frobenius_norm();
    let n = b.frobenius_norm();
    if n == 0.0 {
        d
    } else {
        d / n
    }
}

pub fn matrix(rows: usize, cols: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = RealMatrix> {
    prop::collection::vec(range, rows * cols)
        .prop_map(move |v| RealMatrix::new(rows, cols, v).unwrap())
}

pub fn any_matrix(max_dim: usize) -> impl Strategy<Value = RealMatrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| matrix(r, c, -10.0..10.0))
}

/// Low-rank mixture plus a little noise, so channels are strongly correlated.
pub fn correlated(rng: &mut ChaCha8Rng, channels: usize, tokens: usize) -> RealMatrix {
    let latent = (channels / 2).max(1);
    let mix = uniform(rng, channels, latent, -1.0, 1.0);
    let z = uniform(rng, latent, tokens, -1.0, 1.0);
    let noise = uniform(rng, channels, tokens, -0.1, 0.1);
    naive_matmul(&mix, &z).add(&noise).unwrap()
}

/// Integration tests have no lib.rs next to them for regression files.
pub fn config() -> ProptestConfig {
    ProptestConfig {
        failure_persistence: Some(Box::new(prop::test_runner::FileFailurePersistence::Off)),
        ..ProptestConfig::default()
    }
}
