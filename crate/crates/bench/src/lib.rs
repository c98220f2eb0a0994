//! Input generators shared by the benchmarks.

use mocha_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-normalized log-posteriors `[t, v]`.
pub fn log_posteriors(t: usize, v: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = row.iter().sum();
        data.extend(row.iter().map(|x| (x / z).ln()));
    }
    Tensor::new(vec![t, v], data).unwrap()
}

/// Selection probabilities `[u, t]` in `(0, 1)`.
pub fn selection_probs(u: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![u, t], (0..u * t).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap()
}

/// Repeat-free labels in `1..v`.
pub fn labels(u: usize, v: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = Vec::with_capacity(u);
    while out.len() < u {
        let y = rng.random_range(1..v);
        if out.last() != Some(&y) {
            out.push(y);
        }
    }
    out
}
