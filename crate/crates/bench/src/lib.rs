//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use survens_core::SurvivalDataset;

/// Exponential PH cohort with unit coefficients on the first half of the columns.
pub fn cohort(n: usize, p: usize, seed: u64) -> SurvivalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut rng));
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for i in 0..n {
        let eta: f64 = (0..p / 2).map(|j| x[[i, j]]).sum();
        let t = -rng.random::<f64>().ln() / eta.exp();
        let c = -rng.random::<f64>().ln() / 0.3;
        time.push(t.min(c));
        event.push(t <= c);
    }
    SurvivalDataset::new(
        x,
        (0..p).map(|j| format!("x{j}")).collect(),
        time,
        event,
        (0..n).map(|i| i.to_string()).collect(),
    )
    .unwrap()
}

pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}
