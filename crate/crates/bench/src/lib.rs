//! Shared inputs for the benchmarks.

use lbe_core::classifiers::EmbeddingTable;
use lbe_core::numerics::RngStream;

/// `n` rows of `dim` Gaussian features with two classes that depend on the
/// first three features.
pub fn gaussian_table(n: usize, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = RngStream::new(seed, 0);
    let mut features = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        targets.push(vec![x[0] + 0.5 * rng.normal() > 0.3, x[1] - x[2] > 0.0]);
        features.push(x);
    }
    let ids = (0..n).map(|i| format!("r{i}")).collect();
    EmbeddingTable::new(ids, &features, vec!["a".into(), "b".into()], &targets).expect("valid table")
}

/// `n` uniform values in `[0, 1)`.
pub fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, 0);
    (0..n).map(|_| rng.unit()).collect()
}
