use rayon::prelude::*;

use super::{check_dim, EmbeddingTable};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 10;

/// Lazy learner over a stored embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub table: EmbeddingTable,
}

pub fn fit_knn(data: &EmbeddingTable, k: usize) -> Result<KnnModel> {
    if k == 0 || k > data.len() {
        return Err(Error::Domain(format!("k = {k} must lie in 1..={}", data.len())));
    }
    Ok(KnnModel {
        k,
        table: data.clone(),
    })
}

impl KnnModel {
    /// Indices of the `k` nearest stored rows by Euclidean distance, nearest
    /// first; equal distances prefer the lower row index.
    pub fn neighbors(&self, x: &[f64]) -> Vec<usize> {
        let mut dist: Vec<(f64, usize)> = (0..self.table.len())
            .map(|i| {
                let d2: f64 = self.table.row(i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < dist.len() {
            dist.select_nth_unstable_by(self.k - 1, by_distance);
            dist.truncate(self.k);
        }
        dist.sort_by(by_distance);
        dist.into_iter().map(|(_, i)| i).collect()
    }

    pub fn predict_proba(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_dim(features, self.table.dim())?;
        Ok(features
            .par_iter()
            .map(|x| {
                let nn = self.neighbors(x);
                (0..self.table.n_classes())
                    .map(|c| nn.iter().filter(|&&i| self.table.target(i, c)).count() as f64 / self.k as f64)
                    .collect()
            })
            .collect())
    }
}
