use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{best_gini_split, grow, random_gini_split, FeatureSampler, Stopping, Tree};
use super::{check_dim, EmbeddingTable};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForestKind {
    Rf,
    Xrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestHyper {
    pub n_estimators: usize,
    /// `None` grows until the other stopping rules apply.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// `None` means `ceil(sqrt(D))`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl ForestHyper {
    /// Full-size random-forest setting: 2000 trees, depth 10, split 2, leaf 2.
    pub fn rf_full() -> Self {
        Self {
            n_estimators: 2000,
            max_depth: Some(10),
            min_samples_split: 2,
            min_samples_leaf: 2,
            max_features: None,
            bootstrap: true,
        }
    }

    /// Full-size extra-trees setting: 2000 trees, depth 10, split 5, leaf 1.
    pub fn xrt_full() -> Self {
        Self {
            n_estimators: 2000,
            max_depth: Some(10),
            min_samples_split: 5,
            min_samples_leaf: 1,
            max_features: None,
            bootstrap: false,
        }
    }

    pub fn full(kind: ForestKind) -> Self {
        match kind {
            ForestKind::Rf => Self::rf_full(),
            ForestKind::Xrt => Self::xrt_full(),
        }
    }

    /// The full setting with 200 trees.
    pub fn desk(kind: ForestKind) -> Self {
        Self {
            n_estimators: 200,
            ..Self::full(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 || self.min_samples_leaf == 0 || self.min_samples_split < 2 {
            return Err(Error::Domain(
                "forest needs n_estimators >= 1, min_samples_leaf >= 1, min_samples_split >= 2".into(),
            ));
        }
        if self.max_features == Some(0) || self.max_depth == Some(0) {
            return Err(Error::Domain("max_features and max_depth must be positive".into()));
        }
        Ok(())
    }

    pub fn features_per_split(&self, dim: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
            .clamp(1, dim.max(1))
    }
}

/// One-vs-rest forests, one per target class.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub kind: ForestKind,
    pub hyper: ForestHyper,
    pub seed: u64,
    pub dim: usize,
    /// `classes[k]` holds the trees of class `k`.
    pub classes: Vec<Vec<Tree>>,
    /// Classes whose training targets were single-valued.
    pub constant: Vec<bool>,
}

pub fn fit_forest(data: &EmbeddingTable, kind: ForestKind, hyper: &ForestHyper, seed: u64) -> Result<ForestModel> {
    hyper.validate()?;
    let n = data.len();
    let dim = data.dim();
    let mtry = hyper.features_per_split(dim);
    let stop = Stopping {
        max_depth: hyper.max_depth,
        min_samples_split: hyper.min_samples_split,
        min_samples_leaf: hyper.min_samples_leaf,
    };
    let root = RngStream::new(seed, 0).split_named("per-tree");
    let jobs: Vec<(usize, usize)> = (0..data.n_classes())
        .flat_map(|k| (0..hyper.n_estimators).map(move |t| (k, t)))
        .collect();
    let targets: Vec<Vec<bool>> = (0..data.n_classes()).map(|k| data.class_targets(k)).collect();

    let trees: Vec<Tree> = jobs
        .par_iter()
        .map(|&(k, t)| {
            let y = &targets[k];
            let mut rng = root.split(k as u64).split(t as u64);
            let samples: Vec<usize> = if hyper.bootstrap {
                (0..n).map(|_| rng.index(n)).collect()
            } else {
                (0..n).collect()
            };
            let mut sampler = FeatureSampler::new(dim);
            let is_pure = |idx: &[usize]| {
                let first = y[idx[0]];
                idx.iter().all(|&i| y[i] == first)
            };
            let leaf = |idx: &[usize]| idx.iter().filter(|&&i| y[i]).count() as f64 / idx.len() as f64;
            match kind {
                ForestKind::Rf => grow(data, samples, stop, is_pure, leaf, |idx| {
                    best_gini_split(data, y, idx, stop.min_samples_leaf, mtry, &mut sampler, &mut rng)
                }),
                ForestKind::Xrt => grow(data, samples, stop, is_pure, leaf, |idx| {
                    random_gini_split(data, y, idx, stop.min_samples_leaf, mtry, &mut sampler, &mut rng)
                }),
            }
        })
        .collect();

    let mut classes = Vec::with_capacity(data.n_classes());
    let mut it = trees.into_iter();
    for _ in 0..data.n_classes() {
        classes.push(it.by_ref().take(hyper.n_estimators).collect());
    }
    let constant = targets.iter().map(|y| y.iter().all(|&v| v == y[0])).collect();
    Ok(ForestModel {
        kind,
        hyper: *hyper,
        seed,
        dim,
        classes,
        constant,
    })
}

impl ForestModel {
    pub fn predict_proba(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_dim(features, self.dim)?;
        Ok(features
            .par_iter()
            .map(|x| {
                self.classes
                    .iter()
                    .map(|trees| trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64)
                    .collect()
            })
            .collect())
    }
}
