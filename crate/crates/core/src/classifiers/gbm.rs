use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{best_mse_split, grow, Stopping, Tree};
use super::{check_dim, EmbeddingTable};
use crate::error::{Error, Result};
use crate::numerics::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmHyper {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
}

impl Default for GbmHyper {
    /// 1000 stages of depth-3 trees, learning rate 0.1.
    fn default() -> Self {
        Self {
            n_estimators: 1000,
            max_depth: 3,
            learning_rate: 0.1,
            min_samples_split: 2,
            min_samples_leaf: 1,
        }
    }
}

impl GbmHyper {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.min_samples_leaf == 0 || self.min_samples_split < 2 {
            return Err(Error::Domain("boosting needs max_depth >= 1, min_samples_leaf >= 1, min_samples_split >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbmClass {
    /// Log-odds of the training base rate, or `±inf` for a constant class.
    pub init: f64,
    pub trees: Vec<Tree>,
    pub constant: bool,
}

impl GbmClass {
    pub fn score(&self, x: &[f64], learning_rate: f64) -> f64 {
        self.init + learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbmModel {
    pub hyper: GbmHyper,
    pub dim: usize,
    pub classes: Vec<GbmClass>,
}

/// Binomial deviance `-2 Σ [y log p + (1 - y) log(1 - p)]` from raw scores.
pub fn deviance(scores: &[f64], y: &[bool]) -> f64 {
    scores
        .iter()
        .zip(y)
        .map(|(&f, &yi)| {
            // log(1 + e^f) - y f, computed without overflow
            let softplus = if f > 0.0 { f + (-f).exp().ln_1p() } else { f.exp().ln_1p() };
            2.0 * (softplus - if yi { f } else { 0.0 })
        })
        .sum()
}

fn fit_class(data: &EmbeddingTable, y: &[bool], hyper: &GbmHyper) -> GbmClass {
    let n = y.len();
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == n {
        let init = if pos == 0 { f64::NEG_INFINITY } else { f64::INFINITY };
        return GbmClass {
            init,
            trees: Vec::new(),
            constant: true,
        };
    }
    let p0 = pos as f64 / n as f64;
    let init = (p0 / (1.0 - p0)).ln();
    let stop = Stopping {
        max_depth: Some(hyper.max_depth),
        min_samples_split: hyper.min_samples_split,
        min_samples_leaf: hyper.min_samples_leaf,
    };
    let mut scores = vec![init; n];
    let mut trees = Vec::with_capacity(hyper.n_estimators);
    for _ in 0..hyper.n_estimators {
        let p: Vec<f64> = scores.iter().map(|&f| sigmoid(f)).collect();
        let residual: Vec<f64> = y.iter().zip(&p).map(|(&yi, pi)| yi as u8 as f64 - pi).collect();
        let is_pure = |idx: &[usize]| idx.iter().all(|&i| residual[i] == residual[idx[0]]);
        let newton = |idx: &[usize]| {
            let num: f64 = idx.iter().map(|&i| residual[i]).sum();
            let den: f64 = idx.iter().map(|&i| p[i] * (1.0 - p[i])).sum();
            if den.abs() < 1e-150 {
                0.0
            } else {
                num / den
            }
        };
        let tree = grow(data, (0..n).collect(), stop, is_pure, newton, |idx| {
            best_mse_split(data, &residual, idx, hyper.min_samples_leaf)
        });
        for (i, s) in scores.iter_mut().enumerate() {
            *s += hyper.learning_rate * tree.predict(data.row(i));
        }
        trees.push(tree);
    }
    GbmClass {
        init,
        trees,
        constant: false,
    }
}

pub fn fit_gbm(data: &EmbeddingTable, hyper: &GbmHyper) -> Result<GbmModel> {
    hyper.validate()?;
    let classes = (0..data.n_classes())
        .into_par_iter()
        .map(|k| fit_class(data, &data.class_targets(k), hyper))
        .collect();
    Ok(GbmModel {
        hyper: *hyper,
        dim: data.dim(),
        classes,
    })
}

impl GbmModel {
    pub fn predict_proba(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_dim(features, self.dim)?;
        Ok(features
            .par_iter()
            .map(|x| {
                self.classes
                    .iter()
                    .map(|c| sigmoid(c.score(x, self.hyper.learning_rate)))
                    .collect()
            })
            .collect())
    }

    /// Training deviance of class `k` after each stage, starting with the
    /// initial constant model.
    pub fn staged_deviance(&self, data: &EmbeddingTable, k: usize) -> Vec<f64> {
        let c = &self.classes[k];
        let y = data.class_targets(k);
        let mut scores = vec![c.init; data.len()];
        let mut out = vec![deviance(&scores, &y)];
        for t in &c.trees {
            for (i, s) in scores.iter_mut().enumerate() {
                *s += self.hyper.learning_rate * t.predict(data.row(i));
            }
            out.push(deviance(&scores, &y));
        }
        out
    }
}
