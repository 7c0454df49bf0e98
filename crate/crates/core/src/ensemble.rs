//! Averaging ensembles over aligned prediction matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::binary_entropy;

/// Row-major `rows x cols` matrix of probabilities with a provenance tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub tag: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl PredictionMatrix {
    pub fn new(tag: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self {
            tag: tag.into(),
            rows,
            cols,
            values,
        })
    }

    pub fn from_rows(tag: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged prediction rows".into()));
        }
        Self::new(tag, rows.len(), cols, rows.concat())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleMethod {
    SimpleAvg,
    /// `(1/N) Σ (1 − H(y)) y`.
    EntropyAvg,
    /// `Σ (1 − H(y)) y / Σ (1 − H(y))`.
    EntropyAvgNormalized,
}

impl EnsembleMethod {
    pub fn name(self) -> &'static str {
        match self {
            EnsembleMethod::SimpleAvg => "simple-avg",
            EnsembleMethod::EntropyAvg => "entropy-avg",
            EnsembleMethod::EntropyAvgNormalized => "entropy-avg-normalized",
        }
    }
}

impl std::str::FromStr for EnsembleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple-avg" => Ok(EnsembleMethod::SimpleAvg),
            "entropy-avg" => Ok(EnsembleMethod::EntropyAvg),
            "entropy-avg-normalized" => Ok(EnsembleMethod::EntropyAvgNormalized),
            other => Err(Error::Config(format!("unknown ensemble method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub method: EnsembleMethod,
    pub members: Vec<String>,
    pub prediction: PredictionMatrix,
}

fn check_members(members: &[PredictionMatrix]) -> Result<(usize, usize)> {
    let first = members
        .first()
        .ok_or_else(|| Error::Shape("an ensemble needs at least one member".into()))?;
    for m in members {
        if (m.rows, m.cols) != (first.rows, first.cols) {
            return Err(Error::Shape(format!(
                "member {} is {}x{}, expected {}x{}",
                m.tag, m.rows, m.cols, first.rows, first.cols
            )));
        }
    }
    Ok((first.rows, first.cols))
}

fn combine(
    members: &[PredictionMatrix],
    method: EnsembleMethod,
    cell: impl Fn(&mut dyn Iterator<Item = f64>) -> Result<f64>,
) -> Result<EnsembleOutput> {
    let (rows, cols) = check_members(members)?;
    let values = (0..rows * cols)
        .map(|i| cell(&mut members.iter().map(|m| m.values[i])))
        .collect::<Result<Vec<f64>>>()?;
    let tags: Vec<String> = members.iter().map(|m| m.tag.clone()).collect();
    Ok(EnsembleOutput {
        method,
        prediction: PredictionMatrix {
            tag: method.name().to_string(),
            rows,
            cols,
            values,
        },
        members: tags,
    })
}

/// Mean of `terms`, clamped to their range so that rounding can never move
/// it outside; identical terms average to themselves bitwise.
fn mean(terms: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut lo, mut hi, mut n) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0usize);
    for t in terms {
        sum += t;
        lo = lo.min(t);
        hi = hi.max(t);
        n += 1;
    }
    (sum / n as f64).clamp(lo, hi)
}

pub fn simple_average(members: &[PredictionMatrix]) -> Result<EnsembleOutput> {
    combine(members, EnsembleMethod::SimpleAvg, |ys| Ok(mean(ys)))
}

pub fn entropy_weighted_average(members: &[PredictionMatrix], normalized: bool) -> Result<EnsembleOutput> {
    let n = members.len() as f64;
    if normalized {
        combine(members, EnsembleMethod::EntropyAvgNormalized, |ys| {
            let (mut num, mut den, mut plain) = (0.0, 0.0, 0.0);
            for y in ys {
                let w = 1.0 - binary_entropy(y)?;
                num += w * y;
                den += w;
                plain += y;
            }
            Ok(if den > 0.0 { num / den } else { plain / n })
        })
    } else {
        combine(members, EnsembleMethod::EntropyAvg, |ys| {
            let terms = ys.map(|y| Ok((1.0 - binary_entropy(y)?) * y)).collect::<Result<Vec<f64>>>()?;
            Ok(mean(terms.into_iter()))
        })
    }
}

pub fn ensemble(members: &[PredictionMatrix], method: EnsembleMethod) -> Result<EnsembleOutput> {
    match method {
        EnsembleMethod::SimpleAvg => simple_average(members),
        EnsembleMethod::EntropyAvg => entropy_weighted_average(members, false),
        EnsembleMethod::EntropyAvgNormalized => entropy_weighted_average(members, true),
    }
}
