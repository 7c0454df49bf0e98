//! Area under the ROC curve and per-class report tables.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann-Whitney AUROC, `U / (P * N)`, with tied scores sharing their mean rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Domain(format!("score {i} is not finite")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based) ranks of the positives, ties averaged.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mean_rank = (start + end + 1) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count();
        rank_sum += mean_rank * pos_in_group as f64;
        start = end;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// ROC points `(fpr, tpr)` from the strictest threshold down, starting at
/// `(0, 0)` and ending at `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    auroc(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let negatives = labels.len() as f64 - positives;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives, tp as f64 / positives));
    }
    Ok(points)
}

/// Performance band of an AUROC value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Band {
    Below,
    Acceptable,
    VeryGood,
    Outstanding,
}

impl Band {
    pub fn of(auroc: f64) -> Band {
        if auroc > 0.9 {
            Band::Outstanding
        } else if auroc > 0.8 {
            Band::VeryGood
        } else if auroc > 0.7 {
            Band::Acceptable
        } else {
            Band::Below
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Below => "below",
            Band::Acceptable => "acceptable",
            Band::VeryGood => "very-good",
            Band::Outstanding => "outstanding",
        })
    }
}

/// AUROC per evaluation class for one model or ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocReport {
    pub model: String,
    pub classes: Vec<String>,
    /// `None` where the class had a single label value in the test split.
    pub values: Vec<Option<f64>>,
}

impl AurocReport {
    /// Scores one column per class; `probs[row][class]`.
    pub fn compute(model: &str, classes: &[String], probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::Shape(format!("{} prediction rows for {} label rows", probs.len(), labels.len())));
        }
        let mut values = Vec::with_capacity(classes.len());
        for c in 0..classes.len() {
            let scores = column(probs, c)?;
            let truth: Vec<bool> = labels
                .iter()
                .map(|row| row.get(c).copied().ok_or_else(|| Error::Shape("short label row".into())))
                .collect::<Result<_>>()?;
            values.push(match auroc(&scores, &truth) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric { .. }) => None,
                Err(e) => return Err(e),
            });
        }
        Ok(Self {
            model: model.to_string(),
            classes: classes.to_vec(),
            values,
        })
    }

    /// Mean over the classes with a defined AUROC.
    pub fn mean(&self) -> Option<f64> {
        let defined: Vec<f64> = self.values.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn excluded(&self) -> Vec<&str> {
        self.classes
            .iter()
            .zip(&self.values)
            .filter(|(_, v)| v.is_none())
            .map(|(c, _)| c.as_str())
            .collect()
    }

    pub fn band(&self, class: usize) -> Option<Band> {
        self.values.get(class).copied().flatten().map(Band::of)
    }
}

fn column(rows: &[Vec<f64>], c: usize) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| r.get(c).copied().ok_or_else(|| Error::Shape("short prediction row".into())))
        .collect()
}

/// Writes `model,<class...>,mean` rows; undefined cells are left empty.
pub fn write_report_csv<W: std::io::Write>(out: W, reports: &[AurocReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    if let Some(first) = reports.first() {
        let mut header = vec!["model".to_string()];
        header.extend(first.classes.iter().cloned());
        header.push("mean".into());
        w.write_record(&header).map_err(csv_err)?;
    }
    for r in reports {
        let mut row = vec![r.model.clone()];
        row.extend(r.values.iter().map(|v| v.map(fmt_auroc).unwrap_or_default()));
        row.push(r.mean().map(fmt_auroc).unwrap_or_default());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

/// Writes `class,fpr,tpr` rows for every defined class.
pub fn write_roc_points_csv<W: std::io::Write>(
    out: W,
    classes: &[String],
    probs: &[Vec<f64>],
    labels: &[Vec<bool>],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(["class", "fpr", "tpr"]).map_err(csv_err)?;
    for (c, name) in classes.iter().enumerate() {
        let scores = column(probs, c)?;
        let truth: Vec<bool> = labels.iter().map(|r| r.get(c).copied().unwrap_or(false)).collect();
        let points = match roc_curve(&scores, &truth) {
            Ok(p) => p,
            Err(Error::UndefinedMetric { .. }) => continue,
            Err(e) => return Err(e),
        };
        for (fpr, tpr) in points {
            w.write_record([name.clone(), fpr.to_string(), tpr.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

pub fn fmt_auroc(v: f64) -> String {
    format!("{v:.4}")
}
