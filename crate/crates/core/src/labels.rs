//! CheXpert-style ternary labels, uncertainty resolution and the projection
//! onto the five evaluated findings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_uniform, RngStream};

pub const NUM_FINDINGS: usize = 14;

/// Finding names in canonical column order.
pub const FINDING_NAMES: [&str; NUM_FINDINGS] = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
];

/// Positive rate of each finding in the CheXpert training set.
pub const CHEXPERT_POSITIVE_RATE: [f64; NUM_FINDINGS] = [
    0.0889, 0.1622, 0.1224, 0.7201, 0.0369, 0.2600, 0.0883, 0.0245, 0.1556, 0.0926, 0.4026, 0.0131,
    0.0389, 0.5610,
];

/// Uncertain rate of each finding in the CheXpert training set.
pub const CHEXPERT_UNCERTAIN_RATE: [f64; NUM_FINDINGS] = [
    0.0, 0.0524, 0.0029, 0.0132, 0.0044, 0.0495, 0.1025, 0.0156, 0.1359, 0.0142, 0.0501, 0.0095,
    0.0026, 0.0048,
];

pub fn finding_index(name: &str) -> Option<usize> {
    FINDING_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name.trim()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FindingState {
    Positive,
    Negative,
    Uncertain,
    Unmentioned,
}

impl FindingState {
    pub fn parse_cell(cell: &str) -> Option<Self> {
        match cell.trim() {
            "1.0" | "1" => Some(FindingState::Positive),
            "0.0" | "0" => Some(FindingState::Negative),
            "-1.0" | "-1" => Some(FindingState::Uncertain),
            "" => Some(FindingState::Unmentioned),
            _ => None,
        }
    }

    pub fn as_cell(self) -> &'static str {
        match self {
            FindingState::Positive => "1.0",
            FindingState::Negative => "0.0",
            FindingState::Uncertain => "-1.0",
            FindingState::Unmentioned => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub path: String,
    pub findings: [FindingState; NUM_FINDINGS],
}

impl LabelRecord {
    pub fn new(path: impl Into<String>, findings: [FindingState; NUM_FINDINGS]) -> Self {
        Self {
            path: path.into(),
            findings,
        }
    }
}

/// Parses one data row: the image path followed by the 14 finding cells.
pub fn parse_label_row<S: AsRef<str>>(row: &[S]) -> Result<LabelRecord> {
    if row.len() != NUM_FINDINGS + 1 {
        return Err(Error::Parse {
            column: if row.len() > NUM_FINDINGS + 1 {
                format!("#{}", NUM_FINDINGS + 2)
            } else {
                FINDING_NAMES
                    .get(row.len().saturating_sub(1))
                    .copied()
                    .unwrap_or("path")
                    .to_string()
            },
            message: format!("expected {} columns, found {}", NUM_FINDINGS + 1, row.len()),
        });
    }
    let mut findings = [FindingState::Unmentioned; NUM_FINDINGS];
    for (k, cell) in row[1..].iter().enumerate() {
        findings[k] = FindingState::parse_cell(cell.as_ref()).ok_or_else(|| Error::Parse {
            column: FINDING_NAMES[k].to_string(),
            message: format!("unrecognized value {:?}", cell.as_ref()),
        })?;
    }
    Ok(LabelRecord::new(row[0].as_ref(), findings))
}

/// Reads a label CSV (header row, `path` then the 14 findings).
pub fn read_label_csv(path: &Path) -> Result<Vec<LabelRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let cells: Vec<&str> = row.iter().collect();
        let record = parse_label_row(&cells).map_err(|e| match e {
            Error::Parse { column, message } => Error::Parse {
                column,
                message: format!("{} (row {})", message, line + 2),
            },
            other => other,
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_label_csv(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["path"];
    header.extend(FINDING_NAMES);
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    for record in records {
        let mut row = vec![record.path.as_str()];
        row.extend(record.findings.iter().map(|f| f.as_cell()));
        writer.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// How `Uncertain` findings become training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UncertaintyPolicy {
    UOnes,
    UZeros,
    /// Label-smoothing: each uncertain finding draws from `U(alpha, beta)`.
    Lsr { alpha: f64, beta: f64 },
}

impl UncertaintyPolicy {
    pub const DEFAULT_LSR: UncertaintyPolicy = UncertaintyPolicy::Lsr {
        alpha: 0.55,
        beta: 0.85,
    };

    pub fn validate(&self) -> Result<()> {
        if let UncertaintyPolicy::Lsr { alpha, beta } = *self {
            if !(alpha > 0.5 && beta > alpha && beta <= 1.0) {
                return Err(Error::Policy(format!(
                    "LSR needs 0.5 < alpha < beta <= 1, got alpha={alpha}, beta={beta}"
                )));
            }
        }
        Ok(())
    }

    pub fn tag(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for UncertaintyPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UncertaintyPolicy::UOnes => write!(f, "u-ones"),
            UncertaintyPolicy::UZeros => write!(f, "u-zeros"),
            UncertaintyPolicy::Lsr { alpha, beta } => write!(f, "lsr({alpha},{beta})"),
        }
    }
}

impl FromStr for UncertaintyPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "u-ones" | "uones" | "ones" => Ok(UncertaintyPolicy::UOnes),
            "u-zeros" | "uzeros" | "zeros" => Ok(UncertaintyPolicy::UZeros),
            "lsr" => Ok(UncertaintyPolicy::DEFAULT_LSR),
            other => Err(Error::Policy(format!("unknown policy {other:?}"))),
        }
    }
}

/// Soft targets in `[0, 1]` after applying a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTargets {
    pub values: [f64; NUM_FINDINGS],
    pub policy: UncertaintyPolicy,
}

/// Target assigned to blank cells. Blanks count as negative by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmentionedAs {
    #[default]
    Negative,
    Uncertain,
}

pub fn apply_uncertainty_policy(
    record: &LabelRecord,
    policy: UncertaintyPolicy,
    rng: &mut RngStream,
) -> Result<ResolvedTargets> {
    apply_uncertainty_policy_with(record, policy, UnmentionedAs::Negative, rng)
}

pub fn apply_uncertainty_policy_with(
    record: &LabelRecord,
    policy: UncertaintyPolicy,
    unmentioned: UnmentionedAs,
    rng: &mut RngStream,
) -> Result<ResolvedTargets> {
    policy.validate()?;
    let mut values = [0.0; NUM_FINDINGS];
    for (value, &state) in values.iter_mut().zip(&record.findings) {
        let state = match (state, unmentioned) {
            (FindingState::Unmentioned, UnmentionedAs::Uncertain) => FindingState::Uncertain,
            (s, _) => s,
        };
        *value = match state {
            FindingState::Positive => 1.0,
            FindingState::Negative | FindingState::Unmentioned => 0.0,
            FindingState::Uncertain => match policy {
                UncertaintyPolicy::UOnes => 1.0,
                UncertaintyPolicy::UZeros => 0.0,
                UncertaintyPolicy::Lsr { alpha, beta } => sample_uniform(rng, alpha, beta)?,
            },
        };
    }
    Ok(ResolvedTargets { values, policy })
}

/// Hard labels: `value >= threshold`.
pub fn binarize_targets(targets: &ResolvedTargets, threshold: f64) -> Result<[bool; NUM_FINDINGS]> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(targets.values.map(|v| v >= threshold))
}

/// Indices of the findings that are scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalClassSet {
    indices: Vec<usize>,
}

impl EvalClassSet {
    /// Cardiomegaly, Edema, Consolidation, Atelectasis, Pleural Effusion.
    pub fn standard() -> Self {
        Self {
            indices: vec![2, 5, 6, 8, 10],
        }
    }

    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("evaluation class set is empty".into()));
        }
        for (i, &k) in indices.iter().enumerate() {
            if k >= NUM_FINDINGS {
                return Err(Error::Config(format!("class index {k} out of range")));
            }
            if indices[..i].contains(&k) {
                return Err(Error::Config(format!("class index {k} repeated")));
            }
        }
        Ok(Self { indices })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let indices = names
            .iter()
            .map(|n| {
                finding_index(n.as_ref())
                    .ok_or_else(|| Error::Config(format!("unknown finding {:?}", n.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.indices.iter().map(|&k| FINDING_NAMES[k]).collect()
    }

    pub fn project<T: Copy>(&self, full: &[T; NUM_FINDINGS]) -> Vec<T> {
        self.indices.iter().map(|&k| full[k]).collect()
    }
}

impl Default for EvalClassSet {
    fn default() -> Self {
        Self::standard()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use FindingState::*;

    fn row(cells: &[&str]) -> Vec<String> {
        std::iter::once("img.png")
            .chain(cells.iter().copied())
            .map(String::from)
            .collect()
    }

    #[test]
    fn parses_cells() {
        let mut cells = vec![""; NUM_FINDINGS];
        cells[5] = "-1.0";
        cells[2] = "1";
        cells[3] = "0.0";
        let rec = parse_label_row(&row(&cells)).unwrap();
        assert_eq!(rec.findings[5], Uncertain);
        assert_eq!(rec.findings[2], Positive);
        assert_eq!(rec.findings[3], Negative);
        assert_eq!(rec.findings[0], Unmentioned);
        assert_eq!(rec.path, "img.png");
    }

    #[test]
    fn blank_row_is_all_unmentioned() {
        let rec = parse_label_row(&row(&[""; NUM_FINDINGS])).unwrap();
        assert!(rec.findings.iter().all(|&f| f == Unmentioned));
    }

    #[test]
    fn arity_and_value_errors_name_the_column() {
        let err = parse_label_row(&row(&["0"; 13])).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        let mut cells = vec!["0"; NUM_FINDINGS];
        cells[5] = "maybe";
        match parse_label_row(&row(&cells)).unwrap_err() {
            Error::Parse { column, .. } => assert_eq!(column, "Edema"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn policies_on_uncertain() {
        let mut f = [Negative; NUM_FINDINGS];
        f[0] = Positive;
        f[5] = Uncertain;
        f[7] = Unmentioned;
        let rec = LabelRecord::new("x", f);
        let mut rng = RngStream::new(1, 0);
        let ones = apply_uncertainty_policy(&rec, UncertaintyPolicy::UOnes, &mut rng).unwrap();
        let zeros = apply_uncertainty_policy(&rec, UncertaintyPolicy::UZeros, &mut rng).unwrap();
        let lsr = apply_uncertainty_policy(&rec, UncertaintyPolicy::DEFAULT_LSR, &mut rng).unwrap();
        assert_eq!(ones.values[5], 1.0);
        assert_eq!(zeros.values[5], 0.0);
        assert!((0.55..0.85).contains(&lsr.values[5]));
        for t in [&ones, &zeros, &lsr] {
            assert_eq!(t.values[0], 1.0);
            assert_eq!(t.values[1], 0.0);
            assert_eq!(t.values[7], 0.0);
        }
    }

    #[test]
    fn certain_record_is_policy_independent() {
        let mut f = [Negative; NUM_FINDINGS];
        f[3] = Positive;
        f[9] = Unmentioned;
        let rec = LabelRecord::new("x", f);
        let mut rng = RngStream::new(3, 0);
        let a = apply_uncertainty_policy(&rec, UncertaintyPolicy::UOnes, &mut rng).unwrap();
        let b = apply_uncertainty_policy(&rec, UncertaintyPolicy::UZeros, &mut rng).unwrap();
        let c = apply_uncertainty_policy(&rec, UncertaintyPolicy::DEFAULT_LSR, &mut rng).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.values, c.values);
    }

    #[test]
    fn unmentioned_override() {
        let rec = LabelRecord::new("x", [Unmentioned; NUM_FINDINGS]);
        let mut rng = RngStream::new(3, 0);
        let t = apply_uncertainty_policy_with(
            &rec,
            UncertaintyPolicy::UOnes,
            UnmentionedAs::Uncertain,
            &mut rng,
        )
        .unwrap();
        assert!(t.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bad_lsr_configs() {
        let rec = LabelRecord::new("x", [Negative; NUM_FINDINGS]);
        let mut rng = RngStream::new(0, 0);
        for (alpha, beta) in [(0.5, 0.8), (0.4, 0.9), (0.8, 0.8), (0.9, 0.6), (0.6, 1.2)] {
            let err = apply_uncertainty_policy(
                &rec,
                UncertaintyPolicy::Lsr { alpha, beta },
                &mut rng,
            )
            .unwrap_err();
            assert!(matches!(err, Error::Policy(_)));
        }
    }

    #[test]
    fn binarize_examples() {
        let mut values = [0.0; NUM_FINDINGS];
        values[0] = 0.7;
        values[1] = 1.0;
        let t = ResolvedTargets {
            values,
            policy: UncertaintyPolicy::DEFAULT_LSR,
        };
        let b = binarize_targets(&t, 0.5).unwrap();
        assert!(b[0] && b[1] && !b[2]);
        for th in [0.01, 0.5, 0.99] {
            let b = binarize_targets(&t, th).unwrap();
            assert!(b[1]);
            assert!(!b[2]);
        }
        assert!(binarize_targets(&t, 0.0).is_err());
        assert!(binarize_targets(&t, 1.0).is_err());
    }

    #[test]
    fn eval_class_set() {
        let set = EvalClassSet::standard();
        assert_eq!(
            set.names(),
            vec![
                "Cardiomegaly",
                "Edema",
                "Consolidation",
                "Atelectasis",
                "Pleural Effusion"
            ]
        );
        assert_eq!(EvalClassSet::from_names(&set.names()).unwrap(), set);
        assert!(EvalClassSet::new(vec![1, 1]).is_err());
        assert!(EvalClassSet::new(vec![14]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let mut f = [Unmentioned; NUM_FINDINGS];
        f[2] = Positive;
        f[5] = Uncertain;
        f[6] = Negative;
        let records = vec![
            LabelRecord::new("a.png", f),
            LabelRecord::new("b.png", [Negative; NUM_FINDINGS]),
        ];
        write_label_csv(&path, &records).unwrap();
        assert_eq!(read_label_csv(&path).unwrap(), records);
    }
}
