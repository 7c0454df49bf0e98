//! One-vs-rest classifiers over embedding tables: random forests, extremely
//! randomized trees, gradient boosting and k-nearest neighbours.

mod forest;
mod gbm;
mod io;
mod knn;
pub mod tree;

use serde::{Deserialize, Serialize};

pub use forest::{fit_forest, ForestHyper, ForestKind, ForestModel};
pub use gbm::{deviance, fit_gbm, GbmClass, GbmHyper, GbmModel};
pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use knn::{fit_knn, KnnModel, DEFAULT_K};

use crate::error::{Error, Result};
use crate::metrics::AurocReport;
use crate::numerics::RngStream;

/// Feature rows with aligned boolean targets and row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    row_ids: Vec<String>,
    dim: usize,
    features: Vec<f64>,
    class_names: Vec<String>,
    targets: Vec<bool>,
}

impl EmbeddingTable {
    pub fn new(
        row_ids: Vec<String>,
        features: &[Vec<f64>],
        class_names: Vec<String>,
        targets: &[Vec<bool>],
    ) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::Domain("embedding table has no rows".into()));
        }
        if row_ids.len() != n || targets.len() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows, {} ids, {} target rows",
                row_ids.len(),
                targets.len()
            )));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("feature rows must share a positive width".into()));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite feature value".into()));
        }
        let k = class_names.len();
        if targets.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("target rows must have {k} columns")));
        }
        Ok(Self {
            row_ids,
            dim,
            features: features.concat(),
            class_names,
            targets: targets.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize, feature: usize) -> f64 {
        self.features[i * self.dim + feature]
    }

    pub fn target(&self, i: usize, class: usize) -> bool {
        self.targets[i * self.n_classes() + class]
    }

    pub fn class_targets(&self, class: usize) -> Vec<bool> {
        (0..self.len()).map(|i| self.target(i, class)).collect()
    }

    pub fn feature_rows(&self) -> Vec<Vec<f64>> {
        self.features.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn target_rows(&self) -> Vec<Vec<bool>> {
        self.targets.chunks(self.n_classes().max(1)).map(<[bool]>::to_vec).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let features: Vec<Vec<f64>> = rows.iter().map(|&i| self.row(i).to_vec()).collect();
        let targets: Vec<Vec<bool>> = rows.iter().map(|&i| (0..self.n_classes()).map(|c| self.target(i, c)).collect()).collect();
        let ids = rows.iter().map(|&i| self.row_ids[i].clone()).collect();
        Self::new(ids, &features, self.class_names.clone(), &targets)
    }

    /// Seeded shuffle split into `(fit, held_out)`, with `held_out_fraction`
    /// of the rows (at least one) held out.
    pub fn split_holdout(&self, held_out_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(held_out_fraction > 0.0 && held_out_fraction < 1.0) || self.len() < 2 {
            return Err(Error::Domain("hold-out needs a fraction in (0, 1) and at least two rows".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        RngStream::new(seed, 0).split_named("holdout").shuffle(&mut order);
        let held = ((self.len() as f64 * held_out_fraction).round() as usize).clamp(1, self.len() - 1);
        let (h, f) = order.split_at(held);
        let (mut f, mut h) = (f.to_vec(), h.to_vec());
        f.sort_unstable();
        h.sort_unstable();
        Ok((self.subset(&f)?, self.subset(&h)?))
    }
}

pub(crate) fn check_dim(features: &[Vec<f64>], dim: usize) -> Result<()> {
    match features.iter().position(|r| r.len() != dim) {
        Some(i) => Err(Error::Shape(format!(
            "row {i} has {} features, model expects {dim}",
            features[i].len()
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Rf,
    Xrt,
    Gb,
    Knn,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 4] = [ClassifierKind::Rf, ClassifierKind::Xrt, ClassifierKind::Gb, ClassifierKind::Knn];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Rf => "rf",
            ClassifierKind::Xrt => "xrt",
            ClassifierKind::Gb => "gb",
            ClassifierKind::Knn => "knn",
        }
    }

    fn forest_kind(self) -> Option<ForestKind> {
        match self {
            ClassifierKind::Rf => Some(ForestKind::Rf),
            ClassifierKind::Xrt => Some(ForestKind::Xrt),
            _ => None,
        }
    }

    /// Desk-scale defaults: 200 trees for the forests.
    pub fn desk_hyper(self) -> ClassifierHyper {
        match self.forest_kind() {
            Some(f) => ClassifierHyper::Forest(ForestHyper::desk(f)),
            None if self == ClassifierKind::Gb => ClassifierHyper::Gbm(GbmHyper::default()),
            None => ClassifierHyper::Knn { k: DEFAULT_K },
        }
    }

    /// Full-size settings, 2000 trees for the forests.
    pub fn full_hyper(self) -> ClassifierHyper {
        match self.forest_kind() {
            Some(f) => ClassifierHyper::Forest(ForestHyper::full(f)),
            None => self.desk_hyper(),
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassifierKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown classifier {s:?}; expected rf, xrt, gb or knn")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ClassifierHyper {
    Forest(ForestHyper),
    Gbm(GbmHyper),
    Knn { k: usize },
}

impl ClassifierHyper {
    fn n_estimators(&self) -> usize {
        match self {
            ClassifierHyper::Forest(h) => h.n_estimators,
            ClassifierHyper::Gbm(h) => h.n_estimators,
            ClassifierHyper::Knn { .. } => 0,
        }
    }

    fn depth_key(&self) -> usize {
        match self {
            ClassifierHyper::Forest(h) => h.max_depth.unwrap_or(usize::MAX),
            ClassifierHyper::Gbm(h) => h.max_depth,
            ClassifierHyper::Knn { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Forest(ForestModel),
    Gbm(GbmModel),
    Knn(KnnModel),
}

impl Classifier {
    pub fn fit(kind: ClassifierKind, data: &EmbeddingTable, hyper: &ClassifierHyper, seed: u64) -> Result<Self> {
        match (kind.forest_kind(), hyper) {
            (Some(f), ClassifierHyper::Forest(h)) => Ok(Classifier::Forest(fit_forest(data, f, h, seed)?)),
            (None, ClassifierHyper::Gbm(h)) if kind == ClassifierKind::Gb => Ok(Classifier::Gbm(fit_gbm(data, h)?)),
            (None, ClassifierHyper::Knn { k }) if kind == ClassifierKind::Knn => Ok(Classifier::Knn(fit_knn(data, *k)?)),
            _ => Err(Error::Config(format!("hyperparameters {hyper:?} do not belong to {kind}"))),
        }
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Forest(m) => match m.kind {
                ForestKind::Rf => ClassifierKind::Rf,
                ForestKind::Xrt => ClassifierKind::Xrt,
            },
            Classifier::Gbm(_) => ClassifierKind::Gb,
            Classifier::Knn(_) => ClassifierKind::Knn,
        }
    }

    pub fn hyper(&self) -> ClassifierHyper {
        match self {
            Classifier::Forest(m) => ClassifierHyper::Forest(m.hyper),
            Classifier::Gbm(m) => ClassifierHyper::Gbm(m.hyper),
            Classifier::Knn(m) => ClassifierHyper::Knn { k: m.k },
        }
    }

    /// `out[row][class]`, every entry in `[0, 1]`.
    pub fn predict_proba(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self {
            Classifier::Forest(m) => m.predict_proba(features),
            Classifier::Gbm(m) => m.predict_proba(features),
            Classifier::Knn(m) => m.predict_proba(features),
        }
    }

    /// Classes whose training targets were single-valued.
    pub fn constant_classes(&self) -> Vec<bool> {
        match self {
            Classifier::Forest(m) => m.constant.clone(),
            Classifier::Gbm(m) => m.classes.iter().map(|c| c.constant).collect(),
            Classifier::Knn(m) => (0..m.table.n_classes())
                .map(|c| {
                    let y = m.table.class_targets(c);
                    y.iter().all(|&v| v == y[0])
                })
                .collect(),
        }
    }
}

/// Candidate values per hyperparameter; the lists that do not apply to a
/// classifier family are ignored.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub n_estimators: Vec<usize>,
    /// `None` is unlimited depth.
    #[serde(default)]
    pub max_depth: Vec<Option<usize>>,
    #[serde(default)]
    pub min_samples_split: Vec<usize>,
    #[serde(default)]
    pub min_samples_leaf: Vec<usize>,
    #[serde(default)]
    pub learning_rate: Vec<f64>,
    #[serde(default)]
    pub k: Vec<usize>,
}

fn sorted_unique<T: Clone + PartialOrd>(values: &[T], fallback: T) -> Vec<T> {
    let mut v = if values.is_empty() { vec![fallback] } else { values.to_vec() };
    v.sort_by(|a, b| a.partial_cmp(b).expect("comparable candidates"));
    v.dedup_by(|a, b| a == b);
    v
}

impl GridSpec {
    /// Every grid point for `kind`, filling unlisted hyperparameters from
    /// `base`.
    pub fn candidates(&self, base: &ClassifierHyper) -> Result<Vec<ClassifierHyper>> {
        if self.learning_rate.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite learning rate in grid".into()));
        }
        let mut out = Vec::new();
        match base {
            ClassifierHyper::Forest(b) => {
                for &n in &sorted_unique(&self.n_estimators, b.n_estimators) {
                    for &d in &sorted_unique(&self.max_depth, b.max_depth) {
                        for &s in &sorted_unique(&self.min_samples_split, b.min_samples_split) {
                            for &l in &sorted_unique(&self.min_samples_leaf, b.min_samples_leaf) {
                                out.push(ClassifierHyper::Forest(ForestHyper {
                                    n_estimators: n,
                                    max_depth: d,
                                    min_samples_split: s,
                                    min_samples_leaf: l,
                                    ..*b
                                }));
                            }
                        }
                    }
                }
            }
            ClassifierHyper::Gbm(b) => {
                let depths = sorted_unique(&self.max_depth, Some(b.max_depth));
                if depths.contains(&None) {
                    return Err(Error::Config("boosting needs a finite max_depth".into()));
                }
                for &n in &sorted_unique(&self.n_estimators, b.n_estimators) {
                    for d in depths.iter().flatten() {
                        for &lr in &sorted_unique(&self.learning_rate, b.learning_rate) {
                            out.push(ClassifierHyper::Gbm(GbmHyper {
                                n_estimators: n,
                                max_depth: *d,
                                learning_rate: lr,
                                ..*b
                            }));
                        }
                    }
                }
            }
            ClassifierHyper::Knn { k } => {
                for &k in &sorted_unique(&self.k, *k) {
                    out.push(ClassifierHyper::Knn { k });
                }
            }
        }
        for c in &out {
            match c {
                ClassifierHyper::Forest(h) => h.validate()?,
                ClassifierHyper::Gbm(h) => h.validate()?,
                ClassifierHyper::Knn { k } if *k == 0 => return Err(Error::Config("k must be positive".into())),
                ClassifierHyper::Knn { .. } => {}
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub hyper: ClassifierHyper,
    /// Mean held-out AUROC over the classes where it is defined.
    pub mean_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: ClassifierHyper,
    pub best_score: f64,
    pub table: Vec<GridRow>,
}

/// Exhaustive search scored on `held_out`. The best mean AUROC wins; ties
/// go to fewer estimators, then to the shallower depth.
pub fn grid_search(
    train: &EmbeddingTable,
    held_out: &EmbeddingTable,
    grid: &GridSpec,
    kind: ClassifierKind,
    base: &ClassifierHyper,
    seed: u64,
) -> Result<GridResult> {
    let truth = held_out.target_rows();
    let features = held_out.feature_rows();
    let mut table = Vec::new();
    for hyper in grid.candidates(base)? {
        let model = Classifier::fit(kind, train, &hyper, seed)?;
        let probs = model.predict_proba(&features)?;
        let report = AurocReport::compute(kind.name(), held_out.class_names(), &probs, &truth)?;
        let mean_auroc = report
            .mean()
            .ok_or_else(|| Error::Domain("no class has both labels in the held-out slice".into()))?;
        table.push(GridRow { hyper, mean_auroc });
    }
    let mut best = &table[0];
    for row in &table[1..] {
        let better = row.mean_auroc > best.mean_auroc
            || (row.mean_auroc == best.mean_auroc
                && (row.hyper.n_estimators(), row.hyper.depth_key()) < (best.hyper.n_estimators(), best.hyper.depth_key()));
        if better {
            best = row;
        }
    }
    Ok(GridResult {
        best: best.hyper,
        best_score: best.mean_auroc,
        table,
    })
}
