//! Declarative run configuration, read from TOML. Every field has a default
//! so a config only needs to say what differs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifiers::{ClassifierHyper, ClassifierKind, ForestHyper, GbmHyper, GridSpec};
use crate::ensemble::EnsembleMethod;
use crate::error::{Error, Result};
use crate::imaging::SyntheticSpec;
use crate::labels::{finding_index, EvalClassSet, UncertaintyPolicy, UnmentionedAs, FINDING_NAMES, NUM_FINDINGS};
use crate::vae::{Activation, BetaExponent, BetaSchedule, EmbeddingMode, TrainConfig, VaeArchitecture};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub labels: LabelConfig,
    pub vae: VaeConfig,
    pub classifiers: ClassifierConfig,
    pub ensemble: EnsembleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            labels: LabelConfig::default(),
            vae: VaeConfig::default(),
            classifiers: ClassifierConfig::default(),
            ensemble: EnsembleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image root for the directory source; label CSV paths are relative to it.
    pub root: Option<PathBuf>,
    /// Defaults to `<root>/labels.csv`.
    pub labels: Option<PathBuf>,
    pub test_root: Option<PathBuf>,
    /// Defaults to `<test_root>/labels.csv`.
    pub test_labels: Option<PathBuf>,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// Keep all images of a patient in one split (directory source only).
    pub group_by_patient: bool,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            labels: None,
            test_root: None,
            test_labels: None,
            train_fraction: 0.9,
            validation_fraction: 0.1,
            group_by_patient: false,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Images split into train and validation.
    pub pool: usize,
    /// Images in the separately generated test set.
    pub test: usize,
    pub image_size: usize,
    pub noise_level: f64,
    pub amplitude: f64,
    pub uncertain_fraction: f64,
    /// Findings that leave a visible pattern; all of them when absent.
    pub informative: Option<Vec<String>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            pool: 2500,
            test: 500,
            image_size: 32,
            noise_level: 0.1,
            amplitude: 0.45,
            uncertain_fraction: 0.0,
            informative: None,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self, seed: u64) -> Result<SyntheticSpec> {
        let mut spec = SyntheticSpec::chexpert(self.image_size, seed);
        spec.noise_level = self.noise_level;
        spec.amplitude = self.amplitude;
        spec.uncertain_fraction = self.uncertain_fraction;
        if let Some(names) = &self.informative {
            spec.informative = [false; NUM_FINDINGS];
            for n in names {
                let k = finding_index(n).ok_or_else(|| Error::Config(format!("unknown finding {n:?}")))?;
                spec.informative[k] = true;
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Square side after resizing.
    pub resize: usize,
    /// Square side after the template crop; equal to `resize` skips matching.
    pub crop: usize,
    /// Template image; defaults to the center of the mean of the first
    /// `template_samples` training images.
    pub template: Option<PathBuf>,
    pub template_samples: usize,
    pub channels: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resize: 256,
            crop: 224,
            template: None,
            template_samples: 100,
            channels: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    UOnes,
    UZeros,
    Lsr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub policy: PolicyName,
    pub lsr_alpha: f64,
    pub lsr_beta: f64,
    pub threshold: f64,
    pub unmentioned: UnmentionedAs,
    pub eval_classes: Vec<String>,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            policy: PolicyName::Lsr,
            lsr_alpha: 0.55,
            lsr_beta: 0.85,
            threshold: 0.5,
            unmentioned: UnmentionedAs::Negative,
            eval_classes: EvalClassSet::standard().names().iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LabelConfig {
    pub fn policy(&self) -> Result<UncertaintyPolicy> {
        let p = match self.policy {
            PolicyName::UOnes => UncertaintyPolicy::UOnes,
            PolicyName::UZeros => UncertaintyPolicy::UZeros,
            PolicyName::Lsr => UncertaintyPolicy::Lsr {
                alpha: self.lsr_alpha,
                beta: self.lsr_beta,
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn eval_set(&self) -> Result<EvalClassSet> {
        EvalClassSet::from_names(&self.eval_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub name: String,
    pub encoder_widths: Vec<usize>,
    pub activation: Activation,
    /// Encoder hidden layers kept at their initial weights.
    pub frozen: Vec<bool>,
    /// Overrides the seed derived from the master seed and the name.
    pub seed: Option<u64>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            name: "mlp".into(),
            encoder_widths: vec![128],
            activation: Activation::LeakyRelu,
            frozen: Vec::new(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dims: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_patience: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub beta_warmup_epochs: usize,
    pub beta_base: f64,
    pub beta_growth: f64,
    pub beta_exponent: BetaExponent,
    pub decoder_widths: Vec<usize>,
    pub upsample_blocks: usize,
    pub embedding: EmbeddingKind,
    pub architectures: Vec<ArchitectureConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Mean,
    Sample,
}

impl Default for VaeConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let b = BetaSchedule::default();
        Self {
            latent_dims: vec![100, 200],
            epochs: t.epochs,
            learning_rate: t.initial_lr,
            lr_patience: t.lr_patience,
            batch_size: t.batch_size,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_epsilon: t.adam_epsilon,
            beta_warmup_epochs: b.warmup_epochs,
            beta_base: b.base,
            beta_growth: b.growth,
            beta_exponent: b.exponent,
            decoder_widths: vec![512],
            upsample_blocks: 3,
            embedding: EmbeddingKind::Mean,
            architectures: vec![ArchitectureConfig::default()],
        }
    }
}

impl VaeConfig {
    pub fn beta_schedule(&self) -> BetaSchedule {
        BetaSchedule {
            warmup_epochs: self.beta_warmup_epochs,
            base: self.beta_base,
            growth: self.beta_growth,
            exponent: self.beta_exponent,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            initial_lr: self.learning_rate,
            lr_patience: self.lr_patience,
            batch_size: self.batch_size,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            seed,
        }
    }

    pub fn architecture(&self, arch: &ArchitectureConfig, latent_dim: usize, channels: usize, size: usize) -> VaeArchitecture {
        VaeArchitecture {
            input_channels: channels,
            input_height: size,
            input_width: size,
            encoder_widths: arch.encoder_widths.clone(),
            latent_dim,
            decoder_widths: self.decoder_widths.clone(),
            upsample_blocks: self.upsample_blocks,
            activation: arch.activation,
            frozen_encoder_layers: arch.frozen.clone(),
        }
    }

    pub fn embedding_mode(&self, seed: u64) -> EmbeddingMode {
        match self.embedding {
            EmbeddingKind::Mean => EmbeddingMode::Mean,
            EmbeddingKind::Sample => EmbeddingMode::Sample { seed },
        }
    }
}

/// Per-family overrides on top of the desk or full-size defaults. A depth
/// of 0 means unlimited.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestOverrides {
    pub n_estimators: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_samples_split: Option<usize>,
    pub min_samples_leaf: Option<usize>,
    pub max_features: Option<usize>,
    pub bootstrap: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbmOverrides {
    pub n_estimators: Option<usize>,
    pub max_depth: Option<usize>,
    pub learning_rate: Option<f64>,
    pub min_samples_split: Option<usize>,
    pub min_samples_leaf: Option<usize>,
}

/// Candidate lists for the grid search; a depth of 0 means unlimited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_estimators: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub min_samples_split: Vec<usize>,
    pub min_samples_leaf: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub k: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_estimators: Vec::new(),
            max_depth: vec![3, 5, 10],
            min_samples_split: vec![2, 5],
            min_samples_leaf: vec![1, 2],
            learning_rate: Vec::new(),
            k: vec![5, 10, 20],
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            n_estimators: self.n_estimators.clone(),
            max_depth: self.max_depth.iter().map(|&d| (d > 0).then_some(d)).collect(),
            min_samples_split: self.min_samples_split.clone(),
            min_samples_leaf: self.min_samples_leaf.clone(),
            learning_rate: self.learning_rate.clone(),
            k: self.k.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kinds: Vec<ClassifierKind>,
    /// Use the full-size 2000-tree forests instead of the 200-tree desk size.
    pub full_size: bool,
    pub grid_search: bool,
    pub holdout_fraction: f64,
    pub rf: ForestOverrides,
    pub xrt: ForestOverrides,
    pub gb: GbmOverrides,
    pub knn_k: usize,
    pub grid: GridConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kinds: ClassifierKind::ALL.to_vec(),
            full_size: false,
            grid_search: false,
            holdout_fraction: 0.2,
            rf: ForestOverrides::default(),
            xrt: ForestOverrides::default(),
            gb: GbmOverrides::default(),
            knn_k: crate::classifiers::DEFAULT_K,
            grid: GridConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn hyper(&self, kind: ClassifierKind) -> ClassifierHyper {
        let base = if self.full_size { kind.full_hyper() } else { kind.desk_hyper() };
        let forest = |h: ForestHyper, o: &ForestOverrides| ForestHyper {
            n_estimators: o.n_estimators.unwrap_or(h.n_estimators),
            max_depth: o.max_depth.map(|d| (d > 0).then_some(d)).unwrap_or(h.max_depth),
            min_samples_split: o.min_samples_split.unwrap_or(h.min_samples_split),
            min_samples_leaf: o.min_samples_leaf.unwrap_or(h.min_samples_leaf),
            max_features: o.max_features.or(h.max_features),
            bootstrap: o.bootstrap.unwrap_or(h.bootstrap),
        };
        match (kind, base) {
            (ClassifierKind::Rf, ClassifierHyper::Forest(h)) => ClassifierHyper::Forest(forest(h, &self.rf)),
            (ClassifierKind::Xrt, ClassifierHyper::Forest(h)) => ClassifierHyper::Forest(forest(h, &self.xrt)),
            (ClassifierKind::Gb, ClassifierHyper::Gbm(h)) => ClassifierHyper::Gbm(GbmHyper {
                n_estimators: self.gb.n_estimators.unwrap_or(h.n_estimators),
                max_depth: self.gb.max_depth.unwrap_or(h.max_depth),
                learning_rate: self.gb.learning_rate.unwrap_or(h.learning_rate),
                min_samples_split: self.gb.min_samples_split.unwrap_or(h.min_samples_split),
                min_samples_leaf: self.gb.min_samples_leaf.unwrap_or(h.min_samples_leaf),
            }),
            _ => ClassifierHyper::Knn { k: self.knn_k },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub methods: Vec<EnsembleMethod>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            methods: vec![EnsembleMethod::SimpleAvg, EnsembleMethod::EntropyAvg],
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let fractions_ok = d.train_fraction > 0.0
            && d.validation_fraction > 0.0
            && (d.train_fraction + d.validation_fraction - 1.0).abs() < 1e-9;
        if !fractions_ok {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {} + {}",
                d.train_fraction, d.validation_fraction
            )));
        }
        match d.source {
            DataSource::Directory => {
                if d.root.is_none() || d.test_root.is_none() {
                    return Err(Error::Config("directory source needs data.root and data.test_root".into()));
                }
            }
            DataSource::Synthetic => {
                if d.synthetic.pool < 2 || d.synthetic.test == 0 {
                    return Err(Error::Config("synthetic source needs pool >= 2 and test >= 1".into()));
                }
                d.synthetic.spec(0)?;
            }
        }
        let p = &self.preprocess;
        if p.crop == 0 || p.resize < p.crop || p.channels == 0 || p.template_samples == 0 {
            return Err(Error::Config("preprocess needs 0 < crop <= resize, channels >= 1, template_samples >= 1".into()));
        }
        let l = &self.labels;
        l.policy()?;
        l.eval_set()?;
        if !(l.threshold > 0.0 && l.threshold < 1.0) {
            return Err(Error::Config(format!("label threshold {} outside (0, 1)", l.threshold)));
        }
        let v = &self.vae;
        if v.latent_dims.is_empty() || v.latent_dims.contains(&0) || v.architectures.is_empty() {
            return Err(Error::Config("need at least one architecture and positive latent sizes".into()));
        }
        v.train_config(0).validate().map_err(as_config)?;
        let mut names: Vec<&str> = v.architectures.iter().map(|a| a.name.as_str()).collect();
        if let Some(bad) = names.iter().find(|n| !valid_name(n)) {
            return Err(Error::Config(format!("architecture name {bad:?} must be alphanumeric, '-' or '_'")));
        }
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("architecture names must be unique".into()));
        }
        for arch in &v.architectures {
            for &dim in &v.latent_dims {
                crate::vae::VaeModel::new(v.architecture(arch, dim, p.channels, p.crop)).map_err(as_config)?;
            }
        }
        let c = &self.classifiers;
        if c.kinds.is_empty() {
            return Err(Error::Config("no classifier kinds configured".into()));
        }
        if !(c.holdout_fraction > 0.0 && c.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        for &kind in &c.kinds {
            let h = c.hyper(kind);
            match h {
                ClassifierHyper::Forest(f) => f.validate().map_err(as_config)?,
                ClassifierHyper::Gbm(g) => g.validate().map_err(as_config)?,
                ClassifierHyper::Knn { k } if k == 0 => return Err(Error::Config("knn_k must be positive".into())),
                ClassifierHyper::Knn { .. } => {}
            }
            if c.grid_search {
                c.grid.spec().candidates(&h).map_err(as_config)?;
            }
        }
        if self.ensemble.methods.is_empty() {
            return Err(Error::Config("no ensemble methods configured".into()));
        }
        Ok(())
    }

    pub fn eval_class_names(&self) -> Result<Vec<String>> {
        Ok(self.labels.eval_set()?.names().iter().map(|s| s.to_string()).collect())
    }
}

/// Names of all fourteen findings, for config documentation.
pub fn finding_names() -> &'static [&'static str] {
    &FINDING_NAMES
}
