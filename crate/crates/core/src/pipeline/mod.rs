//! End-to-end experiment stages over a run directory.
//!
//! Each stage reads the artifacts of the previous ones, writes its own and
//! records their SHA-256 in `digests.json`. A lock file keeps two processes
//! out of the same directory.

mod artifacts;
mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use artifacts::{EmbeddingFile, ImageSet, ItemError, Manifest, ManifestItem, Split, EMBEDDING_MAGIC, IMAGES_MAGIC};
pub use config::{
    finding_names, ArchitectureConfig, ClassifierConfig, DataConfig, DataSource, EmbeddingKind, EnsembleConfig, ForestOverrides,
    GbmOverrides, GridConfig, LabelConfig, PolicyName, PreprocessConfig, RunConfig, SyntheticConfig, VaeConfig,
};

use crate::classifiers::{grid_search, load_model, save_model, Classifier, ClassifierKind};
use crate::container::{digest_bytes, digest_file, write_atomic};
use crate::ensemble::{ensemble, EnsembleMethod, PredictionMatrix};
use crate::error::{Error, Result};
use crate::imaging::{
    center_crop, generate_synthetic_dataset, load_gray, mean_image, replicate_channels, resize_bilinear, save_gray8, save_png16,
    template_match_crop, GrayImage, Template,
};
use crate::labels::{apply_uncertainty_policy_with, binarize_targets, read_label_csv, write_label_csv, LabelRecord};
use crate::metrics::{write_report_csv, write_roc_points_csv, AurocReport};
use crate::numerics::RngStream;
use crate::vae::{extract_embeddings, load_checkpoint, save_checkpoint, Checkpoint, Trainer, VaeModel};

/// Seed of a named sub-stream of the master seed. Stages draw from disjoint
/// names, so reseeding one stage leaves the others untouched.
pub fn stage_seed(master: u64, name: &str) -> u64 {
    RngStream::new(master, 0).split_named(name).next_u64()
}

const LOCK_FILE: &str = ".lock";
const CONFIG_FILE: &str = "config.toml";
const MANIFEST_FILE: &str = "manifest.json";
const DIGESTS_FILE: &str = "digests.json";

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainVaeOptions {
    /// Stop once a checkpoint has run this many epochs in total, leaving
    /// its partial checkpoint behind as an interrupted run would.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedVae {
    pub tag: String,
    pub latent_dim: usize,
    pub epochs_run: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub source: String,
    pub latent_dim: usize,
    pub kind: ClassifierKind,
    pub hyper: String,
    /// Mean AUROC on the rows the model was fitted on.
    pub fit_mean_auroc: Option<f64>,
    /// Best held-out mean AUROC when the grid search ran.
    pub holdout_mean_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResult {
    pub source: String,
    pub latent_dim: usize,
    pub kind: ClassifierKind,
    pub report: AurocReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub latent_dim: usize,
    pub kind: ClassifierKind,
    pub method: EnsembleMethod,
    pub members: Vec<String>,
    pub report: AurocReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub models: Vec<ModelResult>,
    pub ensembles: Vec<EnsembleResult>,
}

impl Evaluation {
    pub fn model(&self, source: &str, kind: ClassifierKind) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.source == source && m.kind == kind)
    }

    pub fn ensemble(&self, latent_dim: usize, kind: ClassifierKind, method: EnsembleMethod) -> Option<&EnsembleResult> {
        self.ensembles
            .iter()
            .find(|e| e.latent_dim == latent_dim && e.kind == kind && e.method == method)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub latent_dim: usize,
    pub model: String,
    /// Formatted AUROC cells, one per class and then the mean.
    pub cells: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub classes: Vec<String>,
    pub rows: Vec<SummaryRow>,
    pub model_rows: usize,
    pub ensemble_rows: usize,
    pub missing: Vec<String>,
    /// Columns in the reconstruction grid: the original plus one per checkpoint.
    pub reconstruction_columns: usize,
}

/// An open run directory. Holding a `Run` holds the directory lock.
pub struct Run {
    dir: PathBuf,
    config: Option<RunConfig>,
    digests: BTreeMap<String, String>,
    _lock: RunLock,
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Data(format!("json: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn checkpoint_name(tag: &str) -> String {
    format!("vae/{tag}.ckpt")
}

fn partial_name(tag: &str) -> String {
    format!("vae/{tag}.partial.ckpt")
}

fn embedding_name(tag: &str, split: Split) -> String {
    format!("embeddings/{tag}.{split}.lbe")
}

fn model_stem(tag: &str, kind: ClassifierKind) -> String {
    format!("{tag}__{kind}")
}

fn images_name(split: Split) -> String {
    format!("prepared/{split}.lbi")
}

/// Key that keeps a patient's studies together, e.g. `patient00042` in
/// `train/patient00042/study1/view1_frontal.jpg`.
fn patient_key(path: &str) -> String {
    let parts: Vec<&str> = path.split(['/', '\\']).filter(|p| !p.is_empty()).collect();
    parts
        .iter()
        .find(|p| p.starts_with("patient"))
        .or(parts.first())
        .map(|s| s.to_string())
        .unwrap_or_default()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

impl Run {
    /// Opens (creating if needed) a run directory. A given config is
    /// recorded on first use and must match the recorded one afterwards;
    /// without one the recorded config is used if present.
    pub fn open(dir: &Path, config: Option<RunConfig>) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = RunLock::acquire(dir)?;
        let snapshot = dir.join(CONFIG_FILE);
        let recorded = if snapshot.exists() { Some(RunConfig::load(&snapshot)?) } else { None };
        let config = match (config, recorded) {
            (Some(c), Some(r)) => {
                c.validate()?;
                if c != r {
                    return Err(Error::Config(format!(
                        "{} was started with a different configuration; use a fresh output directory",
                        dir.display()
                    )));
                }
                Some(c)
            }
            (Some(c), None) => {
                c.validate()?;
                write_atomic(&snapshot, c.to_toml_string()?.as_bytes())?;
                Some(c)
            }
            (None, r) => r,
        };
        let digests_path = dir.join(DIGESTS_FILE);
        let digests = if digests_path.exists() {
            let bytes = fs::read(&digests_path).map_err(|e| Error::io(&digests_path, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::format(&digests_path, e.to_string()))?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            digests,
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> Result<&RunConfig> {
        self.config
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no recorded configuration; pass --config", self.dir.display())))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn digests(&self) -> &BTreeMap<String, String> {
        &self.digests
    }

    fn record(&mut self, rel: &str, digest: String) -> Result<()> {
        self.digests.insert(rel.to_string(), digest);
        write_atomic(&self.dir.join(DIGESTS_FILE), &to_json(&self.digests)?)
    }

    fn write_recorded(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(rel), bytes)?;
        self.record(rel, digest_bytes(bytes))
    }

    /// Fails unless `rel` exists and still has its recorded digest.
    fn verify(&self, rel: &str) -> Result<String> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::Data(format!("missing artifact {rel}")));
        }
        let actual = digest_file(&path)?;
        match self.digests.get(rel) {
            Some(d) if *d == actual => Ok(actual),
            Some(_) => Err(Error::Data(format!("digest mismatch for {rel}; the file changed after it was written"))),
            None => Err(Error::Data(format!("{rel} has no recorded digest"))),
        }
    }

    pub fn manifest(&self) -> Result<Manifest> {
        self.verify(MANIFEST_FILE)?;
        let bytes = fs::read(self.path(MANIFEST_FILE)).map_err(|e| Error::io(self.path(MANIFEST_FILE), e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(self.path(MANIFEST_FILE), e.to_string()))
    }

    /// `(tag, latent_dim, architecture index)` for every configured checkpoint.
    pub fn vae_tags(&self) -> Result<Vec<(String, usize, usize)>> {
        let cfg = self.config()?;
        let mut out = Vec::new();
        for &d in &cfg.vae.latent_dims {
            for (a, arch) in cfg.vae.architectures.iter().enumerate() {
                out.push((format!("{}-d{d}", arch.name), d, a));
            }
        }
        Ok(out)
    }

    fn load_images(&self, split: Split) -> Result<(ImageSet, String)> {
        let rel = images_name(split);
        let digest = self.verify(&rel)?;
        Ok((ImageSet::load(&self.path(&rel))?, digest))
    }

    /// Generates the synthetic pool and test set under `data/`.
    fn materialize_synthetic(&mut self, cfg: &RunConfig) -> Result<[(PathBuf, PathBuf); 2]> {
        let syn = &cfg.data.synthetic;
        let mut out = Vec::new();
        for (name, n) in [("pool", syn.pool), ("test", syn.test)] {
            let spec = syn.spec(stage_seed(cfg.seed, &format!("synthetic-{name}")))?;
            let (images, records) = generate_synthetic_dataset(&spec, n)?;
            let root = self.path(&format!("data/{name}"));
            fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
            images
                .par_iter()
                .zip(&records)
                .try_for_each(|(img, rec)| save_png16(img, &root.join(&rec.path)))?;
            let labels = root.join("labels.csv");
            write_label_csv(&labels, &records)?;
            out.push((root, labels));
        }
        let test = out.pop().expect("two sets");
        let pool = out.pop().expect("two sets");
        Ok([pool, test])
    }

    /// Reads the label lists, digests and loads every image, assigns splits
    /// and writes the preprocessed image sets and the manifest.
    pub fn cmd_prepare(&mut self) -> Result<Manifest> {
        let cfg = self.config()?.clone();
        let [(pool_root, pool_labels), (test_root, test_labels)] = match cfg.data.source {
            DataSource::Synthetic => self.materialize_synthetic(&cfg)?,
            DataSource::Directory => {
                let root = cfg.data.root.clone().expect("validated");
                let test_root = cfg.data.test_root.clone().expect("validated");
                let labels = cfg.data.labels.clone().unwrap_or_else(|| root.join("labels.csv"));
                let test_labels = cfg.data.test_labels.clone().unwrap_or_else(|| test_root.join("labels.csv"));
                for p in [&root, &test_root, &labels, &test_labels] {
                    if !p.exists() {
                        return Err(Error::Data(format!("{} does not exist", p.display())));
                    }
                }
                [(root, labels), (test_root, test_labels)]
            }
        };

        struct Loaded {
            source: &'static str,
            record: LabelRecord,
            outcome: std::result::Result<(GrayImage, String), String>,
        }
        let mut loaded = Vec::new();
        for (source, root, labels) in [("pool", &pool_root, &pool_labels), ("test", &test_root, &test_labels)] {
            let records = read_label_csv(labels)?;
            let size = cfg.preprocess.resize;
            let outcomes: Vec<_> = records
                .par_iter()
                .map(|rec| {
                    let path = root.join(&rec.path);
                    let digest = digest_file(&path).map_err(|e| e.to_string())?;
                    let img = load_gray(&path).map_err(|e| e.to_string())?;
                    let img = resize_bilinear(&img, size, size).map_err(|e| e.to_string())?;
                    Ok((img, digest))
                })
                .collect();
            for (record, outcome) in records.into_iter().zip(outcomes) {
                loaded.push(Loaded { source, record, outcome });
            }
        }

        let errors: Vec<ItemError> = loaded
            .iter()
            .filter_map(|l| match &l.outcome {
                Err(message) => Some(ItemError {
                    path: format!("{}/{}", l.source, l.record.path),
                    message: message.clone(),
                }),
                Ok(_) => None,
            })
            .collect();
        if errors.len() * 100 > loaded.len() {
            let listing: Vec<String> = errors.iter().take(20).map(|e| format!("  {}: {}", e.path, e.message)).collect();
            return Err(Error::Data(format!(
                "{} of {} items failed to load (limit 1%):\n{}",
                errors.len(),
                loaded.len(),
                listing.join("\n")
            )));
        }
        let loaded: Vec<(&'static str, LabelRecord, GrayImage, String)> = loaded
            .into_iter()
            .filter_map(|l| l.outcome.ok().map(|(img, digest)| (l.source, l.record, img, digest)))
            .collect();

        let pool: Vec<usize> = (0..loaded.len()).filter(|&i| loaded[i].0 == "pool").collect();
        if pool.len() < 2 || pool.len() == loaded.len() {
            return Err(Error::Data("need at least two training-pool images and one test image".into()));
        }
        let is_train = self.assign_splits(&cfg, &pool, |i| loaded[i].1.path.as_str());

        let mut items = Vec::with_capacity(loaded.len());
        for (index, (source, record, _, digest)) in loaded.iter().enumerate() {
            let split = match (*source, is_train.get(&index)) {
                ("test", _) => Split::Test,
                (_, Some(true)) => Split::Train,
                _ => Split::Validation,
            };
            items.push(ManifestItem {
                id: format!("{source}/{}", record.path),
                index,
                split,
                path: record.path.clone(),
                digest: digest.clone(),
                labels: record.findings.iter().map(|f| f.as_cell().to_string()).collect(),
            });
        }

        let p = &cfg.preprocess;
        let template = if p.crop < p.resize {
            let img = match &p.template {
                Some(path) => load_gray(path)?,
                None => {
                    let samples: Vec<GrayImage> = items
                        .iter()
                        .filter(|it| it.split == Split::Train)
                        .take(p.template_samples)
                        .map(|it| loaded[it.index].2.clone())
                        .collect();
                    center_crop(&mean_image(&samples)?, p.crop)?
                }
            };
            Some(Template::new(img)?)
        } else {
            None
        };

        for split in Split::ALL {
            let members: Vec<&ManifestItem> = items.iter().filter(|it| it.split == split).collect();
            let images = members
                .par_iter()
                .map(|it| {
                    let img = &loaded[it.index].2;
                    let cropped = match &template {
                        Some(t) => template_match_crop(img, t, p.crop)?.image,
                        None => img.clone(),
                    };
                    Ok(replicate_channels(&cropped, p.channels)?.data)
                })
                .collect::<Result<Vec<_>>>()?;
            let set = ImageSet {
                split,
                ids: members.iter().map(|it| it.id.clone()).collect(),
                channels: p.channels,
                height: p.crop,
                width: p.crop,
                images,
            };
            let rel = images_name(split);
            let digest = set.save(&self.path(&rel))?;
            self.record(&rel, digest)?;
        }

        let manifest = Manifest {
            seed: cfg.seed,
            items,
            errors,
            access: Manifest::default_access(),
        };
        self.write_recorded(MANIFEST_FILE, &to_json(&manifest)?)?;
        Ok(manifest)
    }

    /// Marks pool positions as training (true) or validation (false).
    fn assign_splits<'a>(&self, cfg: &RunConfig, pool: &[usize], path_of: impl Fn(usize) -> &'a str) -> BTreeMap<usize, bool> {
        let n = pool.len();
        let n_train = ((n as f64 * cfg.data.train_fraction).round() as usize).clamp(1, n - 1);
        let mut rng = RngStream::new(cfg.seed, 0).split_named("split");
        let mut out = BTreeMap::new();
        if cfg.data.group_by_patient {
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for &i in pool {
                groups.entry(patient_key(path_of(i))).or_default().push(i);
            }
            let mut keys: Vec<&String> = groups.keys().collect();
            rng.shuffle(&mut keys);
            let mut taken = 0;
            for key in keys {
                let members = &groups[key];
                let train = taken < n_train;
                if train {
                    taken += members.len();
                }
                for &i in members {
                    out.insert(i, train);
                }
            }
        } else {
            let mut order = pool.to_vec();
            rng.shuffle(&mut order);
            for (rank, &i) in order.iter().enumerate() {
                out.insert(i, rank < n_train);
            }
        }
        out
    }

    /// Trains one checkpoint per architecture and latent size, resuming
    /// from partial checkpoints and skipping finished ones.
    pub fn cmd_train_vae(&mut self, opts: &TrainVaeOptions) -> Result<Vec<TrainedVae>> {
        let cfg = self.config()?.clone();
        let manifest = self.manifest()?;
        manifest.check_access(Split::Train, "train-vae")?;
        manifest.check_access(Split::Validation, "train-vae")?;
        let (train, _) = self.load_images(Split::Train)?;
        let (val, _) = self.load_images(Split::Validation)?;
        let sched = cfg.vae.beta_schedule();
        let mut out = Vec::new();
        for (tag, dim, a) in self.vae_tags()? {
            let arch_cfg = &cfg.vae.architectures[a];
            let arch = cfg.vae.architecture(arch_cfg, dim, train.channels, train.height);
            let seed = arch_cfg.seed.unwrap_or_else(|| stage_seed(cfg.seed, &format!("vae/{tag}")));
            let train_cfg = cfg.vae.train_config(seed);
            let matches = |c: &Checkpoint| c.tag == tag && c.architecture == arch && c.train == train_cfg && c.beta == sched;

            let final_rel = checkpoint_name(&tag);
            if self.path(&final_rel).exists() {
                let done = load_checkpoint(&self.path(&final_rel))?;
                if done.complete && matches(&done) && self.verify(&final_rel).is_ok() {
                    out.push(TrainedVae {
                        tag,
                        latent_dim: dim,
                        epochs_run: 0,
                        complete: true,
                    });
                    continue;
                }
            }

            let model = VaeModel::new(arch.clone())?;
            let partial = self.path(&partial_name(&tag));
            let resumed = if partial.exists() {
                let c = load_checkpoint(&partial)?;
                matches(&c).then_some(c.state)
            } else {
                None
            };
            let mut trainer = match resumed {
                Some(state) => Trainer::resume(&model, &train.images, &val.images, &train_cfg, &sched, state)?,
                None => Trainer::new(&model, &train.images, &val.images, &train_cfg, &sched)?,
            };
            let mut epochs_run = 0;
            while !trainer.is_finished() {
                if opts.stop_after_epoch.is_some_and(|n| trainer.state().next_epoch >= n) {
                    out.push(TrainedVae {
                        tag,
                        latent_dim: dim,
                        epochs_run,
                        complete: false,
                    });
                    return Ok(out);
                }
                trainer.run_epoch()?;
                epochs_run += 1;
                let ckpt = Checkpoint {
                    tag: tag.clone(),
                    architecture: arch.clone(),
                    train: train_cfg.clone(),
                    beta: sched,
                    state: trainer.state().clone(),
                    complete: false,
                };
                save_checkpoint(&partial, &ckpt)?;
            }
            let state = trainer.into_state();
            let mut log = csv::Writer::from_writer(Vec::new());
            log.write_record(["epoch", "rec_loss", "kl_loss", "beta", "lr", "val_loss"])
                .map_err(csv_error)?;
            for e in &state.log {
                log.write_record([
                    e.epoch.to_string(),
                    e.rec_loss.to_string(),
                    e.kl_loss.to_string(),
                    e.beta.to_string(),
                    e.lr.to_string(),
                    e.val_loss.to_string(),
                ])
                .map_err(csv_error)?;
            }
            let log = log.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
            self.write_recorded(&format!("vae/{tag}.log.csv"), &log)?;
            let ckpt = Checkpoint {
                tag: tag.clone(),
                architecture: arch,
                train: train_cfg,
                beta: sched,
                state,
                complete: true,
            };
            let digest = save_checkpoint(&self.path(&final_rel), &ckpt)?;
            self.record(&final_rel, digest)?;
            let _ = fs::remove_file(&partial);
            out.push(TrainedVae {
                tag,
                latent_dim: dim,
                epochs_run,
                complete: true,
            });
        }
        Ok(out)
    }

    /// Writes embedding files for the requested splits. The test split is
    /// refused here; evaluation extracts it itself.
    pub fn cmd_extract(&mut self, splits: &[Split]) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for &split in splits {
            out.extend(self.extract_split(split, "extract")?);
        }
        Ok(out)
    }

    fn extract_split(&mut self, split: Split, stage: &str) -> Result<Vec<PathBuf>> {
        let cfg = self.config()?.clone();
        let manifest = self.manifest()?;
        manifest.check_access(split, stage)?;
        let (images, images_digest) = self.load_images(split)?;
        let items = manifest.split_items(split);
        if items.len() != images.ids.len() || items.iter().zip(&images.ids).any(|(it, id)| it.id != *id) {
            return Err(Error::Shape(format!("{split} image set does not follow the manifest order")));
        }
        let policy = cfg.labels.policy()?;
        let eval = cfg.labels.eval_set()?;
        let lsr = RngStream::new(cfg.seed, 0).split_named("lsr");
        let targets = items
            .iter()
            .map(|it| {
                let resolved = apply_uncertainty_policy_with(&it.record()?, policy, cfg.labels.unmentioned, &mut lsr.split(it.index as u64))?;
                Ok(eval.project(&binarize_targets(&resolved, cfg.labels.threshold)?))
            })
            .collect::<Result<Vec<Vec<bool>>>>()?;
        let class_names = cfg.eval_class_names()?;

        let mut out = Vec::new();
        for (tag, dim, _) in self.vae_tags()? {
            let ckpt_rel = checkpoint_name(&tag);
            if !self.path(&ckpt_rel).exists() {
                return Err(Error::Data(format!("checkpoint {ckpt_rel} is missing; run train-vae first")));
            }
            let ckpt_digest = self.verify(&ckpt_rel)?;
            let ckpt = load_checkpoint(&self.path(&ckpt_rel))?;
            if !ckpt.complete {
                return Err(Error::Data(format!("checkpoint {ckpt_rel} is incomplete")));
            }
            let a = &ckpt.architecture;
            if a.latent_dim != dim || a.input_len() != images.pixel_len() || a.input_height != images.height {
                return Err(Error::Shape(format!(
                    "checkpoint {tag} expects {}x{}x{} inputs with D = {}, images are {}x{}x{}",
                    a.input_channels, a.input_height, a.input_width, a.latent_dim, images.channels, images.height, images.width
                )));
            }
            let model = VaeModel::new(a.clone())?;
            let mode = cfg.vae.embedding_mode(stage_seed(cfg.seed, &format!("embed/{tag}/{split}")));
            let features = extract_embeddings(&model, &ckpt.state.params, &images.images, mode)?;
            let file = EmbeddingFile {
                source_tag: tag.clone(),
                split,
                row_ids: images.ids.clone(),
                dim,
                class_names: class_names.clone(),
                features,
                targets: targets.clone(),
                inputs: BTreeMap::from([
                    ("checkpoint".to_string(), ckpt_digest),
                    ("images".to_string(), images_digest.clone()),
                ]),
            };
            let rel = embedding_name(&tag, split);
            let digest = file.save(&self.path(&rel))?;
            self.record(&rel, digest)?;
            out.push(self.path(&rel));
        }
        Ok(out)
    }

    /// Fits every configured classifier on the validation-split embeddings
    /// of every checkpoint and writes the model files and a score table.
    pub fn cmd_train_clf(&mut self) -> Result<Vec<ScoreRow>> {
        let cfg = self.config()?.clone();
        let manifest = self.manifest()?;
        manifest.check_access(Split::Validation, "train-clf")?;
        let mut rows = Vec::new();
        for (tag, dim, _) in self.vae_tags()? {
            let emb_rel = embedding_name(&tag, Split::Validation);
            if !self.path(&emb_rel).exists() {
                return Err(Error::Data(format!("{emb_rel} is missing; run extract first")));
            }
            let emb_digest = self.verify(&emb_rel)?;
            let table = EmbeddingFile::load(&self.path(&emb_rel))?.table()?;
            for &kind in &cfg.classifiers.kinds {
                let seed = stage_seed(cfg.seed, &format!("per-tree/{tag}/{kind}"));
                let mut hyper = cfg.classifiers.hyper(kind);
                let mut holdout = None;
                if cfg.classifiers.grid_search {
                    let split_seed = stage_seed(cfg.seed, &format!("grid-holdout/{tag}"));
                    let (fit, held) = table.split_holdout(cfg.classifiers.holdout_fraction, split_seed)?;
                    let result = grid_search(&fit, &held, &cfg.classifiers.grid.spec(), kind, &hyper, seed)?;
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(["hyper", "mean_auroc"]).map_err(csv_error)?;
                    for r in &result.table {
                        let h = serde_json::to_string(&r.hyper).map_err(|e| Error::Data(e.to_string()))?;
                        w.write_record([h, r.mean_auroc.to_string()]).map_err(csv_error)?;
                    }
                    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
                    self.write_recorded(&format!("models/{}.grid.csv", model_stem(&tag, kind)), &bytes)?;
                    hyper = result.best;
                    holdout = Some(result.best_score);
                }
                let model = Classifier::fit(kind, &table, &hyper, seed)?;
                let fit_probs = model.predict_proba(&table.feature_rows())?;
                let fit_report = AurocReport::compute(kind.name(), table.class_names(), &fit_probs, &table.target_rows())?;
                let rel = format!("models/{}.lbm", model_stem(&tag, kind));
                let digest = save_model(&self.path(&rel), &model, table.class_names(), seed, Some(&emb_digest))?;
                self.record(&rel, digest)?;
                rows.push(ScoreRow {
                    source: tag.clone(),
                    latent_dim: dim,
                    kind,
                    hyper: serde_json::to_string(&hyper).map_err(|e| Error::Data(e.to_string()))?,
                    fit_mean_auroc: fit_report.mean(),
                    holdout_mean_auroc: holdout,
                });
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["source", "latent_dim", "kind", "hyper", "fit_mean_auroc", "holdout_mean_auroc"])
            .map_err(csv_error)?;
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &rows {
            w.write_record([
                r.source.clone(),
                r.latent_dim.to_string(),
                r.kind.to_string(),
                r.hyper.clone(),
                cell(r.fit_mean_auroc),
                cell(r.holdout_mean_auroc),
            ])
            .map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        self.write_recorded("models/scores.csv", &bytes)?;
        Ok(rows)
    }

    /// Extracts the test split, scores every model on it and builds the
    /// per-kind ensembles across checkpoints of equal latent size.
    pub fn cmd_evaluate(&mut self) -> Result<Evaluation> {
        let cfg = self.config()?.clone();
        self.extract_split(Split::Test, "evaluate")?;
        let class_names = cfg.eval_class_names()?;
        let tags = self.vae_tags()?;

        let mut eval = Evaluation::default();
        // (latent_dim, kind) -> [(tag, row ids, predictions)]
        let mut groups: BTreeMap<(usize, ClassifierKind), Vec<(String, Vec<String>, Vec<Vec<f64>>)>> = BTreeMap::new();
        let mut labels_by_dim: BTreeMap<usize, Vec<Vec<bool>>> = BTreeMap::new();
        for (tag, dim, _) in &tags {
            let test = EmbeddingFile::load(&self.path(&embedding_name(tag, Split::Test)))?;
            for &kind in &cfg.classifiers.kinds {
                let stem = model_stem(tag, kind);
                let rel = format!("models/{stem}.lbm");
                if !self.path(&rel).exists() {
                    return Err(Error::Data(format!("{rel} is missing; run train-clf first")));
                }
                self.verify(&rel)?;
                let (model, names) = load_model(&self.path(&rel), |digest| {
                    let emb_rel = embedding_name(tag, Split::Validation);
                    if self.verify(&emb_rel)? != digest {
                        return Err(Error::Data(format!("{rel} was fitted on a different {emb_rel}")));
                    }
                    EmbeddingFile::load(&self.path(&emb_rel))?.table()
                })?;
                if names != test.class_names {
                    return Err(Error::Shape(format!("{rel} classes differ from the test embeddings")));
                }
                let probs = model.predict_proba(&test.features)?;
                let report = AurocReport::compute(&format!("{tag}-{kind}"), &class_names, &probs, &test.targets)?;
                let mut csv_bytes = Vec::new();
                write_report_csv(&mut csv_bytes, std::slice::from_ref(&report))?;
                self.write_recorded(&format!("reports/models/{stem}.csv"), &csv_bytes)?;
                let mut roc = Vec::new();
                write_roc_points_csv(&mut roc, &class_names, &probs, &test.targets)?;
                self.write_recorded(&format!("reports/models/{stem}.roc.csv"), &roc)?;
                eval.models.push(ModelResult {
                    source: tag.clone(),
                    latent_dim: *dim,
                    kind,
                    report,
                });
                groups.entry((*dim, kind)).or_default().push((tag.clone(), test.row_ids.clone(), probs));
            }
            labels_by_dim.entry(*dim).or_insert_with(|| test.targets.clone());
        }

        for ((dim, kind), members) in &groups {
            if members.len() < 2 {
                continue;
            }
            let (_, first_ids, _) = &members[0];
            if let Some((tag, _, _)) = members.iter().find(|(_, ids, _)| ids != first_ids) {
                return Err(Error::Shape(format!("test rows of {tag} are not aligned with {}", members[0].0)));
            }
            let matrices = members
                .iter()
                .map(|(tag, _, probs)| PredictionMatrix::from_rows(tag.clone(), probs))
                .collect::<Result<Vec<_>>>()?;
            let labels = &labels_by_dim[dim];
            let member_reports: Vec<AurocReport> = members
                .iter()
                .map(|(tag, _, _)| eval.model(tag, *kind).expect("member was scored").report.clone())
                .collect();
            for &method in &cfg.ensemble.methods {
                let combined = ensemble(&matrices, method)?;
                let report = AurocReport::compute(
                    &format!("{}-{kind}", method.name()),
                    &class_names,
                    &combined.prediction.to_rows(),
                    labels,
                )?;
                let mut rows = member_reports.clone();
                rows.push(report.clone());
                let mut bytes = Vec::new();
                write_report_csv(&mut bytes, &rows)?;
                self.write_recorded(&format!("reports/ensembles/d{dim}__{kind}__{}.csv", method.name()), &bytes)?;
                eval.ensembles.push(EnsembleResult {
                    latent_dim: *dim,
                    kind: *kind,
                    method,
                    members: members.iter().map(|(t, _, _)| t.clone()).collect(),
                    report,
                });
            }
        }
        Ok(eval)
    }

    /// Verifies the digest chain and writes `reports/summary.csv`,
    /// `reports/summary.md` and `reports/reconstructions.png`.
    pub fn cmd_report(&mut self) -> Result<ReportSummary> {
        let expected_kinds = [
            MANIFEST_FILE,
            "prepared/{train,validation,test}.lbi",
            "vae/<architecture>-d<D>.ckpt",
            "embeddings/<tag>.<split>.lbe",
            "models/<tag>__<kind>.lbm",
            "reports/models/<tag>__<kind>.csv",
        ];
        if self.digests.is_empty() {
            return Err(Error::Data(format!(
                "{} contains no run artifacts; expected {}",
                self.dir.display(),
                expected_kinds.join(", ")
            )));
        }

        let mut missing = Vec::new();
        for (rel, digest) in &self.digests {
            let path = self.path(rel);
            if !path.exists() {
                missing.push(rel.clone());
            } else if digest_file(&path)? != *digest {
                return Err(Error::Data(format!("digest mismatch for {rel}; the file changed after it was written")));
            }
        }
        for rel in self.digests.keys().filter(|r| r.starts_with("embeddings/") && r.ends_with(".lbe")) {
            if !self.path(rel).exists() {
                continue;
            }
            let file = EmbeddingFile::load(&self.path(rel))?;
            let links = [
                ("checkpoint", checkpoint_name(&file.source_tag)),
                ("images", images_name(file.split)),
            ];
            for (key, source) in links {
                if file.inputs.get(key) != self.digests.get(&source) {
                    return Err(Error::Data(format!("{rel} was computed from an older {source}")));
                }
            }
        }

        if let Some(cfg) = self.config.clone() {
            let mut expected: Vec<String> = vec![MANIFEST_FILE.to_string()];
            expected.extend(Split::ALL.iter().map(|&s| images_name(s)));
            for (tag, _, _) in self.vae_tags()? {
                expected.push(checkpoint_name(&tag));
                expected.push(embedding_name(&tag, Split::Validation));
                expected.push(embedding_name(&tag, Split::Test));
                for &kind in &cfg.classifiers.kinds {
                    expected.push(format!("models/{}.lbm", model_stem(&tag, kind)));
                    expected.push(format!("reports/models/{}.csv", model_stem(&tag, kind)));
                }
            }
            for rel in expected {
                if !self.digests.contains_key(&rel) && !missing.contains(&rel) {
                    missing.push(rel);
                }
            }
        }
        missing.sort();

        let mut classes: Vec<String> = Vec::new();
        let mut rows = Vec::new();
        let mut model_rows = 0;
        let mut ensemble_rows = 0;
        let model_reports: Vec<String> = self
            .digests
            .keys()
            .filter(|r| r.starts_with("reports/models/") && r.ends_with(".csv") && !r.ends_with(".roc.csv"))
            .cloned()
            .collect();
        let ensemble_reports: Vec<String> = self
            .digests
            .keys()
            .filter(|r| r.starts_with("reports/ensembles/") && r.ends_with(".csv"))
            .cloned()
            .collect();
        let dims_of_model = |rel: &str| -> Option<usize> {
            let stem = rel.rsplit('/').next()?.strip_suffix(".csv")?;
            let tag = stem.split("__").next()?;
            tag.rsplit_once("-d")?.1.parse().ok()
        };
        let dims_of_ensemble = |rel: &str| -> Option<usize> {
            let stem = rel.rsplit('/').next()?;
            stem.strip_prefix('d')?.split("__").next()?.parse().ok()
        };
        for (list, is_ensemble) in [(&model_reports, false), (&ensemble_reports, true)] {
            for rel in list {
                let path = self.path(rel);
                if !path.exists() {
                    continue;
                }
                let dim = if is_ensemble { dims_of_ensemble(rel) } else { dims_of_model(rel) }
                    .ok_or_else(|| Error::Data(format!("cannot read the latent size from {rel}")))?;
                let mut reader = csv::Reader::from_path(&path).map_err(csv_error)?;
                let header: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
                if header.len() < 3 {
                    return Err(Error::format(&path, "report needs model, class and mean columns"));
                }
                let these = header[1..header.len() - 1].to_vec();
                if classes.is_empty() {
                    classes = these;
                } else if classes != these {
                    return Err(Error::format(&path, "classes differ from other reports"));
                }
                let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>().map_err(csv_error)?;
                let last = records.last().ok_or_else(|| Error::format(&path, "empty report"))?;
                rows.push(SummaryRow {
                    latent_dim: dim,
                    model: last[0].to_string(),
                    cells: last.iter().skip(1).map(str::to_string).collect(),
                });
                if is_ensemble {
                    ensemble_rows += 1;
                } else {
                    model_rows += 1;
                }
            }
        }
        rows.sort_by_key(|r| r.latent_dim);

        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["latent_dim".to_string(), "model".to_string()];
        header.extend(classes.iter().cloned());
        header.push("mean".into());
        w.write_record(&header).map_err(csv_error)?;
        for r in &rows {
            let mut rec = vec![r.latent_dim.to_string(), r.model.clone()];
            rec.extend(r.cells.iter().cloned());
            w.write_record(&rec).map_err(csv_error)?;
        }
        let summary_csv = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;

        let reconstruction_columns = self.write_reconstructions()?;

        let mut md = String::from("# Run summary\n");
        let dims: BTreeSet<usize> = rows.iter().map(|r| r.latent_dim).collect();
        for dim in &dims {
            md.push_str(&format!("\n## Latent size {dim}\n\n| Model | {} | Mean |\n", classes.join(" | ")));
            md.push_str(&format!("|---|{}---|\n", "---|".repeat(classes.len())));
            for r in rows.iter().filter(|r| r.latent_dim == *dim) {
                md.push_str(&format!("| {} | {} |\n", r.model, r.cells.join(" | ")));
            }
        }
        if rows.is_empty() {
            md.push_str("\nNo evaluation reports yet.\n");
        }
        if reconstruction_columns > 0 {
            md.push_str(&format!(
                "\nReconstructions: `reconstructions.png`, the original then {} checkpoint columns.\n",
                reconstruction_columns - 1
            ));
        }
        if !missing.is_empty() {
            md.push_str("\n## Missing artifacts\n\n");
            for m in &missing {
                md.push_str(&format!("- `{m}`\n"));
            }
        }
        self.write_recorded("reports/summary.csv", &summary_csv)?;
        self.write_recorded("reports/summary.md", md.as_bytes())?;

        Ok(ReportSummary {
            classes,
            rows,
            model_rows,
            ensemble_rows,
            missing,
            reconstruction_columns,
        })
    }

    /// Grid of validation images: the original in the first column, then
    /// the decoded mean code of each finished checkpoint. Returns the column
    /// count, or 0 when there is nothing to draw.
    fn write_reconstructions(&mut self) -> Result<usize> {
        const SAMPLES: usize = 4;
        const GAP: usize = 2;
        let images_rel = images_name(Split::Validation);
        if !self.digests.contains_key(&images_rel) || !self.path(&images_rel).exists() {
            return Ok(0);
        }
        let (images, _) = self.load_images(Split::Validation)?;
        let mut ckpts: Vec<String> = self
            .digests
            .keys()
            .filter(|r| r.starts_with("vae/") && r.ends_with(".ckpt"))
            .cloned()
            .collect();
        if let Ok(tags) = self.vae_tags() {
            let order: Vec<String> = tags.iter().map(|(t, _, _)| checkpoint_name(t)).collect();
            ckpts.sort_by_key(|r| order.iter().position(|o| o == r).unwrap_or(usize::MAX));
        }
        let mut decoders = Vec::new();
        for rel in &ckpts {
            let ckpt = load_checkpoint(&self.path(rel))?;
            if ckpt.architecture.input_len() == images.pixel_len() {
                decoders.push(ckpt);
            }
        }
        if decoders.is_empty() {
            return Ok(0);
        }
        let (h, w) = (images.height, images.width);
        let n = images.images.len().min(SAMPLES);
        let cols = 1 + decoders.len();
        let gw = cols * w + (cols - 1) * GAP;
        let gh = n * h + n.saturating_sub(1) * GAP;
        let mut grid = vec![1.0; gw * gh];
        let mut put = |row: usize, col: usize, plane: &[f64]| {
            for r in 0..h {
                let y = row * (h + GAP) + r;
                let x0 = col * (w + GAP);
                grid[y * gw + x0..y * gw + x0 + w].copy_from_slice(&plane[r * w..(r + 1) * w]);
            }
        };
        for (i, x) in images.images.iter().take(n).enumerate() {
            put(i, 0, &x[..h * w]);
            for (j, ckpt) in decoders.iter().enumerate() {
                let model = VaeModel::new(ckpt.architecture.clone())?;
                let (mean, _) = model.encode(&ckpt.state.params, x)?;
                let decoded = model.decode(&ckpt.state.params, &mean)?;
                put(i, j + 1, &decoded[..h * w]);
            }
        }
        let rel = "reports/reconstructions.png";
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_gray8(&GrayImage::new(gw, gh, grid)?, &path)?;
        let digest = digest_file(&path)?;
        self.record(rel, digest)?;
        Ok(cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        assert_eq!(stage_seed(3, "split"), stage_seed(3, "split"));
        assert_ne!(stage_seed(3, "split"), stage_seed(3, "lsr"));
        assert_ne!(stage_seed(3, "split"), stage_seed(4, "split"));
    }

    #[test]
    fn patient_keys() {
        assert_eq!(patient_key("train/patient00042/study1/view1_frontal.jpg"), "patient00042");
        assert_eq!(patient_key("img_000001.png"), "img_000001.png");
        assert_eq!(patient_key("a/b.png"), "a");
    }

    #[test]
    fn second_open_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::open(dir.path(), Some(RunConfig::default())).unwrap();
        assert!(matches!(Run::open(dir.path(), None), Err(Error::Locked(_))));
        drop(run);
        let again = Run::open(dir.path(), None).unwrap();
        assert_eq!(again.config().unwrap(), &RunConfig::default());
    }

    #[test]
    fn changed_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        drop(Run::open(dir.path(), Some(RunConfig::default())).unwrap());
        let other = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        assert!(matches!(Run::open(dir.path(), Some(other)), Err(Error::Config(_))));
    }

    #[test]
    fn empty_run_report_lists_expected_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::open(dir.path(), None).unwrap();
        match run.cmd_report() {
            Err(Error::Data(m)) => assert!(m.contains("manifest.json") && m.contains(".ckpt")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
