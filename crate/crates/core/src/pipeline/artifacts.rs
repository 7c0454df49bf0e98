//! On-disk formats owned by the pipeline: the manifest, preprocessed image
//! sets and embedding files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifiers::EmbeddingTable;
use crate::container::{self, put_f64s, Reader};
use crate::error::{Error, Result};
use crate::labels::{parse_label_row, LabelRecord, NUM_FINDINGS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// One source image with its split assignment and raw label cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// Position in the manifest; keys the per-item label stream.
    pub index: usize,
    pub split: Split,
    pub path: String,
    pub digest: String,
    pub labels: Vec<String>,
}

impl ManifestItem {
    pub fn record(&self) -> Result<LabelRecord> {
        let mut row = Vec::with_capacity(NUM_FINDINGS + 1);
        row.push(self.path.clone());
        row.extend(self.labels.iter().cloned());
        parse_label_row(&row)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub items: Vec<ManifestItem>,
    pub errors: Vec<ItemError>,
    /// Stages allowed to read each split.
    pub access: BTreeMap<Split, Vec<String>>,
}

impl Manifest {
    pub fn split_items(&self, split: Split) -> Vec<&ManifestItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.items.iter().filter(|i| i.split == split).count()
    }

    /// Fails with an access violation unless `stage` may read `split`.
    pub fn check_access(&self, split: Split, stage: &str) -> Result<()> {
        match self.access.get(&split) {
            Some(stages) if stages.iter().any(|s| s == stage) => Ok(()),
            _ => Err(Error::AccessViolation { stage: stage.to_string() }),
        }
    }

    pub fn default_access() -> BTreeMap<Split, Vec<String>> {
        let all = ["prepare", "train-vae", "extract", "train-clf", "evaluate", "report"];
        let mut m = BTreeMap::new();
        for split in [Split::Train, Split::Validation] {
            m.insert(split, all.iter().map(|s| s.to_string()).collect());
        }
        m.insert(Split::Test, vec!["prepare".into(), "evaluate".into()]);
        m
    }
}

pub const IMAGES_MAGIC: &[u8; 4] = b"LBI1";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"LBE1";
pub const FORMAT_VERSION: u32 = 1;

/// Preprocessed images of one split, channel-planar and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub split: Split,
    pub ids: Vec<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ImageHeader {
    split: Split,
    rows: usize,
    channels: usize,
    height: usize,
    width: usize,
    ids: Vec<String>,
}

impl ImageSet {
    pub fn pixel_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let len = self.pixel_len();
        if self.ids.len() != self.images.len() || self.images.iter().any(|x| x.len() != len) {
            return Err(Error::Shape("image set rows disagree with header".into()));
        }
        let header = ImageHeader {
            split: self.split,
            rows: self.images.len(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            ids: self.ids.clone(),
        };
        let mut payload = Vec::with_capacity(8 * len * self.images.len());
        for x in &self.images {
            put_f64s(&mut payload, x);
        }
        container::write(path, IMAGES_MAGIC, FORMAT_VERSION, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d = container::read::<ImageHeader>(path, IMAGES_MAGIC)?;
        let h = d.header;
        if d.version != FORMAT_VERSION || h.ids.len() != h.rows {
            return Err(Error::format(path, "inconsistent image set header"));
        }
        let len = h.channels * h.height * h.width;
        if d.payload.len() != 8 * len * h.rows {
            return Err(Error::format(path, "payload length disagrees with header"));
        }
        let mut r = Reader::new(path, &d.payload);
        let images = (0..h.rows).map(|_| r.f64s(len)).collect::<Result<_>>()?;
        Ok(Self {
            split: h.split,
            ids: h.ids,
            channels: h.channels,
            height: h.height,
            width: h.width,
            images,
        })
    }
}

/// Latent features of one split under one checkpoint, with binary targets
/// for the evaluated classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub source_tag: String,
    pub split: Split,
    pub row_ids: Vec<String>,
    pub dim: usize,
    pub class_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Vec<bool>>,
    /// Digests of the checkpoint and image set this file was computed from.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    source_tag: String,
    split: Split,
    rows: usize,
    dim: usize,
    class_names: Vec<String>,
    row_ids: Vec<String>,
    inputs: BTreeMap<String, String>,
}

impl EmbeddingFile {
    pub fn save(&self, path: &Path) -> Result<String> {
        let (n, k) = (self.row_ids.len(), self.class_names.len());
        if self.features.len() != n
            || self.targets.len() != n
            || self.features.iter().any(|r| r.len() != self.dim)
            || self.targets.iter().any(|r| r.len() != k)
        {
            return Err(Error::Shape("embedding rows disagree with header".into()));
        }
        let header = EmbeddingHeader {
            source_tag: self.source_tag.clone(),
            split: self.split,
            rows: n,
            dim: self.dim,
            class_names: self.class_names.clone(),
            row_ids: self.row_ids.clone(),
            inputs: self.inputs.clone(),
        };
        let mut payload = Vec::with_capacity(8 * n * self.dim + n * k);
        for r in &self.features {
            put_f64s(&mut payload, r);
        }
        for r in &self.targets {
            payload.extend(r.iter().map(|&t| t as u8));
        }
        container::write(path, EMBEDDING_MAGIC, FORMAT_VERSION, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d = container::read::<EmbeddingHeader>(path, EMBEDDING_MAGIC)?;
        let h = d.header;
        let k = h.class_names.len();
        if d.version != FORMAT_VERSION || h.row_ids.len() != h.rows {
            return Err(Error::format(path, "inconsistent embedding header"));
        }
        if d.payload.len() != h.rows * (8 * h.dim + k) {
            return Err(Error::format(path, "payload length disagrees with header"));
        }
        let mut r = Reader::new(path, &d.payload);
        let features = (0..h.rows).map(|_| r.f64s(h.dim)).collect::<Result<Vec<_>>>()?;
        let mut targets = Vec::with_capacity(h.rows);
        for _ in 0..h.rows {
            let bytes = r.take(k)?;
            if bytes.iter().any(|&b| b > 1) {
                return Err(Error::format(path, "target byte outside {0, 1}"));
            }
            targets.push(bytes.iter().map(|&b| b == 1).collect());
        }
        Ok(Self {
            source_tag: h.source_tag,
            split: h.split,
            row_ids: h.row_ids,
            dim: h.dim,
            class_names: h.class_names,
            features,
            targets,
            inputs: h.inputs,
        })
    }

    pub fn table(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::new(self.row_ids.clone(), &self.features, self.class_names.clone(), &self.targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_round_trip_and_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.lbe");
        let f = EmbeddingFile {
            source_tag: "a-d2".into(),
            split: Split::Validation,
            row_ids: vec!["x".into(), "y".into(), "z".into()],
            dim: 2,
            class_names: vec!["c".into()],
            features: vec![vec![0.1, -2.0], vec![3.5, 0.0], vec![1e-300, 7.0]],
            targets: vec![vec![true], vec![false], vec![true]],
            inputs: BTreeMap::from([("checkpoint".to_string(), "ab".to_string())]),
        };
        let digest = f.save(&path).unwrap();
        assert_eq!(digest, container::digest_file(&path).unwrap());
        assert_eq!(EmbeddingFile::load(&path).unwrap(), f);

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes.truncate(n - 1);
        let len_pos = n - 1 - (3 * 8 * 2 + 3) - 8;
        bytes[len_pos..len_pos + 8].copy_from_slice(&((3 * 8 * 2 + 2) as u64).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(EmbeddingFile::load(&path).is_err());
    }

    #[test]
    fn image_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.lbi");
        let s = ImageSet {
            split: Split::Train,
            ids: vec!["a".into(), "b".into()],
            channels: 2,
            height: 1,
            width: 2,
            images: vec![vec![0.0, 0.25, 0.5, 1.0], vec![1.0, 0.0, 0.0, 0.5]],
        };
        s.save(&path).unwrap();
        assert_eq!(ImageSet::load(&path).unwrap(), s);
    }

    #[test]
    fn test_split_is_reserved_for_evaluation() {
        let m = Manifest {
            seed: 0,
            items: Vec::new(),
            errors: Vec::new(),
            access: Manifest::default_access(),
        };
        assert!(m.check_access(Split::Test, "evaluate").is_ok());
        for stage in ["train-vae", "extract", "train-clf"] {
            assert!(matches!(m.check_access(Split::Test, stage), Err(Error::AccessViolation { .. })));
            assert!(m.check_access(Split::Validation, stage).is_ok());
        }
    }
}
