//! Model files. The header records kind, hyperparameters, seed and class
//! names; trees follow in the payload as packed nodes. Nearest-neighbour
//! models store only the digest of their embedding table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tree::{Node, Tree};
use super::{Classifier, ClassifierHyper, ClassifierKind, EmbeddingTable, ForestKind, ForestModel, GbmClass, GbmModel, KnnModel};
use crate::container::{self, put_f64s, Reader};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"LBM1";
pub const MODEL_VERSION: u32 = 1;

const LEAF: u8 = 0;
const SPLIT: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ClassifierKind,
    hyper: ClassifierHyper,
    seed: u64,
    dim: usize,
    class_names: Vec<String>,
    constant: Vec<bool>,
    #[serde(default)]
    table_digest: Option<String>,
}

fn put_tree(out: &mut Vec<u8>, tree: &Tree) {
    out.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
    for node in &tree.nodes {
        match *node {
            Node::Leaf { value, count } => {
                out.push(LEAF);
                put_f64s(out, &[value]);
                out.extend_from_slice(&count.to_le_bytes());
            }
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                out.push(SPLIT);
                out.extend_from_slice(&feature.to_le_bytes());
                put_f64s(out, &[threshold]);
                out.extend_from_slice(&left.to_le_bytes());
                out.extend_from_slice(&right.to_le_bytes());
            }
        }
    }
}

fn take_tree(r: &mut Reader, dim: usize) -> Result<Tree> {
    let n = r.u32()? as usize;
    let mut nodes = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        nodes.push(match r.u8()? {
            LEAF => Node::Leaf {
                value: r.f64()?,
                count: r.u32()?,
            },
            SPLIT => Node::Split {
                feature: r.u32()?,
                threshold: r.f64()?,
                left: r.u32()?,
                right: r.u32()?,
            },
            tag => return Err(Error::format(r.path(), format!("unknown node tag {tag}"))),
        });
    }
    let tree = Tree { nodes };
    if !tree.is_well_formed(dim) {
        return Err(Error::format(r.path(), "malformed tree"));
    }
    Ok(tree)
}

/// Writes `model` atomically and returns the file digest. `class_names`
/// label the model's output columns; `table_digest` is required for
/// nearest-neighbour models.
pub fn save_model(path: &Path, model: &Classifier, class_names: &[String], seed: u64, table_digest: Option<&str>) -> Result<String> {
    let mut payload = Vec::new();
    let dim = match model {
        Classifier::Forest(m) => {
            for trees in &m.classes {
                payload.extend_from_slice(&(trees.len() as u32).to_le_bytes());
                for t in trees {
                    put_tree(&mut payload, t);
                }
            }
            m.dim
        }
        Classifier::Gbm(m) => {
            for c in &m.classes {
                put_f64s(&mut payload, &[c.init]);
                payload.extend_from_slice(&(c.trees.len() as u32).to_le_bytes());
                for t in &c.trees {
                    put_tree(&mut payload, t);
                }
            }
            m.dim
        }
        Classifier::Knn(m) => {
            if table_digest.is_none() {
                return Err(Error::Domain("a nearest-neighbour model needs its table digest".into()));
            }
            m.table.dim()
        }
    };
    let header = Header {
        kind: model.kind(),
        hyper: model.hyper(),
        seed,
        dim,
        class_names: class_names.to_vec(),
        constant: model.constant_classes(),
        table_digest: table_digest.map(str::to_string),
    };
    container::write(path, MODEL_MAGIC, MODEL_VERSION, &header, &payload)
}

/// Reads a model file. `resolve_table` is called with the stored digest for
/// nearest-neighbour models and must return the matching table.
pub fn load_model(path: &Path, resolve_table: impl FnOnce(&str) -> Result<EmbeddingTable>) -> Result<(Classifier, Vec<String>)> {
    let decoded = container::read::<Header>(path, MODEL_MAGIC)?;
    if decoded.version != MODEL_VERSION {
        return Err(Error::format(path, format!("unsupported model version {}", decoded.version)));
    }
    let h = decoded.header;
    let k = h.class_names.len();
    if h.constant.len() != k {
        return Err(Error::format(path, "constant flags do not match classes"));
    }
    let mut r = Reader::new(path, &decoded.payload);
    let model = match (h.kind, h.hyper) {
        (ClassifierKind::Rf | ClassifierKind::Xrt, ClassifierHyper::Forest(hyper)) => {
            let mut classes = Vec::with_capacity(k);
            for _ in 0..k {
                let n = r.u32()? as usize;
                classes.push((0..n).map(|_| take_tree(&mut r, h.dim)).collect::<Result<Vec<_>>>()?);
            }
            Classifier::Forest(ForestModel {
                kind: if h.kind == ClassifierKind::Rf { ForestKind::Rf } else { ForestKind::Xrt },
                hyper,
                seed: h.seed,
                dim: h.dim,
                classes,
                constant: h.constant,
            })
        }
        (ClassifierKind::Gb, ClassifierHyper::Gbm(hyper)) => {
            let mut classes = Vec::with_capacity(k);
            for c in 0..k {
                let init = r.f64()?;
                let n = r.u32()? as usize;
                let trees = (0..n).map(|_| take_tree(&mut r, h.dim)).collect::<Result<Vec<_>>>()?;
                classes.push(GbmClass {
                    init,
                    trees,
                    constant: h.constant[c],
                });
            }
            Classifier::Gbm(GbmModel {
                hyper,
                dim: h.dim,
                classes,
            })
        }
        (ClassifierKind::Knn, ClassifierHyper::Knn { k: neighbours }) => {
            let digest = h
                .table_digest
                .as_deref()
                .ok_or_else(|| Error::format(path, "nearest-neighbour model without table digest"))?;
            let table = resolve_table(digest)?;
            if table.dim() != h.dim || table.n_classes() != k || neighbours == 0 || neighbours > table.len() {
                return Err(Error::format(path, "referenced table does not fit the model"));
            }
            Classifier::Knn(KnnModel { k: neighbours, table })
        }
        _ => return Err(Error::format(path, "kind and hyperparameters disagree")),
    };
    if !r.is_empty() {
        return Err(Error::format(path, "trailing bytes in model payload"));
    }
    Ok((model, h.class_names))
}
