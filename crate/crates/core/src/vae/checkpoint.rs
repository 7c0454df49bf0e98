//! Checkpoint files: architecture, training setup and trainer state.
//!
//! Metadata lives in the JSON header; parameters and both Adam moment
//! vectors follow as raw little-endian `f64`s.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BetaSchedule, EpochLog, TrainConfig, TrainerState, VaeArchitecture, VaeParams};
use crate::container::{self, put_f64s, Reader};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LBVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub architecture: VaeArchitecture,
    pub train: TrainConfig,
    pub beta: BetaSchedule,
    pub state: TrainerState,
    /// True once every configured epoch has run.
    pub complete: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tag: String,
    architecture: VaeArchitecture,
    train: TrainConfig,
    beta: BetaSchedule,
    complete: bool,
    n_params: usize,
    encoder_len: usize,
    adam: AdamConfig,
    adam_step: u64,
    lr: f64,
    val_history: Vec<f64>,
    log: Vec<EpochLog>,
    next_epoch: usize,
}

/// Writes atomically and returns the SHA-256 of the file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    let s = &ckpt.state;
    let n = s.params.values.len();
    if s.adam.first_moment.len() != n || s.adam.second_moment.len() != n {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    let header = Header {
        tag: ckpt.tag.clone(),
        architecture: ckpt.architecture.clone(),
        train: ckpt.train.clone(),
        beta: ckpt.beta,
        complete: ckpt.complete,
        n_params: n,
        encoder_len: s.params.encoder_len,
        adam: s.adam.config,
        adam_step: s.adam.step,
        lr: s.lr,
        val_history: s.val_history.clone(),
        log: s.log.clone(),
        next_epoch: s.next_epoch,
    };
    let mut payload = Vec::with_capacity(24 * n);
    put_f64s(&mut payload, &s.params.values);
    put_f64s(&mut payload, &s.adam.first_moment);
    put_f64s(&mut payload, &s.adam.second_moment);
    container::write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let decoded = container::read::<Header>(path, CHECKPOINT_MAGIC)?;
    if decoded.version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {}", decoded.version)));
    }
    let h = decoded.header;
    let mut r = Reader::new(path, &decoded.payload);
    let values = r.f64s(h.n_params)?;
    let first_moment = r.f64s(h.n_params)?;
    let second_moment = r.f64s(h.n_params)?;
    if !r.is_empty() {
        return Err(Error::format(path, "payload longer than declared"));
    }
    Ok(Checkpoint {
        tag: h.tag,
        architecture: h.architecture,
        train: h.train,
        beta: h.beta,
        complete: h.complete,
        state: TrainerState {
            params: VaeParams {
                values,
                encoder_len: h.encoder_len,
            },
            adam: AdamState {
                config: h.adam,
                first_moment,
                second_moment,
                step: h.adam_step,
            },
            lr: h.lr,
            val_history: h.val_history,
            log: h.log,
            next_epoch: h.next_epoch,
        },
    })
}
