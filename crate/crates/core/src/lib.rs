//! Latent-space embeddings of chest radiographs and downstream classifiers.

pub mod classifiers;
pub mod container;
pub mod ensemble;
pub mod error;
pub mod imaging;
pub mod labels;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod vae;

pub use error::{Error, ErrorCategory, Result};
