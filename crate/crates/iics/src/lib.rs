//! Desk-scale engine for unsupervised re-identification with alternating
//! intra-camera and inter-camera pseudo-label training.
//!
//! The crate is organized around the training loop in [`pipeline`]:
//! a small differentiable encoder ([`nn`]) with an adaptive instance/batch
//! normalization layer is trained on pseudo-labels produced by agglomerative
//! clustering ([`clustering`]) over similarity matrices ([`similarity`]).
//! Synthetic camera-partitioned benchmarks with ground-truth identities come
//! from [`synthgen`]; retrieval metrics and similarity diagnostics live in
//! [`eval`].

pub mod clustering;
pub mod config;
pub mod core;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod similarity;
pub mod synthgen;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite vector")]
    NonFiniteVector,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("batch too small for BN statistics")]
    BatchTooSmall,
    #[error("invalid triplet batch")]
    InvalidTripletBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("clustering error: {0}")]
    Clustering(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for validation problems, 3 for
    /// numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged(_) => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}
