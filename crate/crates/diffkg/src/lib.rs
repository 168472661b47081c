//! Differentiable reasoning over a reified sparse knowledge graph.
//!
//! A dialogue history is encoded into a query vector, which predicts a
//! sequence of relation distributions, a learnable "operation" vector and
//! per-hop walk-or-check gates. Traversal runs as sparse matrix algebra
//! over three triple-indexed 0/1 matrices (head, relation, tail), so each
//! hop is a gather / elementwise product / scatter with an L2-normalizing
//! guard. A small recurrent decoder conditioned on the retrieved entities
//! produces the response, and everything trains end-to-end through a
//! hand-rolled reverse-mode tape.
//!
//! The numeric core is generic over the scalar type (`f32` / `f64` via
//! [`Scalar`]); training and the CLI pin [`Real`] = `f64`.

pub mod data;
pub mod decoder;
pub mod diff;
pub mod embed;
pub mod encoder;
pub mod eval;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod reasoner;
pub mod scalar;
pub mod text;
pub mod trainer;

pub use scalar::Scalar;

/// Scalar type used by the training path and the CLI.
pub type Real = f64;
/// Tape specialized to the training scalar.
pub type Tape = diff::Tape<Real>;
/// Parameter store specialized to the training scalar.
pub type ParamStore = diff::ParamStore<Real>;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("empty KG")]
    EmptyKg,
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("illegal character in name {0:?}")]
    IllegalName(String),
    #[error("unknown entity name(s): {0}")]
    UnknownEntity(String),
    #[error("unknown relation name {0:?}")]
    UnknownRelation(String),
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("relation \"ToSelf\" already present; KG is already augmented")]
    AlreadyAugmented,
    #[error("permutation is not a bijection on triple rows")]
    BadPermutation,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("invalid data: {0}")]
    BadData(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
