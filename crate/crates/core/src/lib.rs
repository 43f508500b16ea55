//! Desk-scale laboratory for cross-lingual representation alignment in
//! decoder-only transformers.
//!
//! The crate provides:
//! - a tape-based reverse-mode autodiff engine over 2-D float arrays
//!   ([`autograd`]),
//! - synthetic multiway-parallel corpora built from bijective token ciphers
//!   ([`corpus`]),
//! - a small causal transformer with attachable low-rank adapters ([`model`]),
//! - the task / contrastive-alignment objectives and the alternating
//!   training loop ([`objectives`]),
//! - layer-wise translation retrieval with ratio-margin scoring
//!   ([`retrieval`]),
//! - post-hoc weighted averaging of adapter sets ([`merging`]),
//! - checkpoint archives and slot-F1 evaluation ([`checkpoint`], [`eval`]).
//!
//! All training math runs in `f32`; every numeric kernel is generic over
//! [`autograd::Scalar`] so verification (finite differences) can run a 64-bit
//! shadow path.

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod merging;
pub mod model;
pub mod objectives;
pub mod retrieval;

/// Crate-wide error type. Variants mirror the failure classes of the public
/// operations: bad configuration, bad runtime input, numeric breakdown, and
/// malformed on-disk artifacts.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
