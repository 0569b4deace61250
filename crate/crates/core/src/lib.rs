//! Deterministic federated fine-tuning laboratory built around low-rank
//! adapters. A frozen backbone is adapted by rank-one component stacks;
//! heterogeneous clients train subsets of those components and the server
//! aggregates them under one of five strategies. Every random draw is keyed
//! by an explicit stream id so runs replay bit-identically from one seed.

pub mod adapters;
pub mod costmeter;
pub mod datagen;
pub mod fedengine;
pub mod noiselab;
pub mod numkit;
pub mod strategies;
pub mod tinynet;
pub mod verify;

/// Crate-wide error type. Shape errors come from dimension checks in the
/// matrix kernels and adapter algebra, config errors from experiment
/// validation, degenerate-input errors from operations with no defined
/// result (e.g. cosine of a zero vector).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
