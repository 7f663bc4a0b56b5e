//! Gated dual-process control on a deterministic letter gridworld.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`], [`params`], [`gradcheck`]: a minimal f64
//!   reverse-mode autodiff substrate with named, freezable parameters and a
//!   binary checkpoint format.
//! - [`letterworld`]: the simulator (grid, blocks, slots, scripted expert,
//!   interference events, episode logs).
//! - [`vocab`]: the closed token vocabulary shared by instructions and
//!   sub-task plans.
//! - [`annotate`]: segmentation of logged episodes into sub-task segments,
//!   per-step goal targets, gate labels, and the annotated dataset file.
//! - [`model`]: observation encoder, sub-task decoder, multi-scale completion
//!   imagination, discrepancy gate, and the flow-matching action expert.
//! - [`runtime`]: the lock-and-gate control loop, cost ledger, and trace file.
//! - [`train`]: losses, AdamW, and the two-stage curriculum.
//! - [`harness`]: dataset generation, evaluation suites, threshold sweeps,
//!   the interference study, and report/plot emission.

pub mod annotate;
pub mod config;
pub mod gradcheck;
pub mod harness;
pub mod letterworld;
pub mod model;
pub mod params;
pub mod rng;
pub mod runtime;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("simulator error: {0}")]
    Sim(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
