//! Quadrotor control with a neural-network policy trained from scratch in
//! simulation.
//!
//! The crate combines a small dense-network substrate with exact parameter
//! Jacobians ([`mlp`]), a rigid-body quadrotor simulator with SO(3)
//! integration ([`sim`]), the learning task wrapper ([`env`]), a batched
//! exploration rollout engine ([`rollout`]), Monte-Carlo value fitting
//! ([`value`]) and a deterministic per-sample natural-gradient policy
//! optimizer ([`optim`]). The `quadpolicy` binary exposes training,
//! evaluation and benchmarking on top of these pieces.

pub mod config;
pub mod env;
pub mod eval;
pub mod mlp;
pub mod optim;
pub mod rollout;
pub mod sim;
pub mod so3;
pub mod value;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An input did not have the shape an operation requires.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// A numerical computation produced non-finite values or left the
    /// region where the simulation is trustworthy.
    #[error("numerical divergence: {0}")]
    Divergence(String),
    /// A junction pair whose perturbed and on-policy actions coincide;
    /// the per-sample gradient is undefined for it.
    #[error("degenerate junction pair: perturbation norm {0} below threshold")]
    DegeneratePair(f64),
    /// Every junction pair of an update was filtered out.
    #[error("no usable junction pairs; policy not updated")]
    NoUpdate,
    /// Malformed serialized network or configuration data.
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
