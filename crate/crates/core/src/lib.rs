//! Locality preserving alignment of embedding manifolds.
//!
//! A source manifold is mapped onto a target manifold with a squared-error
//! objective, an orthogonality penalty and a locality preserving term that
//! asks each supervised target to be reconstructed from the mapped source
//! neighbors under frozen locally linear weights. The same alignment terms
//! can regularize a small feed-forward pair classifier or regressor.

pub mod align;
pub mod cli;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod lle;
pub mod neighbors;
pub mod optim;
pub mod synthetic;
pub mod tasker;

pub use error::{Error, Result};
