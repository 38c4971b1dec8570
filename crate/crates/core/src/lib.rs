//! Training-free, activation-guided structural compression of transformer
//! weight groups.
//!
//! The crate is organized along the pipeline:
//!
//! - [`slimset`] picks a compact calibration coreset from prompt embeddings.
//! - [`calib`] accumulates per-timestep activation second moments, scores them
//!   with the trace-normalized Rayleigh quotient and mixes them across timesteps.
//! - [`alloc`] turns influence scores into per-block ranks under a parameter budget.
//! - [`madac`] compresses query–key, value–output and gated FFN groups in closed form.
//! - [`model`] holds the tensor bundle format, a seeded toy transformer and the
//!   orchestrator that ties the stages together.
//! - [`verify`] is a self-contained oracle harness for the closed forms.

pub mod alloc;
pub mod calib;
pub mod error;
pub mod linalg;
pub mod madac;
pub mod model;
pub mod rng;
pub mod slimset;
pub mod verify;

pub use error::{Error, Result};
