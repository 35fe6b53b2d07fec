//! A self-contained model-editing laboratory.
//!
//! The crate trains a small decoder-only transformer on synthetic facts,
//! then rewrites individual facts directly in the MLP weights using
//! locate-then-edit batch editing (the ROME/MEMIT family) and the CoME
//! conflict-free extension, which unlearns the outdated fact by projecting
//! its residual away from the shared linguistic direction and subtracting
//! the remainder on the top-p% largest coordinates.
//!
//! Module map:
//! - [`numerics`]: dense f64 linear algebra, Cholesky solve, gradient descent
//! - [`model`]: the instrumented toy transformer (hooks, captures, checkpoints)
//! - [`trainer`]: corpus construction and next-token pretraining
//! - [`editengine`]: key extraction, covariance, residual optimization,
//!   closed-form multi-layer weight updates
//! - [`come`]: outdated-residual projection, weighted subtraction, top-p masking
//! - [`evalsuite`]: efficacy / generality / locality / score / fluency / consistency
//! - [`datakit`]: dataset schemas, synthetic data generation, validation

pub mod come;
pub mod datakit;
pub mod editengine;
pub mod error;
pub mod evalsuite;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
