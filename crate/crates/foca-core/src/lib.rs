//! FOCA: audio-visual fusion for malware classification in hyperbolic space.
//!
//! The crate provides, bottom to top:
//!
//! - [`poincare`]: exact differentiable arithmetic on the unit Poincare ball;
//! - [`hca`]: hyperbolic cross-attention over two token sequences;
//! - [`model`]: the unimodal CNN classifier, the FOCA fusion classifier and
//!   its Euclidean baselines, plus the Adam training loop;
//! - [`transcode`]: deterministic binary-to-wav and binary-to-image encoders;
//! - [`data`]: feature-file I/O, dataset manifests, stratified k-fold splits,
//!   classification metrics, and a synthetic hierarchical dataset generator.

pub mod data;
pub mod error;
pub mod hca;
pub mod model;
pub mod poincare;
pub mod transcode;

pub use error::{FocaError, Result};
