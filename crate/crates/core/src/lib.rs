//! Joint video and text summarization of long videos.
//!
//! A frozen frame encoder and a shared temporal transformer
//! ([`video_encoder`]) feed two heads: a frame scorer with windowed context
//! aggregation ([`vsum`]) and a causal text decoder ([`tsum`]). [`train`]
//! optimises both on a weighted sum of their losses, and [`eval`] scores the
//! outputs with the measures in [`metrics`].
//!
//! The networks run on a small reverse-mode tape over `f64` matrices
//! ([`tape`]). [`dataset`] reads annotation files and cached frame
//! features; [`synth`] generates corpora with planted key spans for testing.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod text;
pub mod train;
pub mod tsum;
pub mod video_encoder;
pub mod vsum;

pub use error::{Error, Result};

/// Library version, recorded in checkpoints and run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
