//! Video-to-video moment retrieval with dual-stage soft-DTW alignment.
//!
//! Given a target video and a short query video (both as per-frame feature
//! sequences), the model localises the target segment matching the query.
//! Alignment between the two sequences is computed with soft-DTW before and
//! after a transformer encoder; a decoder with learnable queries attends to
//! the aligned span and convolutional heads predict per-frame foreground
//! probability and boundary offsets.

pub mod alignment;
pub mod autodiff;
pub mod checkpoint;
pub mod datakit;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod train;

pub use error::{MatrError, Result};
