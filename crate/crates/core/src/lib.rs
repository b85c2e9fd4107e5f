//! Core analysis pipeline for image and video deepfake screening.
//!
//! The crate is organised around the stages a piece of media goes through:
//!
//! - [`media`]: decoding images and Y4M video into RGB frames
//! - [`segmentation`]: splitting video into shots from Chamfer similarity of
//!   consecutive region descriptors
//! - [`faces`]: per-shot frame sampling, face detection, box expansion,
//!   similarity-graph clustering and cluster filtering
//! - [`scoring`]: face tensor preprocessing and ensemble scoring over
//!   pluggable backends
//! - [`aggregation`]: face → cluster → shot → overall score reduction
//! - [`pipeline`]: orchestration of the stages with parallel shot processing
//!
//! Evaluation utilities ([`metrics`], [`eval`]), the synthetic ground-truth
//! generator ([`fixture`]) and the model card renderer ([`model_card`]) sit
//! alongside.

pub mod aggregation;
pub mod domain;
pub mod error;
pub mod eval;
pub mod faces;
pub mod fixture;
pub mod gallery;
pub mod media;
pub mod metrics;
pub mod model_card;
pub mod palette;
pub mod pipeline;
pub mod scoring;
pub mod segmentation;
pub mod version;

pub use domain::*;
pub use error::{Error, Result, Stage};
pub use version::ServiceVersion;
