//! Asynchronous HTTP job service around the dfscan analysis pipeline.
//!
//! Clients submit a media URL and receive a job id, poll the job, then fetch
//! the [`ScoreReport`](dfscan_core::ScoreReport). Reports are cached on the
//! canonical URL and service version, stored with their gallery images in an
//! [`ObjectStore`](store::ObjectStore), and every error is an RFC 7807
//! problem document.

pub mod app;
pub mod auth;
pub mod cache;
pub mod config;
pub mod download;
pub mod jobs;
pub mod problem;
pub mod remote;
pub mod store;

pub use app::{serve, Service, ServiceError};
pub use config::ServiceConfig;
