//! Hierarchical multimodal video summarization.
//!
//! The crate trains a small alignment-masked transformer that fuses per-frame
//! visual features with subtitle text features, supervises it with importance
//! labels, replay statistics and two contrastive objectives, and turns its
//! scores into frame/shot/sentence summaries. Everything runs on CPU in pure
//! Rust with deterministic seeding.

pub mod alignment;
pub mod binio;
pub mod config;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod segmentation;
pub mod summarizer;
pub mod tape;
pub mod trainer;

pub use error::{HsumError, Result};
