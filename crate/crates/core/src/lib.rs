//! Compositional text-to-image alignment scoring.
//!
//! A prompt is decomposed into entity, relational and global yes/no
//! questions; an image into entity boxes and pairwise union boxes. Each
//! question is scored by a VQA backend against the regions of its own
//! group, keeping the best match, and the scores are averaged into fine,
//! coarse and overall alignment scores. Rank correlations against human
//! ratings live in [`stats`].

pub mod aggregation;
pub mod cache;
pub mod error;
pub mod harness;
pub mod http;
pub mod image_decomp;
pub mod model;
pub mod question_gen;
pub mod scoring;
pub mod stats;
pub mod testkit;

pub use error::{Error, Result};
