//! Sequential recommendation with a learnable keep/delete/insert sequence
//! augmenter, coarse and triplet contrastive objectives, and a sampled
//! top-K evaluation pipeline.

pub mod augmenter;
pub mod augops;
pub mod contrastive;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod numkernel;
pub mod pipeline;
pub mod recommender;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
