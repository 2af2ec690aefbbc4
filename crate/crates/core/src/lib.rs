//! Composed image retrieval by unifying the multimodal query at the raw-data
//! level.
//!
//! A query is a reference image plus a modification text. Preprocessing
//! turns it into a unified textual query (the reference caption joined with
//! the modification text) and a unified visual query (the reference image
//! with target keywords written on it). A dual encoder embeds both, a small
//! perceptron picks a per-query weight for their linear combination, and
//! gallery images are ranked by cosine similarity to the result.

pub mod adapters;
pub mod clients;
pub mod config;
pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod fusion;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod synthetic;
pub mod trainer;
pub mod unify;

pub use error::{Error, Result};
