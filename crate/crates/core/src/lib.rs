//! Multi-criteria Chinese word segmentation with one shared model.
//!
//! A single Transformer encoder reads a sentence prefixed by a criterion
//! token and a shared CRF (or MLP) decoder emits BMES labels, so one model
//! serves every segmentation standard it was trained on.

pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod embedding;
pub mod encoder;
mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod synthetic;
pub mod trainer;

pub use error::Error;
