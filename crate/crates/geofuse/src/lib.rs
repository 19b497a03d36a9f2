//! Spatial-context multimodal regression engine.
//!
//! Predicts a vector of environmental variables at a query location by fusing
//! image embeddings, text embeddings, and location encodings from the k
//! nearest geolocated observations through an attention-based fusion module.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`geo`] — exact kNN queries, spatial block splitting, distance statistics
//! - [`dataset`] — sample ingestion, target standardisation, variable
//!   filtering, context assembly
//! - [`encoders`] — embedding stores, cosine similarity, top-j sentence
//!   selection
//! - [`locenc`] — the six location-encoding strategies
//! - [`fusion`] — token assembly, random token masking, the transformer
//!   fusion model with CLS pooling
//! - [`train`] — MSE + AdamW mini-batch training with seeded determinism
//! - [`eval`] — R² reporting and the spatial analyses (attention vs distance,
//!   similarity vs distance, kNN distance stats)
//! - [`synth`] — seeded synthetic dataset generator with controllable spatial
//!   autocorrelation
//! - [`pipeline`] — glue that wires the stages into runnable experiments

pub mod dataset;
pub mod encoders;
mod error;
pub mod eval;
pub mod fusion;
pub mod geo;
pub mod locenc;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
