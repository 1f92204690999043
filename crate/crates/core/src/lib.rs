//! Inductive graph transformer for origin-destination delivery-time estimation.
//!
//! Orders `(retailer, origin, destination, payment slot)` become a typed chain
//! graph. Node embeddings are propagated with weight-free bipartite graph
//! convolutions, refreshed per chronological batch by per-type GRUs, and fed
//! together with raw features into a small transformer regressor.

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod etaformer;
pub mod evaluation;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod split;
pub mod synth;
pub mod tensor;
pub mod thegcn;
pub mod train;

pub use error::{IgtError, Result};
pub use tensor::Tensor;
