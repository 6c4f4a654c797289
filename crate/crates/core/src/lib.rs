//! Patch-graph engine: a desk-scale library for topology-aware patch-wise
//! contrastive learning in one-sided image translation. A minimal
//! reverse-mode tensor tape drives everything: frozen multi-scale encoder
//! taps become shared-adjacency patch graphs, topology-adaptive graph
//! convolutions embed them, top-K pooling coarsens them, and an infoNCE
//! objective across pooling levels joins an LSGAN term to train the
//! generator. Spectral utilities expose the graph structure the losses see.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gnn;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod losses;
pub mod nets;
pub mod params;
pub mod pooling;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use config::TrainConfig;
pub use error::{PgeError, Result};
pub use tensor::{Tape, Tensor, TensorId};
