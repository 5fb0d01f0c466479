//! Hierarchical S2-token image geolocalization with retrieval-augmented
//! autoregressive decoding.

pub mod align;
pub mod config;
pub mod decode;
pub mod error;
pub mod gallery;
pub mod geocell;
pub mod geodesy;
pub mod nn;
pub mod pipeline;
pub mod rerank;
pub mod seqmodel;
pub mod synthworld;

pub use error::{Error, Result};
pub use geocell::{CellId, LatLon, TokenSequence};
