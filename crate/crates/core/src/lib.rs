//! Noise-robust representation learning on continuous-time dynamic graphs.
//!
//! The engine learns a weight for every temporal edge. A dynamic noise score
//! built from embedding distances and attention over each endpoint's history
//! supervises an edge-weight predictor, and the predicted weights scale each
//! neighbor's contribution in a temporal graph aggregator with per-node memory.

pub mod autodiff;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod events;
pub mod filter;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod nn;
pub mod noise;
pub mod objectives;
pub mod perturb;
pub mod sweep;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
