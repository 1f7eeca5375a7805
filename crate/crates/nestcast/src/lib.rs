//! Forecasting on multi-scale spherical graphs.
//!
//! The crate builds region-refined icosahedral graphs over the globe, runs a
//! gated message-passing network on them with exact analytic gradients, and
//! layers the downstream machinery on top: single-step training with
//! autoregressive rollout, nested-grid regional coupling, Perlin-perturbed
//! ensembles, verification metrics with spectral diagnostics, and tropical
//! cyclone tracking. Everything is deterministic given a seed.

pub mod cli;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod fieldio;
pub mod meshgraph;
pub mod nesting;
pub mod network;
pub mod rng;
pub mod synthdata;
pub mod tensorcore;
pub mod tracking;
pub mod training;

pub use error::{Error, Result};
