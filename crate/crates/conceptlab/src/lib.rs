//! Concept-graph experiments on conditional diffusion models.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`concept`]: concept variables, classes, distances, and the concept
//!   graph over classes.
//! - [`shapegen`]: deterministic rendering of single-object scenes and
//!   dataset construction with exact per-class frequency control.
//! - [`nn`]: a small hand-rolled neural-network substrate (conv / pool /
//!   attention / AdamW) with explicit backprop.
//! - [`diffusion`]: noise schedules, the conditional noise-prediction
//!   U-Net training loop, ancestral sampling, and checkpointing.
//! - [`probes`]: per-attribute linear classifiers and the multiplicative /
//!   additive / soft accuracy measures.
//! - [`experiments`]: end-to-end orchestration (train + per-epoch node
//!   evaluation + threshold detection + frequency sweeps) and plot-ready
//!   exports.

pub mod concept;
pub mod container;
pub mod diffusion;
pub mod error;
pub mod rng;
pub mod nn;
pub mod probes;
pub mod shapegen;

pub use error::{Error, Result};
