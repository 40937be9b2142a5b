//! Physics-guided test-time training for lithium-ion battery state-of-health
//! estimation.
//!
//! The crate covers the full pipeline: a 1-RC Thevenin cell simulator
//! ([`ecm`]) that produces labeled fleets, QdLinear feature extraction
//! ([`features`]), a small reverse-mode autodiff engine ([`tensor`]), the
//! Y-shaped encoder/decoder/head network with prefix prompts and
//! reprogramming ([`model`]), the physics-guided self-supervised loss
//! ([`loss`]), and pretraining, linear probing and per-sample test-time
//! adaptation ([`train`]). [`experiment`] wires these into the seeded
//! source/target experiments the CLI exposes.

pub mod ecm;
pub mod error;
pub mod experiment;
pub mod features;
pub mod io;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
