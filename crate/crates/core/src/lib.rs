//! Endpoint disease-risk scoring for bird migration trajectories.
//!
//! The pipeline joins telemetry, outbreak records and polygon layers
//! ([`data`]), cuts 12-hour resampled tracks into labeled 30-day windows
//! ([`features`]), trains a pre-norm Transformer encoder with exact
//! reverse-mode gradients ([`model`], [`train`]) and evaluates it
//! ([`metrics`]). [`synth`] generates deterministic desk-scale datasets.

pub mod cli;
pub mod data;
pub mod error;
pub mod features;
pub mod geo;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
