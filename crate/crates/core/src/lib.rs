//! Multi-state energy disaggregation.
//!
//! A household's aggregate power is split into per-appliance signals by a
//! dual CNN: one network predicts a distribution over the appliance's
//! discrete power states, the other predicts the power drawn in each state,
//! and the appliance estimate is their expectation. States are
//! pre-extracted by mean shift; an optional linear-chain CRF regularizes
//! the state network toward plausible transitions.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod crf;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod network;
pub mod signal;
pub mod simulator;
pub mod states;
pub mod train;

pub use error::{Error, Result};
