//! Conditional normalizing flows with exact likelihoods.
//!
//! The crate covers the invertible layers and the multi-scale conditional
//! flow ([`flow`]), uniform and binary variational dequantisation
//! ([`dequant`]), seeded synthetic datasets ([`data`]), training loops and
//! factored baselines ([`train`]), evaluation metrics ([`metrics`]), and the
//! file formats used by the command-line tool.

pub mod data;
pub mod checkpoint;
pub mod config;
pub mod dequant;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{FlowError, Result};
pub use flow::{FlowModel, ModelConfig};
pub use params::{Bound, ParamId, ParamStore};
