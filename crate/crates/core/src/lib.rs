//! Federated learning with quantized uplink and optimal clipping thresholds.
//!
//! Clients train a small CNN locally, keep their conv and linear weights on a
//! `b`-bit uniform grid clipped at a per-layer threshold, and upload level
//! indices. The server averages the dequantized models, weighting clients by
//! dataset size or by the inverse of their quantization error.

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod federation;
pub mod nn;
pub mod quant;

pub use error::{Error, Result};
