//! Eigenvector-based CSI feedback.
//!
//! Synthetic MIMO channels are reduced to per-subband dominant eigenvectors,
//! compressed by a Transformer encoder into an `M`-bit payload through a
//! uniform quantizer, and recovered by a Transformer decoder. A DFT-grid
//! codebook serves as a classical reference.

pub mod augment;
pub mod channelgen;
pub mod codebook;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod kv;
pub mod model;
pub mod quantizer;
pub mod metrics;
pub mod ndiff;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
