//! Width-aware parametrizations of neural networks and the tooling needed to
//! check and exploit them.
//!
//! - [`numcore`]: dense `f64` tensors, counter-based RNG, layer kernels.
//! - [`parametrize`]: symbolic abc-parametrization tables (SP, NTP, three
//!   equivalent muP forms) evaluated against per-tensor infinite shapes.
//! - [`models`]: MLPs and small Transformers whose parameters carry their
//!   shape, role and scaling triple.
//! - [`optim`]: SGD, Adam and friends applying per-tensor effective rates.
//! - [`coordcheck`]: the coordinate-size diagnostic and entry-size law probes.
//! - [`transfer`]: sweeps, best-HP selection, zero-shot transfer and the
//!   related scans.

pub mod coordcheck;
pub mod data;
mod error;
pub mod io;
pub mod models;
pub mod numcore;
pub mod optim;
mod parallel;
pub mod parametrize;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
