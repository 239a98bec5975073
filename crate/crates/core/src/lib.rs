//! Joint activation/weight quantization for MoE experts, and a trace-driven
//! simulator for running experts split between a CPU and a GPU.
//!
//! * [`numkit`]: dense linear algebra and the binary matrix format.
//! * [`quant`]: affine quantization, activation smoothing, error-compensated
//!   weight quantization and device-specific packing.
//! * [`trace`]: routing traces, a synthetic generator and path/expert
//!   statistics.
//! * [`placement`]: static GPU residency strategies and hit-rate evaluation.
//! * [`sim`]: offload predictor, LRU expert cache and latency accounting.
//! * [`sweep`]: strategy x budget x input-length grids.

pub mod error;
pub mod numkit;
pub mod placement;
pub mod quant;
pub mod sim;
pub mod sweep;
pub mod trace;

pub use error::{Error, Result};
