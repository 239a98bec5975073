use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latency model of one expert.
///
/// `latency_cpu_ms` may be `+inf` to model a configuration where the CPU
/// never computes experts (every miss is transferred).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// CPU compute time per token per expert.
    pub latency_cpu_ms: f64,
    /// GPU compute time per token per expert.
    pub latency_gpu_ms: f64,
    /// Serialized expert size (see `quant::PackedExpert::byte_size`).
    pub expert_bytes: f64,
    pub pcie_bw_bytes_per_ms: f64,
    /// Time to return CPU-computed activations to the GPU.
    pub activation_return_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        // A ~176 MB INT8 expert over ~16 GB/s PCIe.
        Self {
            latency_cpu_ms: 2.0,
            latency_gpu_ms: 0.05,
            expert_bytes: 176_160_768.0,
            pcie_bw_bytes_per_ms: 16_000_000.0,
            activation_return_ms: 0.0,
        }
    }
}

impl CostModel {
    /// Model with the transfer time given directly in milliseconds.
    pub fn with_transfer_ms(latency_cpu_ms: f64, latency_gpu_ms: f64, transfer_ms: f64) -> Self {
        Self {
            latency_cpu_ms,
            latency_gpu_ms,
            expert_bytes: transfer_ms,
            pcie_bw_bytes_per_ms: 1.0,
            activation_return_ms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        if !(self.latency_cpu_ms >= 0.0) {
            return Err(Error::Config(format!(
                "latency_cpu_ms must be >= 0, got {}",
                self.latency_cpu_ms
            )));
        }
        finite_non_negative("latency_gpu_ms", self.latency_gpu_ms)?;
        finite_non_negative("expert_bytes", self.expert_bytes)?;
        finite_non_negative("activation_return_ms", self.activation_return_ms)?;
        if !(self.pcie_bw_bytes_per_ms > 0.0) || !self.pcie_bw_bytes_per_ms.is_finite() {
            return Err(Error::Config(format!(
                "pcie_bw_bytes_per_ms must be positive, got {}",
                self.pcie_bw_bytes_per_ms
            )));
        }
        Ok(())
    }

    /// Non-fatal oddities worth reporting.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.latency_cpu_ms < self.latency_gpu_ms {
            w.push(format!(
                "latency_cpu_ms ({}) is below latency_gpu_ms ({}); transfers never pay off",
                self.latency_cpu_ms, self.latency_gpu_ms
            ));
        }
        w
    }

    /// `T_e = expert_bytes / pcie_bw`.
    pub fn transfer_ms(&self) -> f64 {
        self.expert_bytes / self.pcie_bw_bytes_per_ms
    }

    /// `n · latency_cpu`.
    pub fn cpu_time(&self, n: u64) -> f64 {
        if n == 0 {
            0.0
        } else {
            n as f64 * self.latency_cpu_ms
        }
    }

    /// `T_e + n · latency_gpu`.
    pub fn transfer_time(&self, n: u64) -> f64 {
        self.transfer_ms() + n as f64 * self.latency_gpu_ms
    }

    pub fn gpu_time(&self, n: u64) -> f64 {
        n as f64 * self.latency_gpu_ms
    }

    /// True when moving the expert beats computing on the CPU. Ties go to
    /// the CPU.
    fn transfer_wins(&self, n: u64) -> bool {
        self.cpu_time(n) > self.transfer_time(n)
    }
}

/// Largest batch size for which CPU computation is still no slower than
/// transferring the expert; transfer is chosen for `n > n_critical`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalBatch {
    /// `0` means the GPU wins at every batch size.
    Finite(u64),
    /// The CPU wins at every batch size.
    Unbounded,
}

impl CriticalBatch {
    pub fn prefers_transfer(self, n: u64) -> bool {
        match self {
            CriticalBatch::Finite(c) => n > c,
            CriticalBatch::Unbounded => false,
        }
    }

    /// Smallest batch size that triggers a transfer.
    pub fn first_transfer_batch(self) -> Option<u64> {
        match self {
            CriticalBatch::Finite(c) => Some(c + 1),
            CriticalBatch::Unbounded => None,
        }
    }
}

impl fmt::Display for CriticalBatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CriticalBatch::Finite(n) => write!(f, "{n}"),
            CriticalBatch::Unbounded => f.write_str("unbounded"),
        }
    }
}

/// Solves `n·latency_cpu > T_e + n·latency_gpu` for the crossover batch.
pub fn critical_batch(cost: &CostModel) -> CriticalBatch {
    let (cpu, gpu) = (cost.latency_cpu_ms, cost.latency_gpu_ms);
    if !(cpu > gpu) {
        return CriticalBatch::Unbounded;
    }
    if cpu.is_infinite() {
        return CriticalBatch::Finite(0);
    }
    let estimate = (cost.transfer_ms() / (cpu - gpu)).floor();
    let mut n = if estimate >= u64::MAX as f64 / 2.0 {
        u64::MAX / 2
    } else {
        estimate as u64
    };
    // Align the closed-form estimate with the floating-point comparison that
    // the decision actually uses.
    while n > 0 && cost.transfer_wins(n) {
        n -= 1;
    }
    while !cost.transfer_wins(n + 1) {
        n += 1;
    }
    CriticalBatch::Finite(n)
}

/// Cost model plus cache size, as read from a config file. Missing keys take
/// the [`CostModel`] defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub latency_cpu_ms: f64,
    pub latency_gpu_ms: f64,
    pub expert_bytes: f64,
    pub pcie_bw_bytes_per_ms: f64,
    pub activation_return_ms: f64,
    pub cache_capacity: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self::from_parts(CostModel::default(), 0)
    }
}

impl CostConfig {
    pub fn from_parts(cost: CostModel, cache_capacity: usize) -> Self {
        Self {
            latency_cpu_ms: cost.latency_cpu_ms,
            latency_gpu_ms: cost.latency_gpu_ms,
            expert_bytes: cost.expert_bytes,
            pcie_bw_bytes_per_ms: cost.pcie_bw_bytes_per_ms,
            activation_return_ms: cost.activation_return_ms,
            cache_capacity,
        }
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel {
            latency_cpu_ms: self.latency_cpu_ms,
            latency_gpu_ms: self.latency_gpu_ms,
            expert_bytes: self.expert_bytes,
            pcie_bw_bytes_per_ms: self.pcie_bw_bytes_per_ms,
            activation_return_ms: self.activation_return_ms,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.cost_model().validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}
