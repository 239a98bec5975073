//! Joint activation/weight quantization.
//!
//! The pipeline for one linear layer `Y = W·X` (W is `out × in`, X is
//! `in × tokens`) is:
//!
//! 1. search a per-input-channel smoothing vector `s = stat^e` over a grid of
//!    exponents, minimizing the joint quantization loss
//!    `‖Q(W·diag(s))·Q(diag(s)⁻¹·X) − W·X‖`;
//! 2. migrate the scales into the weights and activations;
//! 3. quantize the smoothed weights column by column, spreading each
//!    column's rounding error over the not-yet-quantized columns with the
//!    inverse Hessian of the smoothed activations;
//! 4. pack the result either as integer codes (GPU) or as dequantized
//!    float32 (CPU).

mod affine;
mod hessian;
mod layer;
mod pack;
mod smoothing;

pub use affine::{dequantize, rtn_quantize, QuantParams, QuantizedMatrix};
pub use hessian::{
    build_hessian, channel_order, hessian_quantize, OrderingStrategy, DEFAULT_DAMPING,
    DAMPING_RETRIES,
};
pub use layer::{quantize_layer, LayerQuantRecord, LayerQuantResult, MIN_CALIBRATION_TOKENS};
pub use pack::{precision_pack, PackTarget, PackedExpert};
pub use smoothing::{
    apply_smoothing, channel_max_abs, quant_loss, search_smoothing, SmoothingResult,
    DEFAULT_GRID_STEPS, STAT_FLOOR,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How quantization parameters are shared across a matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One scale/zero-point for the whole matrix.
    #[default]
    PerTensor,
    /// One group per token. Activations are stored `channels × tokens`, so
    /// this is one group per column.
    PerToken,
    /// One group per output row of a weight matrix.
    PerOutputRow,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::PerTensor => "per_tensor",
            Granularity::PerToken => "per_token",
            Granularity::PerOutputRow => "per_output_row",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_tensor" | "per-tensor" => Ok(Granularity::PerTensor),
            "per_token" | "per-token" => Ok(Granularity::PerToken),
            "per_output_row" | "per-output-row" => Ok(Granularity::PerOutputRow),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

/// Quantizer settings.
///
/// For single-operand operations ([`rtn_quantize`]) `granularity` is used as
/// given. For the joint operations it describes the activation operand
/// (per-tensor or per-token) while weights are always quantized per output
/// row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub symmetric: bool,
    pub granularity: Granularity,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            symmetric: false,
            granularity: Granularity::PerTensor,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8) -> Result<Self> {
        let cfg = Self {
            bits,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_granularity(self, granularity: Granularity) -> Self {
        Self {
            granularity,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Config(format!(
                "bits must be in [2, 8], got {}",
                self.bits
            )));
        }
        Ok(())
    }

    /// Largest code value, `2^bits − 1`.
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub(crate) fn for_weights(&self) -> Self {
        self.with_granularity(Granularity::PerOutputRow)
    }

    pub(crate) fn for_activations(&self) -> Self {
        match self.granularity {
            Granularity::PerOutputRow => self.with_granularity(Granularity::PerTensor),
            _ => *self,
        }
    }
}

pub(crate) fn check_factors(factors: &[f64], expected: usize) -> Result<()> {
    if factors.len() != expected {
        return Err(Error::Shape(format!(
            "{} smoothing factors for {expected} input channels",
            factors.len()
        )));
    }
    if let Some((j, f)) = factors
        .iter()
        .enumerate()
        .find(|(_, f)| !(**f > 0.0) || !f.is_finite())
    {
        return Err(Error::Domain(format!(
            "smoothing factor {j} must be positive and finite, got {f}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_bounds() {
        assert!(QuantConfig::new(1).is_err());
        assert!(QuantConfig::new(9).is_err());
        assert_eq!(QuantConfig::new(4).unwrap().max_code(), 15);
        assert_eq!(QuantConfig::default().bits, 8);
        assert!(!QuantConfig::default().symmetric);
    }

    #[test]
    fn joint_granularities() {
        let cfg = QuantConfig::default().with_granularity(Granularity::PerOutputRow);
        assert_eq!(cfg.for_activations().granularity, Granularity::PerTensor);
        let cfg = QuantConfig::default().with_granularity(Granularity::PerToken);
        assert_eq!(cfg.for_activations().granularity, Granularity::PerToken);
        assert_eq!(cfg.for_weights().granularity, Granularity::PerOutputRow);
    }
}
