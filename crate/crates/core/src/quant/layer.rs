use serde::{Deserialize, Serialize};

use super::affine::fake_quantize;
use super::hessian::{build_hessian, channel_order, hessian_quantize, DEFAULT_DAMPING};
use super::smoothing::{apply_smoothing, search_smoothing};
use super::{
    dequantize, Granularity, OrderingStrategy, QuantConfig, QuantParams, QuantizedMatrix,
    SmoothingResult,
};
use crate::error::{Error, Result};
use crate::numkit::{matmul, RealMatrix};

/// Below this many calibration tokens the result carries a warning.
pub const MIN_CALIBRATION_TOKENS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuantResult {
    /// Quantized `W·diag(s)`, per output row.
    pub weights: QuantizedMatrix,
    pub smoothing: SmoothingResult,
    pub ordering_strategy: OrderingStrategy,
    /// Channel processing order; `None` for the identity order.
    pub ordering: Option<Vec<usize>>,
    /// Activation quantizer applied to `diag(s)⁻¹·X` at inference.
    pub activation_params: Vec<QuantParams>,
    pub activation_granularity: Granularity,
    pub output_mse: f64,
    pub rtn_baseline_mse: f64,
    pub warnings: Vec<String>,
}

fn mse(a: &RealMatrix, reference: &RealMatrix) -> Result<f64> {
    let n = reference.rows() * reference.cols();
    let d = a.sub(reference)?.frobenius_norm();
    Ok(if n == 0 { 0.0 } else { d * d / n as f64 })
}

/// Smoothing search, scale migration, then compensated weight quantization.
///
/// `output_mse` compares `deq(Ŵ)·Q(X')` against the full-precision `W·X`;
/// `rtn_baseline_mse` does the same for plain round-to-nearest on the
/// unsmoothed operands.
pub fn quantize_layer(
    w: &RealMatrix,
    x_calib: &RealMatrix,
    cfg: &QuantConfig,
    grid_steps: usize,
    ordering: OrderingStrategy,
) -> Result<LayerQuantResult> {
    let mut warnings = Vec::new();
    if x_calib.cols() < MIN_CALIBRATION_TOKENS {
        warnings.push(format!(
            "only {} calibration tokens (at least {MIN_CALIBRATION_TOKENS} recommended)",
            x_calib.cols()
        ));
    }
    let smoothing = search_smoothing(w, x_calib, cfg, grid_steps)?;
    let (ws, xs) = apply_smoothing(w, x_calib, &smoothing.factors)?;
    let h = build_hessian(&xs, DEFAULT_DAMPING)?;
    let order = channel_order(&xs, ordering);
    let weights = hessian_quantize(&ws, &h, cfg, &order)?;

    let act_cfg = cfg.for_activations();
    let act_q = super::rtn_quantize(&xs, &act_cfg)?;
    let reference = matmul(w, x_calib)?;
    let output = matmul(&dequantize(&weights), &dequantize(&act_q))?;
    let output_mse = mse(&output, &reference)?;

    let rtn_out = matmul(
        &fake_quantize(w, &cfg.for_weights())?,
        &fake_quantize(x_calib, &act_cfg)?,
    )?;
    let rtn_baseline_mse = mse(&rtn_out, &reference)?;

    Ok(LayerQuantResult {
        weights,
        smoothing,
        ordering_strategy: ordering,
        ordering: (ordering != OrderingStrategy::None).then_some(order),
        activation_params: act_q.params().to_vec(),
        activation_granularity: act_cfg.granularity,
        output_mse,
        rtn_baseline_mse,
        warnings,
    })
}

/// Text form of a [`LayerQuantResult`]; the codes travel separately in the
/// binary matrix format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantRecord {
    pub exponent: f64,
    pub factors: Vec<f64>,
    pub bits: u8,
    pub mse: f64,
    pub rtn_mse: f64,
    pub ordering: Vec<usize>,
    pub ordering_strategy: OrderingStrategy,
    pub smoothing_loss: f64,
    pub rows: usize,
    pub cols: usize,
    pub weight_scales: Vec<f64>,
    pub weight_zero_points: Vec<i32>,
    pub activation_granularity: Granularity,
    pub activation_scales: Vec<f64>,
    pub activation_zero_points: Vec<i32>,
}

impl LayerQuantResult {
    pub fn record(&self) -> LayerQuantRecord {
        let n = self.weights.cols();
        LayerQuantRecord {
            exponent: self.smoothing.exponent,
            factors: self.smoothing.factors.clone(),
            bits: self.weights.bits(),
            mse: self.output_mse,
            rtn_mse: self.rtn_baseline_mse,
            ordering: self.ordering.clone().unwrap_or_else(|| (0..n).collect()),
            ordering_strategy: self.ordering_strategy,
            smoothing_loss: self.smoothing.loss,
            rows: self.weights.rows(),
            cols: n,
            weight_scales: self.weights.params().iter().map(|p| p.scale).collect(),
            weight_zero_points: self.weights.params().iter().map(|p| p.zero_point).collect(),
            activation_granularity: self.activation_granularity,
            activation_scales: self.activation_params.iter().map(|p| p.scale).collect(),
            activation_zero_points: self.activation_params.iter().map(|p| p.zero_point).collect(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.record()).map_err(|e| Error::Parse(e.to_string()))
    }
}

impl LayerQuantRecord {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Rebuilds the weight [`QuantizedMatrix`] from this record and a codes
    /// matrix read from the binary format.
    pub fn weights(&self, codes: &RealMatrix) -> Result<QuantizedMatrix> {
        if codes.shape() != (self.rows, self.cols) {
            return Err(Error::Shape(format!(
                "codes are {:?}, record says {}x{}",
                codes.shape(),
                self.rows,
                self.cols
            )));
        }
        if self.weight_scales.len() != self.weight_zero_points.len() {
            return Err(Error::Parse("scale/zero-point count mismatch".into()));
        }
        let codes = codes
            .as_slice()
            .iter()
            .map(|&c| {
                if c.fract() == 0.0 && (0.0..=255.0).contains(&c) {
                    Ok(c as u8)
                } else {
                    Err(Error::Parse(format!("invalid code value {c}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let params = self
            .weight_scales
            .iter()
            .zip(&self.weight_zero_points)
            .map(|(&scale, &zero_point)| QuantParams { scale, zero_point })
            .collect();
        QuantizedMatrix::new(
            self.rows,
            self.cols,
            self.bits,
            Granularity::PerOutputRow,
            codes,
            params,
        )
    }
}
