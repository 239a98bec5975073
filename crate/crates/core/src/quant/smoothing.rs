use serde::{Deserialize, Serialize};

use super::affine::fake_quantize;
use super::{check_factors, QuantConfig};
use crate::error::{Error, Result};
use crate::numkit::{matmul, RealMatrix};

/// Exponent grid size; 21 points gives a 0.05 step over `[0, 1]`.
pub const DEFAULT_GRID_STEPS: usize = 21;

/// Lower bound on the per-channel activation statistic.
pub const STAT_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingResult {
    pub exponent: f64,
    pub factors: Vec<f64>,
    pub loss: f64,
}

/// Max-abs of each input channel (row of `x`) over tokens, floored at
/// [`STAT_FLOOR`].
pub fn channel_max_abs(x: &RealMatrix) -> Vec<f64> {
    x.row_iter()
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(STAT_FLOOR))
        .collect()
}

/// Returns `(W·diag(s), diag(s)⁻¹·X)`.
pub fn apply_smoothing(
    w: &RealMatrix,
    x: &RealMatrix,
    factors: &[f64],
) -> Result<(RealMatrix, RealMatrix)> {
    if w.cols() != x.rows() {
        return Err(Error::Shape(format!(
            "weights have {} input channels, activations {}",
            w.cols(),
            x.rows()
        )));
    }
    check_factors(factors, w.cols())?;
    let ws = RealMatrix::from_fn(w.rows(), w.cols(), |i, j| w.get(i, j) * factors[j])?;
    let xs = RealMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / factors[i])?;
    Ok((ws, xs))
}

/// Frobenius norm of `Q(W·diag(s))·Q(diag(s)⁻¹·X) − W·X`, weights quantized
/// per output row and activations per `cfg.granularity`.
pub fn quant_loss(w: &RealMatrix, x: &RealMatrix, factors: &[f64], cfg: &QuantConfig) -> Result<f64> {
    let reference = matmul(w, x)?;
    loss_against(w, x, factors, cfg, &reference)
}

fn loss_against(
    w: &RealMatrix,
    x: &RealMatrix,
    factors: &[f64],
    cfg: &QuantConfig,
    reference: &RealMatrix,
) -> Result<f64> {
    let (ws, xs) = apply_smoothing(w, x, factors)?;
    let qw = fake_quantize(&ws, &cfg.for_weights())?;
    let qx = fake_quantize(&xs, &cfg.for_activations())?;
    Ok(matmul(&qw, &qx)?.sub(reference)?.frobenius_norm())
}

/// Grid search over `e ∈ {0, 1/(G−1), …, 1}` for `s = stat^e`, keeping the
/// first exponent that attains the minimum loss.
pub fn search_smoothing(
    w: &RealMatrix,
    x: &RealMatrix,
    cfg: &QuantConfig,
    grid_steps: usize,
) -> Result<SmoothingResult> {
    cfg.validate()?;
    if grid_steps < 2 {
        return Err(Error::Config(format!(
            "grid_steps must be at least 2, got {grid_steps}"
        )));
    }
    if x.cols() == 0 {
        return Err(Error::Input("empty calibration set".into()));
    }
    if w.cols() != x.rows() {
        return Err(Error::Shape(format!(
            "weights have {} input channels, activations {}",
            w.cols(),
            x.rows()
        )));
    }
    let stat = channel_max_abs(x);
    let reference = matmul(w, x)?;
    let mut best: Option<SmoothingResult> = None;
    for g in 0..grid_steps {
        let exponent = g as f64 / (grid_steps - 1) as f64;
        let factors: Vec<f64> = stat.iter().map(|s| s.powf(exponent)).collect();
        let loss = loss_against(w, x, &factors, cfg, &reference)?;
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(SmoothingResult {
                exponent,
                factors,
                loss,
            });
        }
    }
    Ok(best.expect("grid has at least two points"))
}
