use serde::{Deserialize, Serialize};

use super::affine::fit_params;
use super::{QuantConfig, QuantizedMatrix};
use crate::error::{Error, Result};
use crate::numkit::{cholesky, inverse_from_factor, matmul, RealMatrix};

/// Damping added to the Hessian diagonal, as a fraction of its mean.
pub const DEFAULT_DAMPING: f64 = 0.01;

/// Number of ×10 damping escalations attempted when factorization fails.
pub const DAMPING_RETRIES: u32 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingStrategy {
    #[default]
    None,
    /// Descending max |activation| per channel.
    MaxAbs,
    /// Descending sum of squared activations per channel.
    SumSquares,
}

impl OrderingStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            OrderingStrategy::None => "none",
            OrderingStrategy::MaxAbs => "max_abs",
            OrderingStrategy::SumSquares => "sum_squares",
        }
    }
}

impl std::str::FromStr for OrderingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OrderingStrategy::None),
            "max_abs" | "max-abs" => Ok(OrderingStrategy::MaxAbs),
            "sum_squares" | "sum-squares" => Ok(OrderingStrategy::SumSquares),
            other => Err(Error::Config(format!("unknown ordering {other:?}"))),
        }
    }
}

/// `H = 2·X·Xᵀ + λ·I` with `λ = damping_fraction · mean(diag(2·X·Xᵀ))`.
/// `x_calib` is `channels × tokens`.
pub fn build_hessian(x_calib: &RealMatrix, damping_fraction: f64) -> Result<RealMatrix> {
    if !(damping_fraction >= 0.0) || !damping_fraction.is_finite() {
        return Err(Error::Domain(format!(
            "damping fraction must be non-negative, got {damping_fraction}"
        )));
    }
    if x_calib.rows() == 0 || x_calib.as_slice().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateHessian(
            "calibration activations are all zero".into(),
        ));
    }
    let h = matmul(x_calib, &x_calib.transpose())?.scaled(2.0)?;
    let n = h.rows();
    let lambda = damping_fraction * h.diag().iter().sum::<f64>() / n as f64;
    add_to_diagonal(&h, lambda)
}

fn add_to_diagonal(h: &RealMatrix, lambda: f64) -> Result<RealMatrix> {
    RealMatrix::from_fn(h.rows(), h.cols(), |i, j| {
        h.get(i, j) + if i == j { lambda } else { 0.0 }
    })
}

/// Processing order of input channels. Ties keep ascending channel index.
pub fn channel_order(x_calib: &RealMatrix, strategy: OrderingStrategy) -> Vec<usize> {
    let n = x_calib.rows();
    let stat: Vec<f64> = match strategy {
        OrderingStrategy::None => return (0..n).collect(),
        OrderingStrategy::MaxAbs => x_calib
            .row_iter()
            .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect(),
        OrderingStrategy::SumSquares => x_calib
            .row_iter()
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect(),
    };
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ascending index among equal statistics.
    order.sort_by(|&a, &b| stat[b].total_cmp(&stat[a]));
    order
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(Error::Shape(format!(
            "ordering has {} entries for {n} columns",
            order.len()
        )));
    }
    for &j in order {
        if j >= n || std::mem::replace(&mut seen[j], true) {
            return Err(Error::Input(format!("ordering is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Upper Cholesky factor `U` of `H⁻¹` (`H⁻¹ = Uᵀ·U`), escalating diagonal
/// damping when `H` fails to factor.
fn inverse_hessian_factor(h: &RealMatrix) -> Result<RealMatrix> {
    let mean_diag = h.diag().iter().sum::<f64>() / h.rows().max(1) as f64;
    let mut attempt = h.clone();
    let mut last_err = None;
    for retry in 0..=DAMPING_RETRIES {
        if retry > 0 {
            if !(mean_diag > 0.0) {
                break;
            }
            let lambda = DEFAULT_DAMPING * 10f64.powi(retry as i32) * mean_diag;
            attempt = add_to_diagonal(h, lambda)?;
        }
        match cholesky(&attempt).and_then(|l| cholesky(&inverse_from_factor(&l))) {
            Ok(l_inv) => return Ok(l_inv.into_matrix().transpose()),
            Err(e @ Error::NotPositiveDefinite { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::QuantizationFailed(format!(
        "Hessian is not positive definite after {DAMPING_RETRIES} damping escalations ({})",
        last_err.map_or_else(|| "non-positive diagonal".to_string(), |e| e.to_string())
    )))
}

/// Column-sequential weight quantization with inverse-Hessian error
/// compensation.
///
/// Columns are visited in `order`. Each column is rounded to its nearest code
/// (per-row parameters fitted on `w` up front and held fixed), and the
/// rounding error of every row is pushed onto that row's remaining columns
/// along the matching row of the Cholesky factor of the inverse Hessian,
/// which equals `−(w_i − Q(w_i)) / [H_F⁻¹]_ii · (H_F⁻¹)_{:,i}` for the
/// shrinking set `F` of unquantized columns.
pub fn hessian_quantize(
    w: &RealMatrix,
    h: &RealMatrix,
    cfg: &QuantConfig,
    order: &[usize],
) -> Result<QuantizedMatrix> {
    cfg.validate()?;
    let n = w.cols();
    if h.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "Hessian is {}x{}, weights have {n} columns",
            h.rows(),
            h.cols()
        )));
    }
    check_permutation(order, n)?;

    let wcfg = cfg.for_weights();
    let params = fit_params(w, &wcfg);
    let max_code = wcfg.max_code();

    let hp = h.select_rows(order).select_columns(order);
    let u = inverse_hessian_factor(&hp)?;
    let mut work = w.select_columns(order).into_vec();
    let rows = w.rows();
    let mut codes = vec![0u8; rows * n];

    for k in 0..n {
        let d = u.get(k, k);
        let u_row = &u.row(k)[k + 1..];
        for r in 0..rows {
            let row = &mut work[r * n..(r + 1) * n];
            let p = &params[r];
            let code = p.quantize(row[k], max_code);
            codes[r * n + order[k]] = code;
            let err = (row[k] - p.dequantize(code)) / d;
            if err != 0.0 {
                for (wj, &uj) in row[k + 1..].iter_mut().zip(u_row) {
                    *wj -= err * uj;
                }
            }
        }
    }
    QuantizedMatrix::new(rows, n, wcfg.bits, wcfg.granularity, codes, params)
}
