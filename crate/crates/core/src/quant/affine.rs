use serde::{Deserialize, Serialize};

use super::{Granularity, QuantConfig};
use crate::error::{Error, Result};
use crate::numkit::RealMatrix;

/// Smallest admissible scale; constant groups would otherwise divide by zero.
pub(crate) const SCALE_FLOOR: f64 = 1e-12;

/// Affine quantizer parameters for one group: `x ≈ (code − zero_point)·scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    /// Parameters covering `values` (the range is widened to include zero so
    /// that zero is exactly representable and the zero-point stays in range).
    pub fn fit(values: impl IntoIterator<Item = f64>, cfg: &QuantConfig) -> Self {
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let max_code = cfg.max_code() as f64;
        if cfg.symmetric {
            let half = (1i32 << (cfg.bits - 1)) as f64;
            let amax = lo.abs().max(hi.abs());
            let scale = (amax / (half - 1.0)).max(SCALE_FLOOR);
            Self {
                scale,
                zero_point: half as i32,
            }
        } else {
            let scale = ((hi - lo) / max_code).max(SCALE_FLOOR);
            let zero_point = (-lo / scale).round().clamp(0.0, max_code) as i32;
            Self { scale, zero_point }
        }
    }

    /// Nearest code, ties rounded away from zero, clamped to the code range.
    pub fn quantize(&self, x: f64, max_code: u32) -> u8 {
        let code = (x / self.scale).round() + self.zero_point as f64;
        code.clamp(0.0, max_code as f64) as u8
    }

    pub fn dequantize(&self, code: u8) -> f64 {
        (code as i32 - self.zero_point) as f64 * self.scale
    }
}

/// Integer codes plus affine parameters per granularity group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    bits: u8,
    granularity: Granularity,
    codes: Vec<u8>,
    params: Vec<QuantParams>,
}

impl QuantizedMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        bits: u8,
        granularity: Granularity,
        codes: Vec<u8>,
        params: Vec<QuantParams>,
    ) -> Result<Self> {
        QuantConfig {
            bits,
            symmetric: false,
            granularity,
        }
        .validate()?;
        if codes.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} codes for a {rows}x{cols} matrix",
                codes.len()
            )));
        }
        let groups = group_count(granularity, rows, cols);
        if params.len() != groups {
            return Err(Error::Shape(format!(
                "{} parameter groups, expected {groups} for {}",
                params.len(),
                granularity.as_str()
            )));
        }
        let max_code = (1u32 << bits) - 1;
        if let Some(c) = codes.iter().find(|&&c| c as u32 > max_code) {
            return Err(Error::Input(format!("code {c} exceeds {bits}-bit range")));
        }
        if let Some(p) = params
            .iter()
            .find(|p| !(p.scale > 0.0) || !p.scale.is_finite())
        {
            return Err(Error::Input(format!("invalid scale {}", p.scale)));
        }
        Ok(Self {
            rows,
            cols,
            bits,
            granularity,
            codes,
            params,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn params(&self) -> &[QuantParams] {
        &self.params
    }

    pub fn code(&self, i: usize, j: usize) -> u8 {
        self.codes[i * self.cols + j]
    }

    /// Parameters governing entry `(i, j)`.
    pub fn params_at(&self, i: usize, j: usize) -> &QuantParams {
        &self.params[group_index(self.granularity, i, j)]
    }

    /// Codes as a real matrix, for the binary interchange format.
    pub fn codes_matrix(&self) -> RealMatrix {
        RealMatrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.codes.iter().map(|&c| c as f64).collect(),
        )
    }
}

pub(crate) fn group_count(g: Granularity, rows: usize, cols: usize) -> usize {
    match g {
        Granularity::PerTensor => 1,
        Granularity::PerToken => cols,
        Granularity::PerOutputRow => rows,
    }
}

fn group_index(g: Granularity, i: usize, j: usize) -> usize {
    match g {
        Granularity::PerTensor => 0,
        Granularity::PerToken => j,
        Granularity::PerOutputRow => i,
    }
}

/// Parameters for every group of `x` under `cfg`.
pub(crate) fn fit_params(x: &RealMatrix, cfg: &QuantConfig) -> Vec<QuantParams> {
    match cfg.granularity {
        Granularity::PerTensor => vec![QuantParams::fit(x.as_slice().iter().copied(), cfg)],
        Granularity::PerToken => (0..x.cols())
            .map(|j| QuantParams::fit((0..x.rows()).map(|i| x.get(i, j)), cfg))
            .collect(),
        Granularity::PerOutputRow => x
            .row_iter()
            .map(|r| QuantParams::fit(r.iter().copied(), cfg))
            .collect(),
    }
}

/// Round-to-nearest quantization with asymmetric (or symmetric) affine
/// parameters fitted per group.
pub fn rtn_quantize(x: &RealMatrix, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    cfg.validate()?;
    let params = fit_params(x, cfg);
    let max_code = cfg.max_code();
    let mut codes = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        for (j, &v) in x.row(i).iter().enumerate() {
            codes.push(params[group_index(cfg.granularity, i, j)].quantize(v, max_code));
        }
    }
    QuantizedMatrix::new(x.rows(), x.cols(), cfg.bits, cfg.granularity, codes, params)
}

/// `(code − zero_point) × scale` for every entry.
pub fn dequantize(q: &QuantizedMatrix) -> RealMatrix {
    let mut data = Vec::with_capacity(q.codes.len());
    for i in 0..q.rows {
        for j in 0..q.cols {
            data.push(q.params_at(i, j).dequantize(q.code(i, j)));
        }
    }
    RealMatrix::from_vec_unchecked(q.rows, q.cols, data)
}

/// Quantize-dequantize in one step.
pub(crate) fn fake_quantize(x: &RealMatrix, cfg: &QuantConfig) -> Result<RealMatrix> {
    Ok(dequantize(&rtn_quantize(x, cfg)?))
}
