//! Python bindings. Matrices cross the boundary as lists of rows; reports
//! come back as plain dicts.

use moek::numkit::{self, RealMatrix};
use moek::placement::{evaluate_plan, plan_two_stage, plan_with_budget, PlacementPlan, Strategy};
use moek::quant::{self, Granularity, OrderingStrategy, QuantConfig};
use moek::sim::{self, CostModel, CriticalBatch};
use moek::trace::{self, GenConfig};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn err(e: moek::Error) -> PyErr {
    match e {
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        moek::Error::Io(e) => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<RealMatrix> {
    RealMatrix::from_rows(&rows).map_err(err)
}

fn rows(m: &RealMatrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

fn parse<T: std::str::FromStr<Err = moek::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn quant_config(bits: u8, granularity: &str) -> PyResult<QuantConfig> {
    Ok(QuantConfig::new(bits).map_err(err)?.with_granularity(parse(granularity)?))
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (_, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let l = PyList::empty(py);
            for x in a {
                l.append(to_py(py, x)?)?;
            }
            l.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &value)
}

#[pyfunction]
fn matmul(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&numkit::matmul(&matrix(a)?, &matrix(b)?).map_err(err)?))
}

#[pyfunction]
fn spd_inverse(h: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&numkit::spd_inverse(&matrix(h)?).map_err(err)?))
}

/// Returns `(codes, dequantized)`.
#[pyfunction]
#[pyo3(signature = (x, bits = 8, granularity = "per_tensor"))]
fn rtn_quantize(x: Vec<Vec<f64>>, bits: u8, granularity: &str) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let q = quant::rtn_quantize(&matrix(x)?, &quant_config(bits, granularity)?).map_err(err)?;
    Ok((rows(&q.codes_matrix()), rows(&quant::dequantize(&q))))
}

/// Returns `(exponent, factors, loss)`.
#[pyfunction]
#[pyo3(signature = (w, x, bits = 8, granularity = "per_tensor", grid_steps = 21))]
fn search_smoothing(
    w: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    bits: u8,
    granularity: &str,
    grid_steps: usize,
) -> PyResult<(f64, Vec<f64>, f64)> {
    let cfg = quant_config(bits, granularity)?;
    let r = quant::search_smoothing(&matrix(w)?, &matrix(x)?, &cfg, grid_steps).map_err(err)?;
    Ok((r.exponent, r.factors, r.loss))
}

/// Full layer pipeline. The dict holds the layer record plus the integer
/// codes and the dequantized smoothed weights.
#[pyfunction]
#[pyo3(signature = (w, x, bits = 8, granularity = "per_tensor", grid_steps = 21, ordering = "max_abs"))]
fn quantize_layer<'py>(
    py: Python<'py>,
    w: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    bits: u8,
    granularity: &str,
    grid_steps: usize,
    ordering: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = quant_config(bits, granularity)?;
    let ordering: OrderingStrategy = parse(ordering)?;
    let r = quant::quantize_layer(&matrix(w)?, &matrix(x)?, &cfg, grid_steps, ordering).map_err(err)?;
    let d = to_dict(py, &r.record())?;
    d.set_item("codes", rows(&r.weights.codes_matrix()))?;
    d.set_item("weights", rows(&quant::dequantize(&r.weights)))?;
    d.set_item("warnings", r.warnings)?;
    Ok(d)
}

#[pyclass(name = "Trace", frozen)]
struct PyTrace {
    inner: trace::Trace,
}

#[pymethods]
impl PyTrace {
    #[staticmethod]
    #[pyo3(signature = (layers = 32, experts_per_layer = 8, top_k = 2, prefill = 0, decode = 1000,
                        sequences = 1, hot_path_prob = 0.3, zipf_s = 1.2, seed = 0, stream = 0))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        layers: usize,
        experts_per_layer: usize,
        top_k: usize,
        prefill: usize,
        decode: usize,
        sequences: usize,
        hot_path_prob: f64,
        zipf_s: f64,
        seed: u64,
        stream: u64,
    ) -> PyResult<Self> {
        let cfg = GenConfig {
            layers,
            experts_per_layer,
            top_k,
            n_prefill_tokens: prefill,
            n_decode_tokens: decode,
            sequences,
            hot_path_prob,
            zipf_s,
            seed,
            stream,
        };
        Ok(Self {
            inner: trace::generate_trace(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: trace::parse_trace(text.as_bytes()).map_err(err)?,
        })
    }

    fn to_text(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        trace::write_trace(&mut buf, &self.inner).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers()
    }

    #[getter]
    fn experts_per_layer(&self) -> usize {
        self.inner.experts_per_layer()
    }

    /// `(path, count)` pairs, most frequent first. Paths are flattened layer
    /// by layer.
    #[pyo3(signature = (top = None))]
    fn path_stats(&self, top: Option<usize>) -> PyResult<Vec<(Vec<u32>, u64)>> {
        let s = trace::path_stats(&self.inner).map_err(err)?;
        Ok(s.entries().iter().take(top.unwrap_or(usize::MAX)).cloned().collect())
    }

    fn expert_freq(&self) -> PyResult<Vec<Vec<u64>>> {
        Ok(trace::expert_freq(&self.inner).map_err(err)?.counts().to_vec())
    }
}

#[pyclass(name = "Plan", frozen)]
struct PyPlan {
    inner: PlacementPlan,
}

#[pymethods]
impl PyPlan {
    /// Builds a plan from a profiling trace. Without a budget the two-stage
    /// strategy keeps `stage1_k + supplement_k` experts per layer.
    #[staticmethod]
    #[pyo3(signature = (trace, strategy = "two_stage", budget = None, stage1_k = 2, supplement_k = 2))]
    fn build(
        trace: &PyTrace,
        strategy: &str,
        budget: Option<usize>,
        stage1_k: usize,
        supplement_k: usize,
    ) -> PyResult<Self> {
        let stats = trace::path_stats(&trace.inner).map_err(err)?;
        let freq = trace::expert_freq(&trace.inner).map_err(err)?;
        let inner = match (parse::<Strategy>(strategy)?, budget) {
            (Strategy::TwoStage, None) => plan_two_stage(&stats, &freq, stage1_k, supplement_k),
            (s, Some(b)) => plan_with_budget(s, &stats, &freq, b, stage1_k),
            (s, None) => Err(moek::Error::Config(format!("strategy {s} needs a budget"))),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn empty(layers: usize, experts_per_layer: usize) -> Self {
        Self {
            inner: PlacementPlan::empty(layers, experts_per_layer),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: PlacementPlan::from_toml(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn residents(&self) -> Vec<Vec<u32>> {
        self.inner.resident().iter().map(|s| s.iter().copied().collect()).collect()
    }

    /// Static hit rates on `trace`: `{per_layer, mean, std, gap}`.
    fn evaluate<'py>(&self, py: Python<'py>, trace: &PyTrace) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &evaluate_plan(&self.inner, &trace.inner).map_err(err)?)
    }
}

/// `n_critical` for a cost model with the transfer time in milliseconds, or
/// `None` when the CPU always wins.
#[pyfunction]
fn critical_batch(latency_cpu_ms: f64, latency_gpu_ms: f64, transfer_ms: f64) -> PyResult<Option<u64>> {
    let cost = CostModel::with_transfer_ms(latency_cpu_ms, latency_gpu_ms, transfer_ms);
    cost.validate().map_err(err)?;
    Ok(match sim::critical_batch(&cost) {
        CriticalBatch::Finite(n) => Some(n),
        CriticalBatch::Unbounded => None,
    })
}

#[pyfunction]
#[pyo3(signature = (trace, plan, latency_cpu_ms = 2.0, latency_gpu_ms = 0.05, transfer_ms = 11.01, cache_capacity = 0, activation_return_ms = 0.0))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    trace: &PyTrace,
    plan: &PyPlan,
    latency_cpu_ms: f64,
    latency_gpu_ms: f64,
    transfer_ms: f64,
    cache_capacity: usize,
    activation_return_ms: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cost = CostModel {
        activation_return_ms,
        ..CostModel::with_transfer_ms(latency_cpu_ms, latency_gpu_ms, transfer_ms)
    };
    let r = sim::simulate(&trace.inner, &plan.inner, &cost, cache_capacity).map_err(err)?;
    to_dict(py, &r)
}

#[pymodule]
#[pyo3(name = "moek")]
fn moek_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(spd_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(rtn_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(search_smoothing, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_layer, m)?)?;
    m.add_function(wrap_pyfunction!(critical_batch, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyPlan>()?;
    m.add("GRANULARITIES", [Granularity::PerTensor.as_str(), Granularity::PerToken.as_str()])?;
    Ok(())
}
