//! Trace-driven simulation of MoE inference with experts split between CPU
//! and GPU.
//!
//! For every expert activation the simulator asks, in order: is the expert
//! statically resident on the GPU; is it in the GPU expert cache; is the
//! batch large enough that transferring beats CPU compute? Latencies are
//! additive (no overlap of transfer and compute).
//!
//! Prefill tokens of a sequence form one batch: per layer, each distinct
//! selected expert gets a single decision with `n` equal to the number of
//! batch tokens routed to it. Decode tokens are processed one at a time.

mod cache;
mod cost;
mod report;

pub use cache::{cache_insert, CacheState, ExpertKey};
pub use cost::{critical_batch, CostConfig, CostModel, CriticalBatch};
pub use report::{render_plotdata, render_report, ReportFormat, CSV_HEADER};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placement::{PlacementPlan, PlanReport, Strategy};
use crate::trace::{ExpertId, Phase, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    GpuResidentHit,
    CacheHit,
    CpuCompute,
    TransferThenGpu,
}

impl DecisionKind {
    pub const ALL: [DecisionKind; 4] = [
        DecisionKind::GpuResidentHit,
        DecisionKind::CacheHit,
        DecisionKind::CpuCompute,
        DecisionKind::TransferThenGpu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecisionKind::GpuResidentHit => "gpu_resident_hit",
            DecisionKind::CacheHit => "cache_hit",
            DecisionKind::CpuCompute => "cpu_compute",
            DecisionKind::TransferThenGpu => "transfer_then_gpu",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub kind: DecisionKind,
    pub latency_ms: f64,
    /// Share of `latency_ms` spent moving weights.
    pub transfer_ms: f64,
    /// Expert pushed out of the cache by a transfer.
    pub evicted: Option<ExpertKey>,
}

/// Offload predictor: cost model with its precomputed crossover batch.
#[derive(Clone, Copy, Debug)]
pub struct Predictor {
    cost: CostModel,
    critical: CriticalBatch,
}

impl Predictor {
    pub fn new(cost: CostModel) -> Result<Self> {
        cost.validate()?;
        Ok(Self {
            cost,
            critical: critical_batch(&cost),
        })
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn critical(&self) -> CriticalBatch {
        self.critical
    }

    /// Decides how to serve `n_inputs` tokens routed to `expert` at `layer`,
    /// updating the cache on hits and transfers.
    pub fn decide(
        &self,
        layer: usize,
        expert: ExpertId,
        n_inputs: u64,
        plan: &PlacementPlan,
        cache: &mut CacheState,
    ) -> Decision {
        let c = &self.cost;
        let gpu = |kind| Decision {
            kind,
            latency_ms: c.gpu_time(n_inputs),
            transfer_ms: 0.0,
            evicted: None,
        };
        if plan.is_resident(layer, expert) {
            gpu(DecisionKind::GpuResidentHit)
        } else if cache.touch(&(layer, expert)) {
            gpu(DecisionKind::CacheHit)
        } else if self.critical.prefers_transfer(n_inputs) {
            Decision {
                kind: DecisionKind::TransferThenGpu,
                latency_ms: c.transfer_time(n_inputs),
                transfer_ms: c.transfer_ms(),
                evicted: cache.insert((layer, expert)),
            }
        } else {
            Decision {
                kind: DecisionKind::CpuCompute,
                latency_ms: c.cpu_time(n_inputs) + c.activation_return_ms,
                transfer_ms: 0.0,
                evicted: None,
            }
        }
    }
}

/// One-shot form of [`Predictor::decide`].
pub fn decide(
    expert: ExpertId,
    layer: usize,
    n_inputs: u64,
    plan: &PlacementPlan,
    cache: &mut CacheState,
    cost: &CostModel,
) -> Result<Decision> {
    if n_inputs == 0 {
        return Err(Error::Input("n_inputs must be at least 1".into()));
    }
    Ok(Predictor::new(*cost)?.decide(layer, expert, n_inputs, plan, cache))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionHistogram {
    pub gpu_resident_hit: u64,
    pub cache_hit: u64,
    pub cpu_compute: u64,
    pub transfer_then_gpu: u64,
}

impl DecisionHistogram {
    pub fn get(&self, kind: DecisionKind) -> u64 {
        match kind {
            DecisionKind::GpuResidentHit => self.gpu_resident_hit,
            DecisionKind::CacheHit => self.cache_hit,
            DecisionKind::CpuCompute => self.cpu_compute,
            DecisionKind::TransferThenGpu => self.transfer_then_gpu,
        }
    }

    fn bump(&mut self, kind: DecisionKind) {
        *match kind {
            DecisionKind::GpuResidentHit => &mut self.gpu_resident_hit,
            DecisionKind::CacheHit => &mut self.cache_hit,
            DecisionKind::CpuCompute => &mut self.cpu_compute,
            DecisionKind::TransferThenGpu => &mut self.transfer_then_gpu,
        } += 1;
    }

    pub fn total(&self) -> u64 {
        self.gpu_resident_hit + self.cache_hit + self.cpu_compute + self.transfer_then_gpu
    }
}

/// Static hit rates restricted to one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseHits {
    pub activations: u64,
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub strategy: Strategy,
    pub layers: usize,
    pub tokens: u64,
    /// Token-level (layer, expert) activations.
    pub activations: u64,
    /// Plan-residency hit rates over both phases (mean/std/gap included).
    pub static_hits: PlanReport,
    pub prefill_hits: PhaseHits,
    pub decode_hits: PhaseHits,
    /// Fraction of activations computed on the GPU (resident, cached or
    /// transferred).
    pub gpu_served_rate: f64,
    pub cache_capacity: usize,
    pub cache_hits: u64,
    /// Decisions that consulted the cache (non-resident experts).
    pub cache_lookups: u64,
    pub cache_hit_rate: f64,
    pub evictions: u64,
    pub decisions: DecisionHistogram,
    pub critical_batch: CriticalBatch,
    pub total_latency_ms: f64,
    pub transfer_ms: f64,
    pub transfer_fraction: f64,
    pub layer_latency_ms: Vec<f64>,
    pub layer_latency_std: f64,
    /// Latency of every token in trace order; a prefill batch's latency is
    /// spread evenly over its tokens.
    pub token_latency_ms: Vec<f64>,
}

fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Default)]
struct Tally {
    decisions: DecisionHistogram,
    total: f64,
    transfer: f64,
    layer_latency: Vec<f64>,
    gpu_served: u64,
    evictions: u64,
}

impl Tally {
    fn record(&mut self, layer: usize, n: u64, d: &Decision) {
        self.decisions.bump(d.kind);
        self.total += d.latency_ms;
        self.transfer += d.transfer_ms;
        self.layer_latency[layer] += d.latency_ms;
        if d.kind != DecisionKind::CpuCompute {
            self.gpu_served += n;
        }
    }
}

fn phase_hits(hits: &[u64], tokens: u64, top_k: usize) -> PhaseHits {
    let activations = tokens * top_k as u64;
    let per_layer: Vec<f64> = hits
        .iter()
        .map(|&h| if activations > 0 { h as f64 / activations as f64 } else { 0.0 })
        .collect();
    let mean = if per_layer.is_empty() {
        0.0
    } else {
        per_layer.iter().sum::<f64>() / per_layer.len() as f64
    };
    PhaseHits {
        activations: activations * hits.len() as u64,
        per_layer,
        mean,
    }
}

/// Replays `trace` against a static plan, a cost model and an initially
/// empty LRU cache of `cache_capacity` experts.
pub fn simulate(
    trace: &Trace,
    plan: &PlacementPlan,
    cost: &CostModel,
    cache_capacity: usize,
) -> Result<SimReport> {
    if plan.layers() != trace.layers() || plan.experts_per_layer() != trace.experts_per_layer() {
        return Err(Error::Config(format!(
            "plan is {}x{}, trace is {}x{}",
            plan.layers(),
            plan.experts_per_layer(),
            trace.layers(),
            trace.experts_per_layer()
        )));
    }
    let predictor = Predictor::new(*cost)?;
    let layers = trace.layers();
    let mut cache = CacheState::new(cache_capacity);
    let mut tally = Tally {
        layer_latency: vec![0.0; layers],
        ..Tally::default()
    };
    let mut cache_lookups = 0u64;
    let mut token_latency = Vec::with_capacity(trace.len());
    let mut static_hits = [vec![0u64; layers], vec![0u64; layers]];
    let events = trace.events();

    let mut step = |layer: usize, expert: ExpertId, n: u64, cache: &mut CacheState, tally: &mut Tally| {
        let resident = plan.is_resident(layer, expert);
        if !resident {
            cache_lookups += 1;
        }
        let d = predictor.decide(layer, expert, n, plan, cache);
        if d.evicted.is_some() {
            tally.evictions += 1;
        }
        tally.record(layer, n, &d);
        d.latency_ms
    };

    for seq in trace.sequence_bounds() {
        let mut i = seq.start;
        while i < seq.end {
            if events[i].phase == Phase::Prefill {
                let end = (i..seq.end)
                    .find(|&j| events[j].phase != Phase::Prefill)
                    .unwrap_or(seq.end);
                let batch = &events[i..end];
                let mut batch_latency = 0.0;
                for layer in 0..layers {
                    let mut routed: BTreeMap<ExpertId, u64> = BTreeMap::new();
                    for ev in batch {
                        for &e in &ev.path[layer] {
                            *routed.entry(e).or_default() += 1;
                            if plan.is_resident(layer, e) {
                                static_hits[0][layer] += 1;
                            }
                        }
                    }
                    for (e, n) in routed {
                        batch_latency += step(layer, e, n, &mut cache, &mut tally);
                    }
                }
                let share = batch_latency / batch.len() as f64;
                token_latency.extend(std::iter::repeat_n(share, batch.len()));
                i = end;
            } else {
                let ev = &events[i];
                let mut latency = 0.0;
                for (layer, sel) in ev.path.iter().enumerate() {
                    for &e in sel {
                        if plan.is_resident(layer, e) {
                            static_hits[1][layer] += 1;
                        }
                        latency += step(layer, e, 1, &mut cache, &mut tally);
                    }
                }
                token_latency.push(latency);
                i += 1;
            }
        }
    }

    let top_k = trace.top_k();
    let prefill_tokens = trace.count_phase(Phase::Prefill) as u64;
    let decode_tokens = trace.count_phase(Phase::Decode) as u64;
    let tokens = prefill_tokens + decode_tokens;
    let activations = trace.activation_count() as u64;
    let combined: Vec<u64> = (0..layers)
        .map(|l| static_hits[0][l] + static_hits[1][l])
        .collect();
    let per_layer_rate = combined
        .iter()
        .map(|&h| if tokens > 0 { h as f64 / (tokens * top_k as u64) as f64 } else { 0.0 })
        .collect();
    let cache_hits = tally.decisions.cache_hit;

    Ok(SimReport {
        strategy: plan.strategy(),
        layers,
        tokens,
        activations,
        static_hits: PlanReport::from_rates(per_layer_rate),
        prefill_hits: phase_hits(&static_hits[0], prefill_tokens, top_k),
        decode_hits: phase_hits(&static_hits[1], decode_tokens, top_k),
        gpu_served_rate: if activations > 0 {
            tally.gpu_served as f64 / activations as f64
        } else {
            0.0
        },
        cache_capacity,
        cache_hits,
        cache_lookups,
        cache_hit_rate: if cache_lookups > 0 {
            cache_hits as f64 / cache_lookups as f64
        } else {
            0.0
        },
        evictions: tally.evictions,
        decisions: tally.decisions,
        critical_batch: predictor.critical(),
        total_latency_ms: tally.total,
        transfer_ms: tally.transfer,
        transfer_fraction: if tally.total > 0.0 {
            tally.transfer / tally.total
        } else {
            0.0
        },
        layer_latency_std: population_std(&tally.layer_latency),
        layer_latency_ms: tally.layer_latency,
        token_latency_ms: token_latency,
    })
}
