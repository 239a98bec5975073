//! Parameter sweeps over placement strategy, resident budget and input
//! length.
//!
//! Plans are built once per (strategy, budget) from a profiling trace, then
//! replayed on an evaluation trace per input length. Evaluation traces share
//! the profiling trace's routing structure (same seed) but draw their tokens
//! from a different stream.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placement::{evaluate_plan, plan_with_budget, PlacementPlan, Strategy};
use crate::sim::{simulate, CostModel};
use crate::trace::{expert_freq, generate_trace, path_stats, GenConfig, Trace};

pub const SWEEP_CSV_HEADER: &str = "strategy,budget,input_len,residents_min,residents_max,\
mean,std,gap,total_latency_ms,transfer_fraction,gpu_served_rate";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Profiling trace the plans are built from.
    pub profile: GenConfig,
    pub strategies: Vec<Strategy>,
    pub budgets: Vec<usize>,
    /// Prefill tokens per sequence in the evaluation traces.
    pub input_lengths: Vec<usize>,
    /// Approximate prefill tokens per evaluation trace; the sequence count is
    /// `eval_tokens / input_len`.
    pub eval_tokens: usize,
    pub decode_tokens: usize,
    /// Residents per layer taken from hot paths by the two-stage strategy.
    pub stage1_k: usize,
    pub cost: CostModel,
    pub cache_capacity: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            profile: GenConfig::default(),
            strategies: Strategy::EVALUATED.to_vec(),
            budgets: vec![128, 160],
            input_lengths: vec![25, 50, 100],
            eval_tokens: 1000,
            decode_tokens: 16,
            stage1_k: 2,
            cost: CostModel::default(),
            cache_capacity: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.cost.validate()?;
        if self.strategies.contains(&Strategy::Custom) {
            return Err(Error::Config("custom plans cannot be swept".into()));
        }
        if let Some(&l) = self.input_lengths.iter().find(|&&l| l == 0) {
            return Err(Error::Config(format!("input length must be positive, got {l}")));
        }
        if self.eval_tokens == 0 {
            return Err(Error::Config("eval_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Evaluation trace settings for one input length.
    pub fn eval_config(&self, input_len: usize) -> GenConfig {
        GenConfig {
            n_prefill_tokens: input_len,
            n_decode_tokens: self.decode_tokens,
            sequences: (self.eval_tokens / input_len).max(1),
            stream: self.profile.stream.wrapping_add(1),
            ..self.profile.clone()
        }
    }

    pub fn cell_count(&self) -> usize {
        self.strategies.len() * self.budgets.len() * self.input_lengths.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub budget: usize,
    pub input_len: usize,
    pub residents_min: usize,
    pub residents_max: usize,
    pub mean: f64,
    pub std: f64,
    pub gap: f64,
    pub total_latency_ms: f64,
    pub transfer_fraction: f64,
    pub gpu_served_rate: f64,
}

fn run_cell(plan: &PlacementPlan, trace: &Trace, input_len: usize, cfg: &SweepConfig) -> Result<SweepRow> {
    let hits = evaluate_plan(plan, trace)?;
    let sim = simulate(trace, plan, &cfg.cost, cfg.cache_capacity)?;
    let per_layer = plan.residents_per_layer();
    Ok(SweepRow {
        strategy: plan.strategy(),
        budget: plan.budget(),
        input_len,
        residents_min: per_layer.iter().copied().min().unwrap_or(0),
        residents_max: per_layer.iter().copied().max().unwrap_or(0),
        mean: hits.mean,
        std: hits.std,
        gap: hits.gap,
        total_latency_ms: sim.total_latency_ms,
        transfer_fraction: sim.transfer_fraction,
        gpu_served_rate: sim.gpu_served_rate,
    })
}

/// Runs every (strategy, budget, input length) cell on up to `jobs` threads.
/// Rows come back in grid order (strategy, then budget, then length) no
/// matter how the cells are scheduled.
pub fn run_sweep(cfg: &SweepConfig, jobs: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let profile = generate_trace(&cfg.profile)?;
    let stats = path_stats(&profile)?;
    let freq = expert_freq(&profile)?;

    let mut plans = Vec::new();
    for &s in &cfg.strategies {
        for &b in &cfg.budgets {
            plans.push(plan_with_budget(s, &stats, &freq, b, cfg.stage1_k)?);
        }
    }
    let traces = cfg
        .input_lengths
        .iter()
        .map(|&l| generate_trace(&cfg.eval_config(l)))
        .collect::<Result<Vec<_>>>()?;

    let cells: Vec<(usize, usize)> = (0..plans.len())
        .flat_map(|p| (0..traces.len()).map(move |t| (p, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|&(p, t)| run_cell(&plans[p], &traces[t], cfg.input_lengths[t], cfg))
            .collect()
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.strategy,
            r.budget,
            r.input_len,
            r.residents_min,
            r.residents_max,
            r.mean,
            r.std,
            r.gap,
            r.total_latency_ms,
            r.transfer_fraction,
            r.gpu_served_rate
        );
    }
    out
}
