//! MoE routing traces: data model, synthetic generator, and the two
//! statistics consumed by the placement strategies.

mod format;
mod gen;

pub use format::{parse_trace, read_trace_file, write_trace, write_trace_file};
pub use gen::{generate_trace, GenConfig};

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ExpertId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(Phase::Prefill),
            "decode" => Ok(Phase::Decode),
            other => Err(Error::Parse(format!("unknown phase {other:?}"))),
        }
    }
}

/// Expert selections of one token at every layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RoutingEvent {
    pub token_index: usize,
    pub phase: Phase,
    /// `path[layer]` holds the `top_k` experts selected at that layer.
    pub path: Vec<Vec<ExpertId>>,
}

impl RoutingEvent {
    /// Path with each layer's selection sorted, flattened layer by layer.
    pub fn canonical_path(&self) -> Vec<ExpertId> {
        let mut flat = Vec::with_capacity(self.path.iter().map(Vec::len).sum());
        for sel in &self.path {
            let start = flat.len();
            flat.extend_from_slice(sel);
            flat[start..].sort_unstable();
        }
        flat
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    layers: usize,
    experts_per_layer: usize,
    top_k: usize,
    events: Vec<RoutingEvent>,
}

impl Trace {
    /// Validates every event against the shape. A new sequence starts
    /// whenever `token_index` does not increase; within a sequence no prefill
    /// event may follow a decode event.
    pub fn new(
        layers: usize,
        experts_per_layer: usize,
        top_k: usize,
        events: Vec<RoutingEvent>,
    ) -> Result<Self> {
        check_shape(layers, experts_per_layer, top_k)?;
        let mut prev: Option<&RoutingEvent> = None;
        for (n, ev) in events.iter().enumerate() {
            if ev.path.len() != layers {
                return Err(Error::Input(format!(
                    "event {n}: path covers {} layers, expected {layers}",
                    ev.path.len()
                )));
            }
            for (l, sel) in ev.path.iter().enumerate() {
                if sel.len() != top_k {
                    return Err(Error::Input(format!(
                        "event {n}, layer {l}: {} experts selected, expected {top_k}",
                        sel.len()
                    )));
                }
                for (i, &e) in sel.iter().enumerate() {
                    if e as usize >= experts_per_layer {
                        return Err(Error::Input(format!(
                            "event {n}, layer {l}: expert {e} out of range"
                        )));
                    }
                    if sel[..i].contains(&e) {
                        return Err(Error::Input(format!(
                            "event {n}, layer {l}: expert {e} selected twice"
                        )));
                    }
                }
            }
            if let Some(p) = prev {
                let same_sequence = ev.token_index > p.token_index;
                if same_sequence && p.phase == Phase::Decode && ev.phase == Phase::Prefill {
                    return Err(Error::Input(format!(
                        "event {n}: prefill follows decode within a sequence"
                    )));
                }
            }
            prev = Some(ev);
        }
        Ok(Self {
            layers,
            experts_per_layer,
            top_k,
            events,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts_per_layer(&self) -> usize {
        self.experts_per_layer
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn events(&self) -> &[RoutingEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of (token, layer, expert) activations.
    pub fn activation_count(&self) -> usize {
        self.events.len() * self.layers * self.top_k
    }

    pub fn count_phase(&self, phase: Phase) -> usize {
        self.events.iter().filter(|e| e.phase == phase).count()
    }

    /// Index ranges of the sequences in the trace.
    pub fn sequence_bounds(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..self.events.len() {
            if self.events[i].token_index <= self.events[i - 1].token_index {
                out.push(start..i);
                start = i;
            }
        }
        if !self.events.is_empty() {
            out.push(start..self.events.len());
        }
        out
    }
}

pub(crate) fn check_shape(layers: usize, experts_per_layer: usize, top_k: usize) -> Result<()> {
    if layers == 0 || experts_per_layer == 0 || top_k == 0 {
        return Err(Error::Config(
            "layers, experts_per_layer and top_k must be positive".into(),
        ));
    }
    if top_k > experts_per_layer {
        return Err(Error::Config(format!(
            "top_k = {top_k} exceeds experts_per_layer = {experts_per_layer}"
        )));
    }
    if experts_per_layer > u32::MAX as usize {
        return Err(Error::Config("too many experts per layer".into()));
    }
    Ok(())
}

/// Full-model activation paths and their occurrence counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathStats {
    layers: usize,
    experts_per_layer: usize,
    top_k: usize,
    /// Sorted by count descending, ties by ascending (lexicographic) path.
    entries: Vec<(Vec<ExpertId>, u64)>,
}

impl PathStats {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts_per_layer(&self) -> usize {
        self.experts_per_layer
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn entries(&self) -> &[(Vec<ExpertId>, u64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, c)| c).sum()
    }

    /// Experts a flattened path selects at `layer`.
    pub fn layer_slice<'a>(&self, path: &'a [ExpertId], layer: usize) -> &'a [ExpertId] {
        &path[layer * self.top_k..(layer + 1) * self.top_k]
    }
}

/// Per-layer activation counts of every expert.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertFreq {
    top_k: usize,
    counts: Vec<Vec<u64>>,
}

impl ExpertFreq {
    pub fn from_counts(top_k: usize, counts: Vec<Vec<u64>>) -> Result<Self> {
        let width = counts.first().map_or(0, Vec::len);
        if counts.is_empty() || counts.iter().any(|c| c.len() != width) {
            return Err(Error::Input("ragged or empty expert counts".into()));
        }
        check_shape(counts.len(), width, top_k)?;
        Ok(Self { top_k, counts })
    }

    pub fn layers(&self) -> usize {
        self.counts.len()
    }

    pub fn experts_per_layer(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn layer(&self, layer: usize) -> &[u64] {
        &self.counts[layer]
    }

    /// `(expert, count)` of one layer, count descending then id ascending.
    pub fn ranked(&self, layer: usize) -> Vec<(ExpertId, u64)> {
        let mut v: Vec<(ExpertId, u64)> = self.counts[layer]
            .iter()
            .enumerate()
            .map(|(e, &c)| (e as ExpertId, c))
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

fn require_events(trace: &Trace) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::Input("trace has no events".into()));
    }
    Ok(())
}

/// Exact multiset count of full cross-layer paths (both phases).
pub fn path_stats(trace: &Trace) -> Result<PathStats> {
    require_events(trace)?;
    let mut counts: HashMap<Vec<ExpertId>, u64> = HashMap::new();
    for ev in trace.events() {
        *counts.entry(ev.canonical_path()).or_default() += 1;
    }
    let mut entries: Vec<_> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(PathStats {
        layers: trace.layers,
        experts_per_layer: trace.experts_per_layer,
        top_k: trace.top_k,
        entries,
    })
}

/// Per-layer activation counts (both phases).
pub fn expert_freq(trace: &Trace) -> Result<ExpertFreq> {
    require_events(trace)?;
    let mut counts = vec![vec![0u64; trace.experts_per_layer]; trace.layers];
    for ev in trace.events() {
        for (layer, sel) in ev.path.iter().enumerate() {
            for &e in sel {
                counts[layer][e as usize] += 1;
            }
        }
    }
    Ok(ExpertFreq {
        top_k: trace.top_k,
        counts,
    })
}
