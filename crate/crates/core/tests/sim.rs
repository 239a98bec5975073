mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use moek::placement::{plan_frequency, PlacementPlan};
use moek::sim::{
    critical_batch, decide, render_report, simulate, CacheState, CostModel, DecisionKind,
    ExpertKey, ReportFormat, CSV_HEADER,
};
use moek::trace::{expert_freq, generate_trace, GenConfig, Phase, RoutingEvent, Trace};
use proptest::prelude::*;
use rand::Rng;

/// Textbook LRU: front is least recent.
struct RefLru {
    cap: usize,
    order: VecDeque<ExpertKey>,
}

impl RefLru {
    fn touch(&mut self, k: ExpertKey) -> bool {
        match self.order.iter().position(|&x| x == k) {
            Some(i) => {
                self.order.remove(i);
                self.order.push_back(k);
                true
            }
            None => false,
        }
    }

    fn insert(&mut self, k: ExpertKey) -> Option<ExpertKey> {
        if self.cap == 0 || self.touch(k) {
            return None;
        }
        let out = if self.order.len() == self.cap { self.order.pop_front() } else { None };
        self.order.push_back(k);
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Insert(ExpertKey),
    Touch(ExpertKey),
}

fn replay(cap: usize, ops: &[Op]) {
    let mut cache = CacheState::new(cap);
    let mut reference = RefLru { cap, order: VecDeque::new() };
    let mut recent: Vec<ExpertKey> = Vec::new();
    for &op in ops {
        match op {
            Op::Insert(k) => {
                assert_eq!(cache.insert(k), reference.insert(k));
                recent.retain(|&x| x != k);
                recent.push(k);
            }
            Op::Touch(k) => {
                let hit = cache.touch(&k);
                assert_eq!(hit, reference.touch(k));
                if hit {
                    recent.retain(|&x| x != k);
                    recent.push(k);
                }
            }
        }
        assert!(cache.len() <= cap);
        let mut want: Vec<ExpertKey> = reference.order.iter().rev().copied().collect();
        assert_eq!(cache.recency(), want);
        // The `cap` most recently used keys are exactly what is cached.
        want.sort();
        let mut last: Vec<ExpertKey> = recent.iter().rev().take(cap).copied().collect();
        last.sort();
        assert_eq!(want, last);
    }
}

#[test]
fn cache_matches_reference_lru() {
    for (seed, cap) in [(0u64, 0usize), (1, 1), (2, 3), (3, 8), (4, 20)] {
        let mut r = common::rng(seed);
        let ops: Vec<Op> = (0..1000)
            .map(|_| {
                let k = (r.gen_range(0..4usize), r.gen_range(0..6u32));
                if r.gen_bool(0.6) { Op::Insert(k) } else { Op::Touch(k) }
            })
            .collect();
        replay(cap, &ops);
    }
}

fn op_strategy() -> impl Strategy<Value = Op> {
    (any::<bool>(), 0usize..3, 0u32..5).prop_map(|(ins, l, e)| if ins { Op::Insert((l, e)) } else { Op::Touch((l, e)) })
}

proptest! {
    #![proptest_config(common::config())]

    #[test]
    fn cache_laws(cap in 0usize..6, ops in prop::collection::vec(op_strategy(), 0..200)) {
        replay(cap, &ops);
    }

    #[test]
    fn decisions_are_cheapest(cpu in 0.01f64..5.0, gpu in 0.0f64..1.0, te in 0.0f64..50.0, n in 1u64..200) {
        let cost = CostModel::with_transfer_ms(cpu, gpu, te);
        let plan = PlacementPlan::empty(1, 4);
        let d = decide(0, 0, n, &plan, &mut CacheState::new(0), &cost).unwrap();
        let cpu_t = n as f64 * cpu;
        let xfer_t = te + n as f64 * gpu;
        let want = if xfer_t < cpu_t { DecisionKind::TransferThenGpu } else { DecisionKind::CpuCompute };
        prop_assert_eq!(d.kind, want);
        prop_assert_eq!(d.latency_ms, cpu_t.min(xfer_t));
        prop_assert_eq!(critical_batch(&cost).prefers_transfer(n), want == DecisionKind::TransferThenGpu);
    }
}

fn mixed_trace(seed: u64) -> Trace {
    generate_trace(&GenConfig {
        layers: 4,
        experts_per_layer: 8,
        n_prefill_tokens: 12,
        n_decode_tokens: 30,
        sequences: 3,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

/// Decisions the simulator has to make: one per distinct expert per layer
/// for each prefill batch, one per activation for decode tokens.
fn expected_decisions(t: &Trace) -> u64 {
    let mut n = 0u64;
    let mut batch: Vec<&RoutingEvent> = Vec::new();
    let flush = |batch: &mut Vec<&RoutingEvent>, n: &mut u64| {
        for l in 0..t.layers() {
            let distinct: BTreeSet<u32> = batch.iter().flat_map(|ev| ev.path[l].iter().copied()).collect();
            *n += distinct.len() as u64;
        }
        batch.clear();
    };
    let mut prev: Option<usize> = None;
    for ev in t.events() {
        let new_seq = prev.is_some_and(|p| ev.token_index <= p);
        if new_seq || ev.phase == Phase::Decode {
            flush(&mut batch, &mut n);
        }
        match ev.phase {
            Phase::Prefill => batch.push(ev),
            Phase::Decode => n += (t.layers() * t.top_k()) as u64,
        }
        prev = Some(ev.token_index);
    }
    flush(&mut batch, &mut n);
    n
}

#[test]
fn histogram_and_latency_are_conserved() {
    let cost = CostModel::with_transfer_ms(1.0, 0.05, 6.0);
    for seed in 0..10 {
        let t = mixed_trace(seed);
        let freq = expert_freq(&t).unwrap();
        for (budget, cap) in [(0, 0), (6, 2), (12, 8)] {
            let plan = plan_frequency(&freq, budget).unwrap();
            let r = simulate(&t, &plan, &cost, cap).unwrap();
            assert_eq!(r.decisions.total(), expected_decisions(&t));
            let by_layer: f64 = r.layer_latency_ms.iter().sum();
            let by_token: f64 = r.token_latency_ms.iter().sum();
            assert!((by_layer - r.total_latency_ms).abs() < 1e-9 * r.total_latency_ms.max(1.0));
            assert!((by_token - r.total_latency_ms).abs() < 1e-9 * r.total_latency_ms.max(1.0));
            assert_eq!(r.token_latency_ms.len(), t.len());
            assert_eq!(r.cache_hits, r.decisions.cache_hit);
            assert!(r.transfer_ms <= r.total_latency_ms);
        }
    }
}

#[test]
fn everything_on_cpu() {
    let t = generate_trace(&GenConfig { layers: 3, n_decode_tokens: 50, ..GenConfig::default() }).unwrap();
    let cost = CostModel::with_transfer_ms(0.5, 0.01, 1e6);
    let r = simulate(&t, &PlacementPlan::empty(3, 8), &cost, 4).unwrap();
    assert_eq!(r.decisions.cpu_compute, r.activations);
    assert_eq!(r.gpu_served_rate, 0.0);
    assert!((r.total_latency_ms - 0.5 * r.activations as f64).abs() < 1e-9);
}

#[test]
fn everything_resident() {
    let t = mixed_trace(2);
    let cost = CostModel::with_transfer_ms(1.0, 0.1, 10.0);
    let r = simulate(&t, &PlacementPlan::full(4, 8), &cost, 0).unwrap();
    assert_eq!(r.decisions.gpu_resident_hit, r.decisions.total());
    assert_eq!(r.gpu_served_rate, 1.0);
    assert_eq!(r.static_hits.mean, 1.0);
    assert!((r.total_latency_ms - 0.1 * r.activations as f64).abs() < 1e-9);
}

#[test]
fn long_prefill_batch_transfers() {
    let t = generate_trace(&GenConfig {
        layers: 2,
        experts_per_layer: 8,
        n_prefill_tokens: 100,
        n_decode_tokens: 0,
        hot_path_prob: 1.0,
        ..GenConfig::default()
    })
    .unwrap();
    let cost = CostModel::with_transfer_ms(1.0, 0.1, 10.0);
    let r = simulate(&t, &PlacementPlan::empty(2, 8), &cost, 0).unwrap();
    assert_eq!(r.decisions.transfer_then_gpu, 4);
    assert_eq!(r.decisions.total(), 4);
    assert!((r.total_latency_ms - 4.0 * (10.0 + 100.0 * 0.1)).abs() < 1e-9);
}

#[test]
fn csv_parses_back() {
    let t = mixed_trace(5);
    let plan = plan_frequency(&expert_freq(&t).unwrap(), 10).unwrap();
    let r = simulate(&t, &plan, &CostModel::default(), 3).unwrap();
    let text = render_report(&r, ReportFormat::Csv);
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(header.join(","), CSV_HEADER);
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    for (l, row) in rows[..4].iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), l);
        assert_eq!(row[1].parse::<f64>().unwrap(), r.static_hits.per_layer[l]);
        assert_eq!(row[2].parse::<f64>().unwrap(), r.layer_latency_ms[l]);
    }
    let s = &rows[4];
    assert_eq!(&s[0], "summary");
    assert_eq!(s[2].parse::<f64>().unwrap(), r.total_latency_ms);
    assert_eq!(s[4].parse::<f64>().unwrap(), r.static_hits.gap);
    assert_eq!(s[5].parse::<f64>().unwrap(), r.transfer_fraction);
}

#[test]
fn simulation_is_deterministic() {
    let t = mixed_trace(8);
    let plan = plan_frequency(&expert_freq(&t).unwrap(), 6).unwrap();
    let cost = CostModel::with_transfer_ms(1.0, 0.05, 6.0);
    let a = simulate(&t, &plan, &cost, 5).unwrap();
    let b = simulate(&t, &plan, &cost, 5).unwrap();
    assert_eq!(a, b);
    let texts: BTreeMap<_, _> = [ReportFormat::Text, ReportFormat::Csv, ReportFormat::PlotData]
        .into_iter()
        .map(|f| (format!("{f:?}"), render_report(&a, f) == render_report(&b, f)))
        .collect();
    assert!(texts.values().all(|&same| same));
}
