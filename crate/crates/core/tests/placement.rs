mod common;

use std::collections::{BTreeMap, BTreeSet};

use moek::placement::{
    evaluate_plan, plan_frequency, plan_path, plan_two_stage, plan_with_budget, PlacementPlan,
    Strategy,
};
use moek::trace::{expert_freq, generate_trace, path_stats, GenConfig, Phase, RoutingEvent, Trace};

fn small_trace(seed: u64) -> Trace {
    generate_trace(&GenConfig {
        layers: 4,
        experts_per_layer: 8,
        top_k: 2,
        n_decode_tokens: 100,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

type Residents = Vec<BTreeSet<u32>>;

fn naive_path_counts(t: &Trace) -> Vec<(Vec<Vec<u32>>, u64)> {
    let mut m: BTreeMap<Vec<Vec<u32>>, u64> = BTreeMap::new();
    for ev in t.events() {
        let p: Vec<Vec<u32>> = ev
            .path
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.sort();
                s
            })
            .collect();
        *m.entry(p).or_default() += 1;
    }
    let mut v: Vec<_> = m.into_iter().collect();
    // BTreeMap order on nested vectors equals the order on flattened paths
    // because every layer has the same width; a stable sort keeps it for ties.
    v.sort_by(|a, b| b.1.cmp(&a.1));
    v
}

fn naive_counts(t: &Trace) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0u64; t.experts_per_layer()]; t.layers()];
    for ev in t.events() {
        for (l, sel) in ev.path.iter().enumerate() {
            for &e in sel {
                c[l][e as usize] += 1;
            }
        }
    }
    c
}

fn naive_frequency(t: &Trace, budget: usize) -> Residents {
    let c = naive_counts(t);
    let mut all = Vec::new();
    for (l, row) in c.iter().enumerate() {
        for (e, &n) in row.iter().enumerate() {
            all.push((std::cmp::Reverse(n), l, e as u32));
        }
    }
    all.sort();
    let mut r = vec![BTreeSet::new(); t.layers()];
    for &(_, l, e) in all.iter().take(budget) {
        r[l].insert(e);
    }
    r
}

fn naive_path(t: &Trace, budget: usize) -> Residents {
    let mut r: Residents = vec![BTreeSet::new(); t.layers()];
    for (p, _) in naive_path_counts(t) {
        let mut next = r.clone();
        for (l, sel) in p.iter().enumerate() {
            next[l].extend(sel.iter().copied());
        }
        if next.iter().map(BTreeSet::len).sum::<usize>() > budget {
            break;
        }
        r = next;
    }
    r
}

fn naive_two_stage(t: &Trace, k1: usize, k2: usize) -> Residents {
    let paths = naive_path_counts(t);
    let c = naive_counts(t);
    let mut r: Residents = vec![BTreeSet::new(); t.layers()];
    for l in 0..t.layers() {
        'outer: for (p, _) in &paths {
            for &e in &p[l] {
                if r[l].len() == k1 {
                    break 'outer;
                }
                r[l].insert(e);
            }
        }
        let mut ranked: Vec<u32> = (0..t.experts_per_layer() as u32).collect();
        ranked.sort_by_key(|&e| (std::cmp::Reverse(c[l][e as usize]), e));
        for e in ranked {
            if r[l].len() == k1 + k2 {
                break;
            }
            r[l].insert(e);
        }
    }
    r
}

fn naive_hit_rates(plan: &Residents, t: &Trace) -> Vec<f64> {
    (0..t.layers())
        .map(|l| {
            let hits: usize = t.events().iter().map(|ev| ev.path[l].iter().filter(|e| plan[l].contains(e)).count()).sum();
            hits as f64 / (t.len() * t.top_k()) as f64
        })
        .collect()
}

#[test]
fn plans_match_recount_oracles() {
    for seed in 0..10 {
        let t = small_trace(seed);
        let stats = path_stats(&t).unwrap();
        let freq = expert_freq(&t).unwrap();
        for budget in [0, 3, 8, 13, 20, 32] {
            assert_eq!(plan_frequency(&freq, budget).unwrap().resident(), naive_frequency(&t, budget).as_slice());
            assert_eq!(plan_path(&stats, budget).unwrap().resident(), naive_path(&t, budget).as_slice());
        }
        for (k1, k2) in [(0, 2), (1, 1), (2, 2), (3, 0), (2, 6)] {
            let plan = plan_two_stage(&stats, &freq, k1, k2).unwrap();
            let want = naive_two_stage(&t, k1, k2);
            assert_eq!(plan.resident(), want.as_slice(), "seed {seed} k=({k1},{k2})");
            let report = evaluate_plan(&plan, &t).unwrap();
            let rates = naive_hit_rates(&want, &t);
            for (a, b) in report.per_layer.iter().zip(&rates) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }
}

fn contains(big: &PlacementPlan, small: &PlacementPlan) -> bool {
    big.resident().iter().zip(small.resident()).all(|(b, s)| s.is_subset(b))
}

#[test]
fn larger_budgets_only_add_experts() {
    for seed in 0..10 {
        let t = small_trace(100 + seed);
        let stats = path_stats(&t).unwrap();
        let freq = expert_freq(&t).unwrap();
        for s in Strategy::EVALUATED {
            let mut prev: Option<(PlacementPlan, f64)> = None;
            for budget in (4..=32).step_by(4) {
                let plan = plan_with_budget(s, &stats, &freq, budget, 1).unwrap();
                assert!(plan.total_residents() <= budget);
                let mean = evaluate_plan(&plan, &t).unwrap().mean;
                if let Some((p, m)) = &prev {
                    assert!(contains(&plan, p), "{s} budget {budget}");
                    assert!(mean >= *m);
                }
                prev = Some((plan, mean));
            }
        }
    }
}

#[test]
fn two_stage_fills_every_layer_evenly() {
    let t = generate_trace(&GenConfig {
        n_decode_tokens: 500,
        ..GenConfig::default()
    })
    .unwrap();
    let stats = path_stats(&t).unwrap();
    let freq = expert_freq(&t).unwrap();
    for (budget, per_layer) in [(128, 4), (160, 5)] {
        let plan = plan_with_budget(Strategy::TwoStage, &stats, &freq, budget, 2).unwrap();
        assert_eq!(plan.residents_per_layer(), vec![per_layer; 32]);
        assert_eq!(plan.total_residents(), budget);
    }
    assert!(plan_with_budget(Strategy::TwoStage, &stats, &freq, 130, 2).is_err());
}

fn one_path_trace(n: usize) -> Trace {
    let path = vec![vec![1, 3], vec![0, 2], vec![5, 6]];
    let events = (0..n)
        .map(|i| RoutingEvent {
            token_index: i,
            phase: Phase::Decode,
            path: path.clone(),
        })
        .collect();
    Trace::new(3, 8, 2, events).unwrap()
}

#[test]
fn single_path_workload() {
    let t = one_path_trace(20);
    let stats = path_stats(&t).unwrap();
    let freq = expert_freq(&t).unwrap();
    let exact = plan_path(&stats, 6).unwrap();
    assert_eq!(evaluate_plan(&exact, &t).unwrap().mean, 1.0);
    assert_eq!(plan_frequency(&freq, 6).unwrap().resident(), exact.resident());
    assert_eq!(plan_two_stage(&stats, &freq, 2, 0).unwrap().resident(), exact.resident());
    // One slot short of the whole path: the path plan places nothing.
    assert_eq!(plan_path(&stats, 5).unwrap().total_residents(), 0);
    assert_eq!(evaluate_plan(&plan_frequency(&freq, 5).unwrap(), &t).unwrap().gap, 0.5);
}

#[test]
fn planning_is_deterministic() {
    let t = small_trace(4);
    let stats = path_stats(&t).unwrap();
    let freq = expert_freq(&t).unwrap();
    for s in Strategy::EVALUATED {
        let a = plan_with_budget(s, &stats, &freq, 12, 2).unwrap();
        let b = plan_with_budget(s, &stats, &freq, 12, 2).unwrap();
        assert_eq!(a.to_toml().unwrap(), b.to_toml().unwrap());
        assert_eq!(PlacementPlan::from_toml(&a.to_toml().unwrap()).unwrap(), a);
    }
}
