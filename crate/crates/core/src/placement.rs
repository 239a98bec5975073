//! Static GPU residency plans for experts and their hit-rate evaluation.
//!
//! Three strategies are provided:
//!
//! * [`plan_frequency`]: the globally most activated `(layer, expert)` pairs;
//! * [`plan_path`]: every expert of the most frequent full activation paths,
//!   whole paths only;
//! * [`plan_two_stage`]: per layer, the experts of the hottest paths up to a
//!   fixed count, then the layer's most activated remaining experts up to a
//!   second fixed count, giving identical residency in every layer.
//!
//! Ties are always broken by count descending, then layer ascending, then
//! expert id ascending, so plans are deterministic.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ExpertFreq, ExpertId, PathStats, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Frequency,
    Path,
    TwoStage,
    /// Hand-built or externally supplied plan.
    Custom,
}

impl Strategy {
    pub const EVALUATED: [Strategy; 3] = [Strategy::Path, Strategy::Frequency, Strategy::TwoStage];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Frequency => "frequency",
            Strategy::Path => "path",
            Strategy::TwoStage => "two_stage",
            Strategy::Custom => "custom",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frequency" | "freq" => Ok(Strategy::Frequency),
            "path" => Ok(Strategy::Path),
            "two_stage" | "two-stage" => Ok(Strategy::TwoStage),
            "custom" => Ok(Strategy::Custom),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Per-layer sets of GPU-resident experts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    strategy: Strategy,
    budget: usize,
    experts_per_layer: usize,
    resident: Vec<BTreeSet<ExpertId>>,
}

impl PlacementPlan {
    pub fn new(
        strategy: Strategy,
        budget: usize,
        experts_per_layer: usize,
        resident: Vec<BTreeSet<ExpertId>>,
    ) -> Result<Self> {
        let total: usize = resident.iter().map(BTreeSet::len).sum();
        if total > budget {
            return Err(Error::Config(format!(
                "{total} residents exceed the budget of {budget}"
            )));
        }
        if let Some(e) = resident
            .iter()
            .flatten()
            .find(|&&e| e as usize >= experts_per_layer)
        {
            return Err(Error::Config(format!(
                "expert {e} out of range for {experts_per_layer} experts per layer"
            )));
        }
        Ok(Self {
            strategy,
            budget,
            experts_per_layer,
            resident,
        })
    }

    pub fn empty(layers: usize, experts_per_layer: usize) -> Self {
        Self {
            strategy: Strategy::Custom,
            budget: 0,
            experts_per_layer,
            resident: vec![BTreeSet::new(); layers],
        }
    }

    pub fn full(layers: usize, experts_per_layer: usize) -> Self {
        let all: BTreeSet<ExpertId> = (0..experts_per_layer as ExpertId).collect();
        Self {
            strategy: Strategy::Custom,
            budget: layers * experts_per_layer,
            experts_per_layer,
            resident: vec![all; layers],
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn layers(&self) -> usize {
        self.resident.len()
    }

    pub fn experts_per_layer(&self) -> usize {
        self.experts_per_layer
    }

    pub fn resident(&self) -> &[BTreeSet<ExpertId>] {
        &self.resident
    }

    pub fn layer(&self, layer: usize) -> &BTreeSet<ExpertId> {
        &self.resident[layer]
    }

    pub fn is_resident(&self, layer: usize, expert: ExpertId) -> bool {
        self.resident[layer].contains(&expert)
    }

    pub fn total_residents(&self) -> usize {
        self.resident.iter().map(BTreeSet::len).sum()
    }

    pub fn residents_per_layer(&self) -> Vec<usize> {
        self.resident.iter().map(BTreeSet::len).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&PlanFile::from(self)).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: PlanFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let resident = file
            .layers
            .into_iter()
            .map(|ids| {
                let n = ids.len();
                let set: BTreeSet<ExpertId> = ids.into_iter().collect();
                if set.len() != n {
                    return Err(Error::Parse("duplicate expert id in plan".into()));
                }
                Ok(set)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.strategy, file.budget, file.experts_per_layer, resident)
            .map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

/// On-disk layout of a plan.
#[derive(Serialize, Deserialize)]
struct PlanFile {
    strategy: Strategy,
    budget: usize,
    experts_per_layer: usize,
    layers: Vec<Vec<ExpertId>>,
}

impl From<&PlacementPlan> for PlanFile {
    fn from(p: &PlacementPlan) -> Self {
        Self {
            strategy: p.strategy,
            budget: p.budget,
            experts_per_layer: p.experts_per_layer,
            layers: p.resident.iter().map(|s| s.iter().copied().collect()).collect(),
        }
    }
}

fn check_budget(budget: usize, layers: usize, experts: usize) -> Result<()> {
    if budget > layers * experts {
        return Err(Error::Config(format!(
            "budget {budget} exceeds the {} experts in the model",
            layers * experts
        )));
    }
    Ok(())
}

/// The `budget` globally most activated experts, whatever their layer.
pub fn plan_frequency(freq: &ExpertFreq, budget: usize) -> Result<PlacementPlan> {
    let (layers, experts) = (freq.layers(), freq.experts_per_layer());
    check_budget(budget, layers, experts)?;
    let mut all: Vec<(usize, ExpertId, u64)> = freq
        .counts()
        .iter()
        .enumerate()
        .flat_map(|(l, c)| c.iter().enumerate().map(move |(e, &n)| (l, e as ExpertId, n)))
        .collect();
    all.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut resident = vec![BTreeSet::new(); layers];
    for &(l, e, _) in all.iter().take(budget) {
        resident[l].insert(e);
    }
    PlacementPlan::new(Strategy::Frequency, budget, experts, resident)
}

/// Whole paths in descending frequency until the next one no longer fits.
pub fn plan_path(stats: &PathStats, budget: usize) -> Result<PlacementPlan> {
    let (layers, experts) = (stats.layers(), stats.experts_per_layer());
    check_budget(budget, layers, experts)?;
    let mut resident = vec![BTreeSet::new(); layers];
    let mut used = 0;
    for (path, _) in stats.entries() {
        let new: Vec<(usize, ExpertId)> = (0..layers)
            .flat_map(|l| stats.layer_slice(path, l).iter().map(move |&e| (l, e)))
            .filter(|(l, e)| !resident[*l].contains(e))
            .collect();
        if used + new.len() > budget {
            break;
        }
        used += new.len();
        for (l, e) in new {
            resident[l].insert(e);
        }
    }
    PlacementPlan::new(Strategy::Path, budget, experts, resident)
}

/// Two-stage layer-wise selection.
///
/// Stage 1 walks paths by descending frequency and adds each path's experts
/// at every layer until that layer holds `top_k_per_layer` residents; layers
/// fill independently. Stage 2 tops every layer up to
/// `top_k_per_layer + supplement_k_per_layer` with its most activated
/// experts not yet resident.
pub fn plan_two_stage(
    stats: &PathStats,
    freq: &ExpertFreq,
    top_k_per_layer: usize,
    supplement_k_per_layer: usize,
) -> Result<PlacementPlan> {
    let (layers, experts) = (freq.layers(), freq.experts_per_layer());
    if stats.layers() != layers || stats.experts_per_layer() != experts {
        return Err(Error::Config(
            "path statistics and expert frequencies describe different models".into(),
        ));
    }
    let per_layer = top_k_per_layer + supplement_k_per_layer;
    if per_layer > experts {
        return Err(Error::Config(format!(
            "{per_layer} residents per layer exceed {experts} experts per layer"
        )));
    }
    let mut resident: Vec<BTreeSet<ExpertId>> = vec![BTreeSet::new(); layers];
    for (l, set) in resident.iter_mut().enumerate() {
        'paths: for (path, _) in stats.entries() {
            if set.len() >= top_k_per_layer {
                break;
            }
            for &e in stats.layer_slice(path, l) {
                set.insert(e);
                if set.len() >= top_k_per_layer {
                    break 'paths;
                }
            }
        }
        for (e, _) in freq.ranked(l) {
            if set.len() >= per_layer {
                break;
            }
            set.insert(e);
        }
    }
    PlacementPlan::new(Strategy::TwoStage, per_layer * layers, experts, resident)
}

/// Per-layer hit rates with their mean, population standard deviation and
/// max-min gap. Rates are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub per_layer: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub gap: f64,
}

impl PlanReport {
    pub fn from_rates(per_layer: Vec<f64>) -> Self {
        let n = per_layer.len();
        if n == 0 {
            return Self {
                per_layer,
                mean: 0.0,
                std: 0.0,
                gap: 0.0,
            };
        }
        let mean = per_layer.iter().sum::<f64>() / n as f64;
        let var = per_layer.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
        let max = per_layer.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = per_layer.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            per_layer,
            mean,
            std: var.sqrt(),
            gap: max - min,
        }
    }
}

/// Static hit rate of `plan` on `trace`: per layer, the fraction of expert
/// activations whose expert is resident.
pub fn evaluate_plan(plan: &PlacementPlan, trace: &Trace) -> Result<PlanReport> {
    if plan.layers() != trace.layers() || plan.experts_per_layer() != trace.experts_per_layer() {
        return Err(Error::Config(format!(
            "plan is {}x{}, trace is {}x{}",
            plan.layers(),
            plan.experts_per_layer(),
            trace.layers(),
            trace.experts_per_layer()
        )));
    }
    let mut hits = vec![0u64; trace.layers()];
    for ev in trace.events() {
        for (l, sel) in ev.path.iter().enumerate() {
            hits[l] += sel.iter().filter(|&&e| plan.is_resident(l, e)).count() as u64;
        }
    }
    let per_token = (trace.top_k() * trace.len()) as f64;
    let rates = hits
        .iter()
        .map(|&h| if per_token > 0.0 { h as f64 / per_token } else { 0.0 })
        .collect();
    Ok(PlanReport::from_rates(rates))
}

/// Builds the plan of `strategy` with a total budget. For the two-stage
/// strategy the budget must be a multiple of the layer count and at least
/// `stage1_k` per layer.
pub fn plan_with_budget(
    strategy: Strategy,
    stats: &PathStats,
    freq: &ExpertFreq,
    budget: usize,
    stage1_k: usize,
) -> Result<PlacementPlan> {
    match strategy {
        Strategy::Frequency => plan_frequency(freq, budget),
        Strategy::Path => plan_path(stats, budget),
        Strategy::TwoStage => {
            let layers = freq.layers();
            if budget % layers != 0 || budget / layers < stage1_k {
                return Err(Error::Config(format!(
                    "two-stage budget {budget} must be a multiple of {layers} layers \
                     with at least {stage1_k} per layer"
                )));
            }
            plan_two_stage(stats, freq, stage1_k, budget / layers - stage1_k)
        }
        Strategy::Custom => Err(Error::Config("custom plans are not generated".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{expert_freq, path_stats, Phase, RoutingEvent};

    fn trace_of(layers: usize, experts: usize, paths: &[(&[&[u32]], usize)]) -> Trace {
        let mut events = Vec::new();
        for (path, n) in paths {
            for _ in 0..*n {
                events.push(RoutingEvent {
                    token_index: events.len(),
                    phase: Phase::Decode,
                    path: path.iter().map(|s| s.to_vec()).collect(),
                });
            }
        }
        Trace::new(layers, experts, paths[0].0[0].len(), events).unwrap()
    }

    fn set(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    #[test]
    fn frequency_hand_sort() {
        // 3 layers x 4 experts, top-1 routing with hand-picked counts.
        let freq = ExpertFreq::from_counts(
            1,
            vec![vec![5, 1, 0, 3], vec![2, 9, 2, 0], vec![3, 3, 0, 7]],
        )
        .unwrap();
        let plan = plan_frequency(&freq, 5).unwrap();
        // counts: 9 (1,1), 7 (2,3), 5 (0,0), 3 (0,3), 3 (2,0), 3 (2,1) ...
        assert_eq!(plan.resident(), &[set(&[0, 3]), set(&[1]), set(&[0, 3])]);
        assert_eq!(plan_frequency(&freq, 0).unwrap().total_residents(), 0);
        assert!(plan_frequency(&freq, 13).is_err());
    }

    #[test]
    fn path_respects_whole_paths() {
        let t = trace_of(
            2,
            4,
            &[(&[&[0, 1], &[2, 3]], 3), (&[&[0, 2], &[1, 3]], 2), (&[&[1, 3], &[0, 1]], 1)],
        );
        let stats = path_stats(&t).unwrap();
        assert!(plan_path(&stats, 3).unwrap().resident().iter().all(BTreeSet::is_empty));
        let p = plan_path(&stats, 4).unwrap();
        assert_eq!(p.resident(), &[set(&[0, 1]), set(&[2, 3])]);
        // Second path adds (0,2) and (1,1): 6 total.
        let p = plan_path(&stats, 6).unwrap();
        assert_eq!(p.resident(), &[set(&[0, 1, 2]), set(&[1, 2, 3])]);
        // Third path needs (0,3) and (1,0): does not fit in 7, and stops there.
        let p = plan_path(&stats, 7).unwrap();
        assert_eq!(p.total_residents(), 6);
        assert_eq!(plan_path(&stats, 8).unwrap().total_residents(), 8);
    }

    #[test]
    fn two_stage_walkthrough() {
        let t = trace_of(
            2,
            4,
            &[(&[&[0, 1], &[2, 3]], 3), (&[&[0, 2], &[1, 3]], 2), (&[&[3, 2], &[0, 1]], 4)],
        );
        let stats = path_stats(&t).unwrap();
        let freq = expert_freq(&t).unwrap();
        // Hottest path: layer 0 {2,3}, layer 1 {0,1}.
        let p = plan_two_stage(&stats, &freq, 2, 0).unwrap();
        assert_eq!(p.resident(), &[set(&[2, 3]), set(&[0, 1])]);
        // Stage-1 capacity 3: layer 0 then takes 0 from the next path [0,1],
        // layer 1 takes 2.
        let p = plan_two_stage(&stats, &freq, 3, 0).unwrap();
        assert_eq!(p.resident(), &[set(&[0, 2, 3]), set(&[0, 1, 2])]);
        // Stage 2: layer 0 counts [5,3,6,4] -> adds 0; layer 1 counts
        // [4,6,3,5] -> adds 3.
        let p = plan_two_stage(&stats, &freq, 2, 1).unwrap();
        assert_eq!(p.resident(), &[set(&[0, 2, 3]), set(&[0, 1, 3])]);
        assert_eq!(p.budget(), 6);
        assert!(plan_two_stage(&stats, &freq, 3, 2).is_err());
    }

    #[test]
    fn evaluation_edges() {
        let t = trace_of(2, 4, &[(&[&[0, 1], &[2, 3]], 3), (&[&[0, 2], &[1, 3]], 1)]);
        let full = evaluate_plan(&PlacementPlan::full(2, 4), &t).unwrap();
        assert_eq!(full.per_layer, vec![1.0, 1.0]);
        assert_eq!((full.std, full.gap), (0.0, 0.0));
        let empty = evaluate_plan(&PlacementPlan::empty(2, 4), &t).unwrap();
        assert_eq!(empty.per_layer, vec![0.0, 0.0]);
        let plan = PlacementPlan::new(Strategy::Custom, 2, 4, vec![set(&[0]), set(&[3])]).unwrap();
        let r = evaluate_plan(&plan, &t).unwrap();
        assert_eq!(r.per_layer, vec![0.5, 0.5]);
        assert!(evaluate_plan(&PlacementPlan::empty(3, 4), &t).is_err());
    }

    #[test]
    fn report_statistics() {
        let r = PlanReport::from_rates(vec![0.2, 0.4, 0.9]);
        assert!((r.mean - 0.5).abs() < 1e-15);
        let var: f64 = [0.09f64, 0.01, 0.16].iter().sum::<f64>() / 3.0;
        assert!((r.std - var.sqrt()).abs() < 1e-15);
        assert!((r.gap - 0.7).abs() < 1e-15);
    }

    #[test]
    fn plan_file_roundtrip() {
        let plan = PlacementPlan::new(Strategy::TwoStage, 4, 8, vec![set(&[1, 7]), set(&[0, 2])]).unwrap();
        let text = plan.to_toml().unwrap();
        assert!(text.contains("strategy = \"two_stage\""));
        assert_eq!(PlacementPlan::from_toml(&text).unwrap(), plan);
        assert!(PlacementPlan::from_toml("strategy = \"path\"\nbudget = 1\nexperts_per_layer = 8\nlayers = [[1, 2]]\n").is_err());
    }
}
