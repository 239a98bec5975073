use std::fs;
use std::path::Path;

use moek::placement::Strategy;
use moek::quant::{Granularity, OrderingStrategy, QuantConfig, DEFAULT_GRID_STEPS};
use moek::sim::{CostConfig, ReportFormat};
use moek::sweep::SweepConfig;
use moek::trace::GenConfig;
use moek::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with. Loaded from `--config`, then
/// overridden by command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub quant: QuantSection,
    pub gen: GenConfig,
    pub cost: CostConfig,
    pub plan: PlanSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub bits: u8,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub grid_steps: usize,
    pub ordering: OrderingStrategy,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            bits: 8,
            symmetric: false,
            granularity: Granularity::PerTensor,
            grid_steps: DEFAULT_GRID_STEPS,
            ordering: OrderingStrategy::MaxAbs,
        }
    }
}

impl QuantSection {
    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            bits: self.bits,
            symmetric: self.symmetric,
            granularity: self.granularity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub strategy: Strategy,
    /// Total residents. Optional for the two-stage strategy, which otherwise
    /// uses `(top_k + supplement_k) · layers`.
    pub budget: Option<usize>,
    pub top_k: usize,
    pub supplement_k: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::TwoStage,
            budget: None,
            top_k: 2,
            supplement_k: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub strategies: Vec<Strategy>,
    pub budgets: Vec<usize>,
    pub input_lengths: Vec<usize>,
    pub eval_tokens: usize,
    pub decode_tokens: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::default();
        Self {
            strategies: d.strategies,
            budgets: d.budgets,
            input_lengths: d.input_lengths,
            eval_tokens: d.eval_tokens,
            decode_tokens: d.decode_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub format: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            format: "text".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| crate::io_error(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            profile: self.gen.clone(),
            strategies: self.sweep.strategies.clone(),
            budgets: self.sweep.budgets.clone(),
            input_lengths: self.sweep.input_lengths.clone(),
            eval_tokens: self.sweep.eval_tokens,
            decode_tokens: self.sweep.decode_tokens,
            stage1_k: self.plan.top_k,
            cost: self.cost.cost_model(),
            cache_capacity: self.cost.cache_capacity,
        }
    }

    pub fn report_format(&self) -> Result<ReportFormat> {
        self.output.format.parse()
    }

    /// Checks every section against its module's preconditions.
    pub fn validate(&self) -> Result<()> {
        self.quant.quant_config().validate()?;
        if self.quant.grid_steps < 2 {
            return Err(Error::Config(format!(
                "grid_steps must be at least 2, got {}",
                self.quant.grid_steps
            )));
        }
        self.gen.validate()?;
        self.cost.cost_model().validate()?;
        self.sweep_config().validate()?;
        self.report_format()?;
        Ok(())
    }
}
