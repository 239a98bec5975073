use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_shape, ExpertId, Phase, RoutingEvent, Trace};
use crate::error::{Error, Result};

/// Synthetic routing workload.
///
/// The seed fixes the routing structure (per-layer popularity ranking and
/// the hot path); `stream` selects an independent token sample from that
/// same structure, so a profiling trace and an evaluation trace can share a
/// model while differing in tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub n_prefill_tokens: usize,
    pub n_decode_tokens: usize,
    /// Number of sequences, each with the prefill and decode counts above.
    pub sequences: usize,
    pub hot_path_prob: f64,
    pub zipf_s: f64,
    pub seed: u64,
    pub stream: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            layers: 32,
            experts_per_layer: 8,
            top_k: 2,
            n_prefill_tokens: 0,
            n_decode_tokens: 1000,
            sequences: 1,
            hot_path_prob: 0.3,
            zipf_s: 1.2,
            seed: 0,
            stream: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        check_shape(self.layers, self.experts_per_layer, self.top_k)?;
        if !(0.0..=1.0).contains(&self.hot_path_prob) {
            return Err(Error::Config(format!(
                "hot_path_prob must be in [0, 1], got {}",
                self.hot_path_prob
            )));
        }
        if !(self.zipf_s >= 0.0) || !self.zipf_s.is_finite() {
            return Err(Error::Config(format!(
                "zipf_s must be finite and non-negative, got {}",
                self.zipf_s
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.sequences * (self.n_prefill_tokens + self.n_decode_tokens)
    }
}

struct Layer {
    /// `ranking[r]` is the expert holding popularity rank `r`.
    ranking: Vec<ExpertId>,
}

fn draw(layer: &Layer, weights: &[f64], top_k: usize, rng: &mut ChaCha8Rng) -> Vec<ExpertId> {
    let ranks: Vec<usize> = (0..weights.len()).collect();
    let mut sel: Vec<ExpertId> = ranks
        .choose_multiple_weighted(rng, top_k, |&r| weights[r])
        .expect("Zipf weights are positive and finite")
        .map(|&r| layer.ranking[r])
        .collect();
    sel.sort_unstable();
    sel
}

/// Generates a trace: each token follows the hot path with probability
/// `hot_path_prob`, otherwise draws `top_k` distinct experts per layer from a
/// Zipf(`zipf_s`) law over that layer's shuffled popularity ranking.
pub fn generate_trace(cfg: &GenConfig) -> Result<Trace> {
    cfg.validate()?;
    let weights: Vec<f64> = (0..cfg.experts_per_layer)
        .map(|r| ((r + 1) as f64).powf(-cfg.zipf_s))
        .collect();

    let mut structure = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers: Vec<Layer> = (0..cfg.layers)
        .map(|_| {
            let mut ranking: Vec<ExpertId> = (0..cfg.experts_per_layer as ExpertId).collect();
            ranking.shuffle(&mut structure);
            Layer { ranking }
        })
        .collect();
    let hot_path: Vec<Vec<ExpertId>> = layers
        .iter()
        .map(|l| draw(l, &weights, cfg.top_k, &mut structure))
        .collect();

    let mut tokens = ChaCha8Rng::seed_from_u64(cfg.seed);
    tokens.set_stream(cfg.stream.wrapping_add(1));

    let mut events = Vec::with_capacity(cfg.tokens());
    for _ in 0..cfg.sequences {
        let phases = std::iter::repeat_n(Phase::Prefill, cfg.n_prefill_tokens)
            .chain(std::iter::repeat_n(Phase::Decode, cfg.n_decode_tokens));
        for (token_index, phase) in phases.enumerate() {
            let path = if tokens.gen::<f64>() < cfg.hot_path_prob {
                hot_path.clone()
            } else {
                layers
                    .iter()
                    .map(|l| draw(l, &weights, cfg.top_k, &mut tokens))
                    .collect()
            };
            events.push(RoutingEvent {
                token_index,
                phase,
                path,
            });
        }
    }
    Trace::new(cfg.layers, cfg.experts_per_layer, cfg.top_k, events)
}
