use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::model::{DecodingMode, DecodingParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// Full per-position KL(p₀ ‖ p_θ) summed over the vocabulary.
    Exact,
    /// Log-ratio `log p₀(y_t)/p_θ(y_t)` at the realized token only.
    Approximate,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainOn {
    AllQuantiles,
    BestOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExploreToken {
    Best,
    Random,
}

/// Hyperparameters of the explore / quantize / learn loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_quantiles: usize,
    pub kl_coef: f64,
    /// Number of explore/quantize/learn rounds, including the bootstrap round.
    pub iterations: usize,
    /// Gradient steps across all rounds; each round takes `total_steps / iterations`.
    pub total_steps: usize,
    pub batch_size: usize,
    pub samples_per_prompt: usize,
    pub explore_decoding: DecodingParams,
    /// Share of exploration samples decoded greedily instead of with `explore_decoding`.
    pub greedy_fraction: f64,
    pub kl_mode: KlMode,
    /// Unlikelihood weight; 0 disables the term.
    pub unlikelihood_alpha: f64,
    pub train_on: TrainOn,
    pub explore_token: ExploreToken,
    /// Divide NLL and KL by continuation length instead of summing over it.
    pub per_token_average: bool,
    /// Drop the pool before each exploration round instead of accumulating.
    pub reset_pool_each_iteration: bool,
    pub pool_capacity: Option<usize>,
    pub lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub workers: usize,
    /// Samples per prompt for the per-round reward snapshot (0 disables it).
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_quantiles: 5,
            kl_coef: 0.05,
            iterations: 16,
            total_steps: 8000,
            batch_size: 128,
            samples_per_prompt: 1,
            explore_decoding: DecodingParams::nucleus(0.9, 20),
            greedy_fraction: 0.0,
            kl_mode: KlMode::Exact,
            unlikelihood_alpha: 0.0,
            train_on: TrainOn::AllQuantiles,
            explore_token: ExploreToken::Best,
            per_token_average: false,
            reset_pool_each_iteration: false,
            pool_capacity: None,
            lr: 1e-5,
            warmup_steps: 800,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            seed: 0,
            workers: 1,
            eval_samples: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for the degenerate-repetition setting: 8 quantiles, β = 0.01,
    /// 8 rounds, half of exploration greedy.
    pub fn repetition_defaults() -> Self {
        TrainConfig {
            n_quantiles: 8,
            kl_coef: 0.01,
            iterations: 8,
            total_steps: 60_000,
            warmup_steps: 3000,
            greedy_fraction: 0.5,
            ..Self::default()
        }
    }

    pub fn steps_per_iteration(&self) -> usize {
        self.total_steps.checked_div(self.iterations).unwrap_or(0)
    }

    // Negated comparisons so that NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::TrainConfig(m));
        if self.n_quantiles == 0 {
            return fail("n_quantiles must be at least 1".into());
        }
        if !(self.kl_coef >= 0.0) || !self.kl_coef.is_finite() {
            return fail(format!("kl_coef {} must be finite and >= 0", self.kl_coef));
        }
        if !(0.0..=1.0).contains(&self.greedy_fraction) {
            return fail(format!("greedy_fraction {} not in [0, 1]", self.greedy_fraction));
        }
        if !(self.unlikelihood_alpha >= 0.0) {
            return fail(format!("unlikelihood_alpha {} must be >= 0", self.unlikelihood_alpha));
        }
        if self.samples_per_prompt == 0 {
            return fail("samples_per_prompt must be positive".into());
        }
        if self.workers == 0 {
            return fail("workers must be positive".into());
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if self.explore_decoding.mode == DecodingMode::Nucleus {
            self.explore_decoding.validate()?;
        }
        Ok(())
    }

    /// Whether exploration item `j` is decoded greedily: a deterministic
    /// interleave giving exactly `⌊n · greedy_fraction⌋` greedy items out of `n`.
    pub fn is_greedy_item(&self, j: usize) -> bool {
        let f = self.greedy_fraction;
        ((j + 1) as f64 * f).floor() > (j as f64 * f).floor()
    }
}
