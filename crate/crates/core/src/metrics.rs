//! Generation-quality metrics: reward extremes, violation rate, n-gram
//! diversity and repetition, and perplexity under the frozen reference.

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::model::{DecodingParams, LanguageModel};
use crate::rewards::{rep_n, RewardFn};
use crate::training::generate;
use crate::{Error, Result};

/// Default samples per prompt for evaluation.
pub const DEFAULT_EVAL_SAMPLES: usize = 25;

/// Whether higher is better (`Reward`) or `1 − reward` is reported (`Badness`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Reward,
    Badness,
}

impl Orientation {
    fn apply(self, r: f64) -> f64 {
        match self {
            Orientation::Reward => r,
            Orientation::Badness => 1.0 - r,
        }
    }
}

fn check_nonempty(per_prompt: &[Vec<f64>]) -> Result<()> {
    if per_prompt.is_empty() || per_prompt.iter().any(Vec::is_empty) {
        return Err(Error::EmptySampleSet);
    }
    Ok(())
}

/// Mean over prompts of the largest per-sample value under `orientation`.
pub fn avg_max_reward(per_prompt: &[Vec<f64>], orientation: Orientation) -> Result<f64> {
    check_nonempty(per_prompt)?;
    let total: f64 = per_prompt
        .iter()
        .map(|rs| rs.iter().map(|&r| orientation.apply(r)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / per_prompt.len() as f64)
}

/// Fraction of prompts with at least one sample whose reward is below `threshold`.
pub fn violation_prob(per_prompt: &[Vec<f64>], threshold: f64) -> Result<f64> {
    check_nonempty(per_prompt)?;
    let hits = per_prompt.iter().filter(|rs| rs.iter().any(|&r| r < threshold)).count();
    Ok(hits as f64 / per_prompt.len() as f64)
}

/// Mean over generations of `|unique n-grams| / |tokens|`; generations shorter
/// than `n` count as 0. An empty set gives 0.
pub fn dist_n<T: Eq + Hash>(generations: &[Vec<T>], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    if generations.is_empty() {
        return 0.0;
    }
    let total: f64 = generations
        .iter()
        .map(|y| {
            if y.len() < n {
                0.0
            } else {
                y.windows(n).collect::<HashSet<_>>().len() as f64 / y.len() as f64
            }
        })
        .sum();
    total / generations.len() as f64
}

/// Mean `rep_n` over generations.
pub fn mean_rep_n<T: Eq + Hash>(generations: &[Vec<T>], n: usize) -> f64 {
    if generations.is_empty() {
        return 0.0;
    }
    generations.iter().map(|y| rep_n(y, n)).sum::<f64>() / generations.len() as f64
}

/// Perplexity of the continuations given their prompts under `reference`.
pub fn output_ppl(reference: &LanguageModel, prompts: &[Vec<u32>], generations: &[Vec<Vec<u32>>]) -> Result<f64> {
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = prompts
        .iter()
        .zip(generations)
        .flat_map(|(x, ys)| ys.iter().map(move |y| (x.clone(), y.clone())))
        .collect();
    reference.perplexity(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n_prompts: usize,
    pub n_samples: usize,
    pub orientation: Orientation,
    pub mean_reward: f64,
    pub avg_max_reward: f64,
    pub violation_prob: f64,
    pub violation_threshold: f64,
    pub dist_2: f64,
    pub dist_3: f64,
    pub rep_2: f64,
    pub rep_3: f64,
    pub output_ppl: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generations: Vec<Vec<Vec<u32>>>,
}

impl EvalReport {
    /// Scores `generations` (grouped by prompt) and aggregates every metric.
    pub fn from_generations(
        label: impl Into<String>,
        reference: &LanguageModel,
        prompts: &[Vec<u32>],
        generations: Vec<Vec<Vec<u32>>>,
        reward: &dyn RewardFn,
        orientation: Orientation,
        threshold: f64,
    ) -> Result<Self> {
        let mut per_prompt = Vec::with_capacity(prompts.len());
        for (x, ys) in prompts.iter().zip(&generations) {
            let pairs: Vec<(&[u32], &[u32])> = ys.iter().map(|y| (&x[..], &y[..])).collect();
            per_prompt.push(reward.score_batch(&pairs)?);
        }
        check_nonempty(&per_prompt)?;
        let flat: Vec<Vec<u32>> = generations.iter().flatten().cloned().collect();
        let n_scores: usize = per_prompt.iter().map(Vec::len).sum();
        Ok(EvalReport {
            label: label.into(),
            n_prompts: prompts.len(),
            n_samples: generations.first().map_or(0, Vec::len),
            orientation,
            mean_reward: per_prompt.iter().flatten().sum::<f64>() / n_scores as f64,
            avg_max_reward: avg_max_reward(&per_prompt, orientation)?,
            violation_prob: violation_prob(&per_prompt, threshold)?,
            violation_threshold: threshold,
            dist_2: dist_n(&flat, 2),
            dist_3: dist_n(&flat, 3),
            rep_2: mean_rep_n(&flat, 2),
            rep_3: mean_rep_n(&flat, 3),
            output_ppl: output_ppl(reference, prompts, &generations)?,
            generations,
        })
    }

    pub const TABLE_HEADER: &'static str =
        "label\tmean_reward\tavg_max\tviolation_prob\tdist_2\tdist_3\trep_2\trep_3\toutput_ppl\tn_samples";

    /// Tab-separated row matching [`TABLE_HEADER`](Self::TABLE_HEADER).
    pub fn table_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.6}\t{}",
            self.label,
            self.mean_reward,
            self.avg_max_reward,
            self.violation_prob,
            self.dist_2,
            self.dist_3,
            self.rep_2,
            self.rep_3,
            self.output_ppl,
            self.n_samples
        )
    }

    /// The report without its generations, for compact logging.
    pub fn summary(&self) -> Self {
        EvalReport { generations: Vec::new(), ..self.clone() }
    }
}

/// Options shared by [`evaluate`] calls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub n_samples: usize,
    pub decoding: DecodingParams,
    pub orientation: Orientation,
    pub threshold: f64,
    pub seed: u64,
    pub workers: usize,
}

/// Samples `opts.n_samples` continuations per prompt from `model`
/// (conditioned on `reward_token` if given) and reports every metric.
pub fn evaluate(
    label: impl Into<String>,
    model: &LanguageModel,
    reference: &LanguageModel,
    prompts: &[Vec<u32>],
    reward: &dyn RewardFn,
    reward_token: Option<u32>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.n_samples == 0 || prompts.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let gens = generate(model, prompts, reward_token, opts.n_samples, &opts.decoding, opts.seed, opts.workers)?;
    EvalReport::from_generations(label, reference, prompts, gens, reward, opts.orientation, opts.threshold)
}
