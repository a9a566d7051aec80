use crate::autodiff::{Graph, Tensor, Var};
use crate::datapool::Example;
use crate::model::{Bound, LanguageModel};
use crate::{Error, Result};

use super::config::KlMode;

/// One teacher-forced training element.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub prompt: &'a [u32],
    pub continuation: &'a [u32],
    pub reward_token: Option<u32>,
    /// Precomputed [`reference_rows`] for this prompt and continuation.
    pub reference: Option<&'a Tensor<f32>>,
}

impl<'a> TrainItem<'a> {
    pub fn new(prompt: &'a [u32], continuation: &'a [u32], reward_token: Option<u32>) -> Self {
        TrainItem { prompt, continuation, reward_token, reference: None }
    }

    pub fn with_reference(mut self, rows: &'a Tensor<f32>) -> Self {
        self.reference = Some(rows);
        self
    }

    pub fn from_sampled(&(e, token): &(&'a Example, u32)) -> Self {
        TrainItem::new(&e.prompt, &e.continuation, Some(token))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub kl_mode: KlMode,
    pub kl_coef: f64,
    pub unlikelihood_alpha: f64,
    pub per_token_average: bool,
}

impl LossTerms {
    /// Plain conditional NLL.
    pub fn nll_only() -> Self {
        LossTerms { kl_mode: KlMode::Off, kl_coef: 0.0, unlikelihood_alpha: 0.0, per_token_average: false }
    }
}

/// Batch means of the individual loss terms, before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossComponents {
    pub nll: f64,
    pub kl: f64,
    pub unlikelihood: f64,
    pub total: f64,
}

/// Negative candidates for each continuation position: distinct tokens of the
/// prompt and of `y_<i`, minus `y_i`, restricted to ids below `vocab`.
pub fn unlikelihood_candidates(prompt: &[u32], y: &[u32], vocab: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; vocab];
    let add = |t: u32, seen: &mut Vec<bool>| {
        if let Some(s) = seen.get_mut(t as usize) {
            *s = true;
        }
    };
    prompt.iter().for_each(|&t| add(t, &mut seen));
    let mut out = Vec::with_capacity(y.len());
    for (i, &target) in y.iter().enumerate() {
        if i > 0 {
            add(y[i - 1], &mut seen);
        }
        out.push((0..vocab).filter(|&c| seen[c] && c != target as usize).collect());
    }
    out
}

/// `−(1/|y|) Σ_i Σ_{c ∈ C^i} log(1 − p(c | ·))` on continuation logits `[|y| × V]`.
pub fn unlikelihood_term(g: &mut Graph<f32>, logits: Var, prompt: &[u32], y: &[u32]) -> Result<Var> {
    let vocab = g.value(logits).shape()[1];
    let cands = unlikelihood_candidates(prompt, y, vocab);
    Ok(g.unlikelihood(logits, &cands, y.len())?)
}

/// Reference logits for the rows predicting `y`, without gradient tracking.
pub fn reference_rows(reference: &LanguageModel, prompt: &[u32], y: &[u32]) -> Result<Tensor<f32>> {
    let (input, first) = LanguageModel::conditioned_input(None, prompt, y);
    let all = reference.forward_logits(&input)?;
    let v = all.shape()[1];
    let rows = all.data()[first * v..(first + y.len()) * v].to_vec();
    Ok(Tensor::new(vec![y.len(), v], rows)?)
}

fn targets(y: &[u32], vocab: usize) -> Result<Vec<usize>> {
    y.iter()
        .map(|&t| {
            if (t as usize) < vocab {
                Ok(t as usize)
            } else {
                Err(Error::TokenOutOfRange { id: t, vocab })
            }
        })
        .collect()
}

/// Builds the mean-over-batch objective
/// `−log p_θ(y|x,r_k) + β·Σ_t KL(p₀ ‖ p_θ) + α·UL(y)` on `g`.
///
/// NLL and KL run over continuation positions only. Empty continuations
/// contribute nothing but still count towards the batch size.
pub fn quark_loss(
    g: &mut Graph<f32>,
    policy: &LanguageModel,
    params: &Bound,
    reference: &LanguageModel,
    batch: &[TrainItem<'_>],
    terms: &LossTerms,
) -> Result<(Var, LossComponents)> {
    if batch.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let vocab = policy.config().base_vocab;
    let mut parts = Vec::with_capacity(batch.len());
    let mut comp = LossComponents::default();
    for item in batch {
        let y = item.continuation;
        if y.is_empty() {
            continue;
        }
        if item.prompt.is_empty() && item.reward_token.is_none() {
            return Err(Error::EmptyInput);
        }
        let tgt = targets(y, vocab)?;
        let (input, first) = LanguageModel::conditioned_input(item.reward_token, item.prompt, y);
        let all = policy.logits(g, params, &input)?;
        let rows = g.slice_rows(all, first, y.len())?;
        let norm = if terms.per_token_average { 1.0 / y.len() as f32 } else { 1.0 };

        // cross_entropy averages over rows; rescale to a sum (or keep the mean).
        let ce = g.cross_entropy(rows, &tgt)?;
        let nll = g.scale(ce, y.len() as f32 * norm);
        comp.nll += g.value(nll).item() as f64;
        let mut elem = vec![nll];

        // KL is reported even at β = 0 so sweeps can compare drift.
        if terms.kl_mode != KlMode::Off {
            let rows_p0 = match item.reference {
                Some(t) => t.clone(),
                None => reference_rows(reference, item.prompt, y)?,
            };
            let p0 = g.constant(rows_p0);
            let kl = match terms.kl_mode {
                KlMode::Exact => g.kl_rows(p0, rows)?,
                KlMode::Approximate => g.log_ratio_at(p0, rows, &tgt)?,
                KlMode::Off => unreachable!(),
            };
            let kl = g.scale(kl, norm);
            comp.kl += g.value(kl).item() as f64;
            if terms.kl_coef > 0.0 {
                elem.push(g.scale(kl, terms.kl_coef as f32));
            }
        }
        if terms.unlikelihood_alpha > 0.0 {
            let ul = unlikelihood_term(g, rows, item.prompt, y)?;
            comp.unlikelihood += g.value(ul).item() as f64;
            elem.push(g.scale(ul, terms.unlikelihood_alpha as f32));
        }
        parts.push(g.sum_scalars(&elem)?);
    }
    let b = batch.len() as f64;
    let total = if parts.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let s = g.sum_scalars(&parts)?;
        g.scale(s, (1.0 / b) as f32)
    };
    comp.nll /= b;
    comp.kl /= b;
    comp.unlikelihood /= b;
    comp.total = g.value(total).item() as f64;
    Ok((total, comp))
}

/// [`quark_loss`] with the point-wise log-ratio in place of the exact KL.
pub fn approx_kl_loss(
    g: &mut Graph<f32>,
    policy: &LanguageModel,
    params: &Bound,
    reference: &LanguageModel,
    batch: &[TrainItem<'_>],
    kl_coef: f64,
) -> Result<(Var, LossComponents)> {
    let terms = LossTerms { kl_mode: KlMode::Approximate, kl_coef, unlikelihood_alpha: 0.0, per_token_average: false };
    quark_loss(g, policy, params, reference, batch, &terms)
}
