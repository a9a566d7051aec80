use rand::{Rng, RngExt};

use super::{DecodingMode, DecodingParams, LanguageModel};
use crate::Result;

/// Smallest prefix of the probability-sorted support whose mass reaches `top_p`,
/// renormalized. Ties keep the lower token id first.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    kept.iter_mut().for_each(|(_, p)| *p /= mass);
    kept
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn probabilities(logits: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&z| z as f64 / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Draws one token from `logits` under `params`.
pub fn choose_token<R: Rng + ?Sized>(logits: &[f32], params: &DecodingParams, rng: &mut R) -> usize {
    match params.mode {
        DecodingMode::Greedy => argmax(logits),
        DecodingMode::Nucleus => {
            let kept = nucleus_filter(&probabilities(logits, params.temperature), params.top_p);
            let u: f64 = rng.random();
            let mut cum = 0.0;
            for &(i, p) in &kept {
                cum += p;
                if u < cum {
                    return i;
                }
            }
            kept.last().map(|&(i, _)| i).unwrap_or(0)
        }
    }
}

impl LanguageModel {
    /// Autoregressive continuation of `x`, optionally conditioned on a prepended reward token.
    ///
    /// Stops after `max_new_tokens`, after emitting the stop token, or when the
    /// context window is full.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        x: &[u32],
        reward_token: Option<u32>,
        params: &DecodingParams,
        rng: &mut R,
    ) -> Result<Vec<u32>> {
        let mut context: Vec<u32> = reward_token.into_iter().chain(x.iter().copied()).collect();
        let mut out = Vec::with_capacity(params.max_new_tokens);
        while out.len() < params.max_new_tokens && context.len() < self.config().context_length {
            let mut logits = self.next_logits(&context)?;
            if let Some(stop) = params.stop_token {
                if out.len() < params.min_new_tokens {
                    if let Some(z) = logits.get_mut(stop as usize) {
                        *z = f32::NEG_INFINITY;
                    }
                }
            }
            let token = choose_token(&logits, params, rng) as u32;
            out.push(token);
            context.push(token);
            if params.stop_token == Some(token) {
                break;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn nucleus_keeps_smallest_prefix() {
        let kept = nucleus_filter(&[0.5, 0.3, 0.15, 0.05], 0.8);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].0, 0);
        assert_eq!(kept[1].0, 1);
        assert!((kept[0].1 - 0.625).abs() < 1e-12);
        assert!((kept[1].1 - 0.375).abs() < 1e-12);
        assert_eq!(nucleus_filter(&[0.2, 0.8], 1.0).len(), 2);
    }

    #[test]
    fn tiny_top_p_is_greedy() {
        let logits = [0.1f32, 2.0, 2.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let greedy = DecodingParams::greedy(1);
        let nucleus = DecodingParams::nucleus(1e-9, 1);
        for _ in 0..20 {
            assert_eq!(choose_token(&logits, &nucleus, &mut rng), choose_token(&logits, &greedy, &mut rng));
        }
        assert_eq!(argmax(&logits), 1);
    }
}
