use rand::RngExt;
use rayon::prelude::*;

use crate::datapool::DataPool;
use crate::model::{DecodingMode, DecodingParams, LanguageModel};
use crate::rewards::RewardFn;
use crate::rng::{role, stream};
use crate::{Error, Result};

use super::config::{ExploreToken, TrainConfig};

/// A scored sample together with how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Explored {
    pub prompt: Vec<u32>,
    pub continuation: Vec<u32>,
    pub reward: f64,
    pub reward_token: Option<u32>,
    pub greedy: bool,
}

/// Prompt index, continuation, reward token and decoding mode of one sample.
type Item = (usize, Vec<u32>, Option<u32>, DecodingParams);

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::TrainConfig(format!("cannot start {workers} workers: {e}")))
}

/// Samples `per_prompt` continuations for every prompt. Item `j = prompt · per_prompt + s`
/// uses its own RNG stream keyed by `key ++ [prompt, s]`, so results do not
/// depend on `workers`. `plan(j, rng)` picks the reward token and decoding mode.
fn sample_items<P>(
    model: &LanguageModel,
    prompts: &[Vec<u32>],
    per_prompt: usize,
    seed: u64,
    key: &[u64],
    workers: usize,
    plan: P,
) -> Result<Vec<Item>>
where
    P: Fn(usize, &mut crate::rng::StreamRng) -> (Option<u32>, DecodingParams) + Sync,
{
    let pool = thread_pool(workers)?;
    pool.install(|| {
        (0..prompts.len() * per_prompt)
            .into_par_iter()
            .map(|j| {
                let (p, s) = (j / per_prompt, j % per_prompt);
                let parts: Vec<u64> = key.iter().copied().chain([p as u64, s as u64]).collect();
                let mut rng = stream(seed, &parts);
                let (token, decoding) = plan(j, &mut rng);
                let y = model.sample(&prompts[p], token, &decoding, &mut rng)?;
                Ok((p, y, token, decoding))
            })
            .collect()
    })
}

fn score(
    reward: &dyn RewardFn,
    prompts: &[Vec<u32>],
    items: Vec<Item>,
) -> Result<Vec<Explored>> {
    let pairs: Vec<(&[u32], &[u32])> = items.iter().map(|(p, y, _, _)| (&prompts[*p][..], &y[..])).collect();
    let rewards = reward.score_batch(&pairs)?;
    Ok(items
        .into_iter()
        .zip(rewards)
        .map(|((p, y, token, d), r)| Explored {
            prompt: prompts[p].clone(),
            continuation: y,
            reward: r,
            reward_token: token,
            greedy: d.mode == DecodingMode::Greedy,
        })
        .collect())
}

fn decoding_for(cfg: &TrainConfig, j: usize) -> DecodingParams {
    if cfg.is_greedy_item(j) {
        cfg.explore_decoding.with_mode(DecodingMode::Greedy)
    } else {
        cfg.explore_decoding
    }
}

/// Scored samples from the unconditioned reference model, as the bootstrap pool.
pub fn init_samples(
    reference: &LanguageModel,
    prompts: &[Vec<u32>],
    reward: &dyn RewardFn,
    cfg: &TrainConfig,
) -> Result<Vec<Explored>> {
    if prompts.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let items = sample_items(reference, prompts, cfg.samples_per_prompt, cfg.seed, &[role::INIT], cfg.workers, |j, _| {
        (None, decoding_for(cfg, j))
    })?;
    score(reward, prompts, items)
}

/// Unquantized pool of scored reference-model samples.
pub fn init_pool(
    reference: &LanguageModel,
    prompts: &[Vec<u32>],
    reward: &dyn RewardFn,
    cfg: &TrainConfig,
) -> Result<DataPool> {
    let mut pool = match cfg.pool_capacity {
        Some(c) => DataPool::with_capacity_limit(c),
        None => DataPool::new(),
    };
    pool.add(init_samples(reference, prompts, reward, cfg)?.into_iter().map(|e| (e.prompt, e.continuation, e.reward)))?;
    Ok(pool)
}

/// Scored samples from the policy conditioned on `r_K` (or a uniformly drawn `r_k`).
pub fn explore(
    policy: &LanguageModel,
    prompts: &[Vec<u32>],
    reward: &dyn RewardFn,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<Vec<Explored>> {
    let k = policy.config().n_reward_tokens;
    if k == 0 {
        return Err(Error::NoRewardTokens);
    }
    if prompts.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let key = [role::EXPLORE, iteration as u64];
    let items = sample_items(policy, prompts, cfg.samples_per_prompt, cfg.seed, &key, cfg.workers, |j, rng| {
        let q = match cfg.explore_token {
            ExploreToken::Best => k,
            ExploreToken::Random => rng.random_range(1..=k),
        };
        (policy.reward_token(q), decoding_for(cfg, j))
    })?;
    score(reward, prompts, items)
}

/// `n` continuations per prompt, grouped by prompt.
pub fn generate(
    model: &LanguageModel,
    prompts: &[Vec<u32>],
    reward_token: Option<u32>,
    n: usize,
    decoding: &DecodingParams,
    seed: u64,
    workers: usize,
) -> Result<Vec<Vec<Vec<u32>>>> {
    if n == 0 {
        return Ok(vec![Vec::new(); prompts.len()]);
    }
    // Every reward token shares the same streams, so comparisons across tokens
    // see the same random draws.
    let key = [role::EVAL];
    let items = sample_items(model, prompts, n, seed, &key, workers, |_, _| (reward_token, *decoding))?;
    let mut out = vec![Vec::with_capacity(n); prompts.len()];
    for (p, y, _, _) in items {
        out[p].push(y);
    }
    Ok(out)
}

/// Mean reward of `n` samples per prompt that were generated with `reward_token`.
#[allow(clippy::too_many_arguments)]
pub fn mean_reward(
    model: &LanguageModel,
    prompts: &[Vec<u32>],
    reward: &dyn RewardFn,
    reward_token: Option<u32>,
    n: usize,
    decoding: &DecodingParams,
    seed: u64,
    workers: usize,
) -> Result<f64> {
    let gens = generate(model, prompts, reward_token, n, decoding, seed, workers)?;
    let pairs: Vec<(&[u32], &[u32])> = prompts
        .iter()
        .zip(&gens)
        .flat_map(|(x, ys)| ys.iter().map(move |y| (&x[..], &y[..])))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let rewards = reward.score_batch(&pairs)?;
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// Mean reward when conditioning on each `r_k`, `k = 1..=K`.
pub fn evaluate_per_quantile(
    policy: &LanguageModel,
    prompts: &[Vec<u32>],
    reward: &dyn RewardFn,
    n_samples: usize,
    decoding: &DecodingParams,
    seed: u64,
    workers: usize,
) -> Result<Vec<f64>> {
    let k = policy.config().n_reward_tokens;
    if k == 0 {
        return Err(Error::NoRewardTokens);
    }
    (1..=k)
        .map(|q| mean_reward(policy, prompts, reward, policy.reward_token(q), n_samples, decoding, seed, workers))
        .collect()
}
