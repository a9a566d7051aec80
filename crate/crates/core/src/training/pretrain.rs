use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, Adam, AdamConfig, Graph, LinearWarmup};
use crate::model::LanguageModel;
use crate::rng::{role, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Input window length; defaults to the model context.
    pub window: Option<usize>,
    pub lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            window: None,
            lr: 3e-3,
            warmup_steps: 100,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

/// Clears gradients, runs `build` to get a scalar loss on a fresh graph,
/// backpropagates into `model`, clips, and applies one Adam update.
pub(crate) fn optimizer_step<T>(
    model: &mut LanguageModel,
    adam: &mut Adam<f32>,
    lr: f64,
    clip: Option<f64>,
    build: impl FnOnce(&LanguageModel, &mut Graph<f32>, &crate::model::Bound) -> Result<(crate::autodiff::Var, T)>,
) -> Result<T> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let (loss, out) = build(model, &mut g, &bound)?;
    g.backward(loss)?;
    model.set_requires_grad(true);
    model.zero_grad();
    model.accumulate_grads(&g, &bound);
    if let Some(c) = clip {
        clip_grad_norm(model.params_mut().iter_mut(), c);
    }
    adam.step(model.params_mut().iter_mut(), lr);
    Ok(out)
}

/// Maximum-likelihood training on random windows of `corpus`. Returns the
/// mean per-token loss of every step.
pub fn pretrain_mle(model: &mut LanguageModel, corpus: &[u32], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    let window = cfg.window.unwrap_or(model.config().context_length);
    if window == 0 || window > model.config().context_length {
        return Err(Error::TrainConfig(format!(
            "window {window} must be in 1..={}",
            model.config().context_length
        )));
    }
    if corpus.len() < window + 1 {
        return Err(Error::CorpusTooShort { len: corpus.len(), window: window + 1 });
    }
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if cfg.batch_size == 0 {
        return Err(Error::TrainConfig("batch_size must be positive".into()));
    }
    let schedule = LinearWarmup { peak: cfg.lr, warmup: cfg.warmup_steps as u64, total: cfg.steps as u64 + 1 };
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut rng = stream(cfg.seed, &[role::PRETRAIN]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let starts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..=corpus.len() - window - 1)).collect();
        let loss = optimizer_step(model, &mut adam, schedule.lr(step as u64), cfg.clip_norm, |m, g, p| {
            let mut parts = Vec::with_capacity(starts.len());
            for &s in &starts {
                let logits = m.logits(g, p, &corpus[s..s + window])?;
                let targets: Vec<usize> = corpus[s + 1..=s + window].iter().map(|&t| t as usize).collect();
                parts.push(g.cross_entropy(logits, &targets)?);
            }
            let sum = g.sum_scalars(&parts)?;
            let loss = g.scale(sum, 1.0 / parts.len() as f32);
            Ok((loss, g.value(loss).item() as f64))
        })?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean per-token loss of `model` on every full window of `corpus` (stride `window`).
pub fn corpus_loss(model: &LanguageModel, corpus: &[u32], window: usize) -> Result<f64> {
    if window == 0 || corpus.len() < window + 1 {
        return Err(Error::CorpusTooShort { len: corpus.len(), window: window + 1 });
    }
    let v = model.config().base_vocab;
    let (mut total, mut count) = (0.0, 0usize);
    let mut s = 0;
    while s + window < corpus.len() {
        let logits = model.forward_logits(&corpus[s..s + window])?;
        for (row, &t) in logits.data().chunks(v).zip(&corpus[s + 1..=s + window]) {
            let mut lp: Vec<f64> = row.iter().map(|&z| z as f64).collect();
            crate::autodiff::log_softmax_in_place(&mut lp);
            total -= lp[t as usize];
            count += 1;
        }
        s += window;
    }
    Ok(total / count as f64)
}
