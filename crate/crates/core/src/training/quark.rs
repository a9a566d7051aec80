use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Adam, LinearWarmup, Tensor};
use crate::datapool::{DataPool, QuantileStats};
use crate::model::{Checkpoint, LanguageModel, Tokenizer};
use crate::rewards::RewardFn;
use crate::rng::{role, stream};
use crate::{Error, Result};

use super::config::{KlMode, TrainConfig, TrainOn};
use super::explore::{explore, init_samples, mean_reward};
use super::loss::{quark_loss, reference_rows, LossComponents, LossTerms, TrainItem};
use super::pretrain::optimizer_step;

/// Summary of one explore / quantize / learn round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Gradient steps taken so far, across all rounds.
    pub global_step: u64,
    pub pool_size: usize,
    pub new_examples: usize,
    pub explore_mean_reward: f64,
    pub quantiles: Vec<QuantileStats>,
    /// Loss components averaged over this round's steps.
    pub loss: LossComponents,
    pub last_lr: f64,
    /// Mean reward conditioned on `r_K` after learning, if enabled.
    pub eval_best_reward: Option<f64>,
}

/// Quark training state: the trainable policy, its optimizer, and the pool.
pub struct Quark<'a> {
    cfg: TrainConfig,
    reference: &'a LanguageModel,
    prompts: &'a [Vec<u32>],
    reward: &'a dyn RewardFn,
    policy: LanguageModel,
    adam: Adam<f32>,
    pool: DataPool,
    completed: usize,
    global_step: u64,
    /// Reference logits per pool example, keyed by insertion index. The
    /// reference is frozen, so entries never go stale.
    reference_cache: HashMap<u64, Tensor<f32>>,
}

const ADAM_M: &str = "state.adam.m.";
const ADAM_V: &str = "state.adam.v.";

impl<'a> Quark<'a> {
    /// Copies `reference` into a fresh policy with `K` reward tokens.
    pub fn new(
        reference: &'a LanguageModel,
        prompts: &'a [Vec<u32>],
        reward: &'a dyn RewardFn,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if prompts.is_empty() {
            return Err(Error::EmptySampleSet);
        }
        if reference.config().n_reward_tokens != 0 {
            return Err(Error::VocabAlreadyExtended);
        }
        let mut policy = reference.clone();
        policy.extend_vocab(cfg.n_quantiles, &mut stream(cfg.seed, &[role::EXTEND]))?;
        policy.set_requires_grad(true);
        let adam = Adam::new(cfg.adam, policy.params());
        let pool = match cfg.pool_capacity {
            Some(c) => DataPool::with_capacity_limit(c),
            None => DataPool::new(),
        };
        Ok(Quark {
            cfg,
            reference,
            prompts,
            reward,
            policy,
            adam,
            pool,
            completed: 0,
            global_step: 0,
            reference_cache: HashMap::new(),
        })
    }

    /// Restores state saved by [`checkpoint`](Self::checkpoint) plus the matching pool dump.
    pub fn resume(
        reference: &'a LanguageModel,
        prompts: &'a [Vec<u32>],
        reward: &'a dyn RewardFn,
        cfg: TrainConfig,
        checkpoint: &Checkpoint,
        mut pool: DataPool,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut policy = checkpoint.model()?;
        let (pc, rc) = (policy.config(), reference.config());
        if pc.n_reward_tokens != cfg.n_quantiles || pc.base_vocab != rc.base_vocab || pc.d_model != rc.d_model {
            return Err(Error::Checkpoint(format!(
                "checkpoint model {pc:?} does not match reference {rc:?} with K = {}",
                cfg.n_quantiles
            )));
        }
        policy.set_requires_grad(true);
        let meta = &checkpoint.header.meta;
        let field = |k: &str| {
            meta.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("missing training state field {k}")))
        };
        let completed = field("iterations_completed")? as usize;
        let global_step = field("global_step")?;
        let adam_step = field("adam_step")?;
        let moments = |prefix: &str| -> Result<Vec<Vec<f32>>> {
            policy
                .names()
                .iter()
                .map(|n| {
                    checkpoint
                        .record(&format!("{prefix}{n}"))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {n}")))
                })
                .collect()
        };
        let adam = Adam::from_state(cfg.adam, adam_step, moments(ADAM_M)?, moments(ADAM_V)?);
        pool.set_capacity(cfg.pool_capacity);
        Ok(Quark {
            cfg,
            reference,
            prompts,
            reward,
            policy,
            adam,
            pool,
            completed,
            global_step,
            reference_cache: HashMap::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &LanguageModel {
        &self.policy
    }

    pub fn into_policy(self) -> LanguageModel {
        self.policy
    }

    pub fn pool(&self) -> &DataPool {
        &self.pool
    }

    pub fn iterations_completed(&self) -> usize {
        self.completed
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn is_finished(&self) -> bool {
        self.completed >= self.cfg.iterations
    }

    fn schedule(&self) -> LinearWarmup {
        LinearWarmup { peak: self.cfg.lr, warmup: self.cfg.warmup_steps as u64, total: self.cfg.total_steps as u64 + 1 }
    }

    /// Runs the next round: bootstrap sampling from the reference (round 0) or
    /// exploration with the policy, then quantization and `M` gradient steps.
    pub fn run_iteration(&mut self) -> Result<IterationReport> {
        let cfg = &self.cfg;
        let iteration = self.completed;
        let samples = if iteration == 0 {
            init_samples(self.reference, self.prompts, self.reward, cfg)?
        } else {
            if cfg.reset_pool_each_iteration {
                self.pool.clear();
                self.reference_cache.clear();
            }
            explore(&self.policy, self.prompts, self.reward, cfg, iteration)?
        };
        let new_examples = samples.len();
        let explore_mean_reward = samples.iter().map(|e| e.reward).sum::<f64>() / new_examples.max(1) as f64;
        self.pool.add(samples.into_iter().map(|e| (e.prompt, e.continuation, e.reward)))?;
        self.pool.quantize(cfg.n_quantiles)?;

        let k = cfg.n_quantiles;
        let best = [k];
        let token_base = self.policy.reward_token(1).ok_or(Error::NoRewardTokens)?;
        let terms = LossTerms {
            kl_mode: cfg.kl_mode,
            kl_coef: cfg.kl_coef,
            unlikelihood_alpha: cfg.unlikelihood_alpha,
            per_token_average: cfg.per_token_average,
        };
        let schedule = self.schedule();
        let steps = cfg.steps_per_iteration();
        let mut sum = LossComponents::default();
        let mut last_lr = 0.0;
        for s in 0..steps {
            let mut rng = stream(cfg.seed, &[role::LEARN, iteration as u64, s as u64]);
            let sampled = match cfg.train_on {
                TrainOn::AllQuantiles => self.pool.sample_batch(cfg.batch_size, token_base, &mut rng)?,
                TrainOn::BestOnly => self.pool.sample_batch_from(cfg.batch_size, &best, token_base, &mut rng)?,
            };
            let use_reference = cfg.kl_mode != KlMode::Off;
            if use_reference {
                for (e, _) in &sampled {
                    if !self.reference_cache.contains_key(&e.insertion_index) {
                        let rows = reference_rows(self.reference, &e.prompt, &e.continuation)?;
                        self.reference_cache.insert(e.insertion_index, rows);
                    }
                }
            }
            let cache = &self.reference_cache;
            let batch: Vec<TrainItem> = sampled
                .iter()
                .map(|s| {
                    let item = TrainItem::from_sampled(s);
                    match cache.get(&s.0.insertion_index) {
                        Some(rows) if use_reference => item.with_reference(rows),
                        _ => item,
                    }
                })
                .collect();
            self.global_step += 1;
            last_lr = schedule.lr(self.global_step);
            let reference = self.reference;
            let comp = optimizer_step(&mut self.policy, &mut self.adam, last_lr, cfg.clip_norm, |m, g, p| {
                quark_loss(g, m, p, reference, &batch, &terms)
            })?;
            sum.nll += comp.nll;
            sum.kl += comp.kl;
            sum.unlikelihood += comp.unlikelihood;
            sum.total += comp.total;
        }
        let n = steps.max(1) as f64;
        let loss = LossComponents {
            nll: sum.nll / n,
            kl: sum.kl / n,
            unlikelihood: sum.unlikelihood / n,
            total: sum.total / n,
        };
        let eval_best_reward = if cfg.eval_samples > 0 {
            Some(mean_reward(
                &self.policy,
                self.prompts,
                self.reward,
                self.policy.reward_token(k),
                cfg.eval_samples,
                &cfg.explore_decoding,
                cfg.seed ^ iteration as u64,
                cfg.workers,
            )?)
        } else {
            None
        };
        self.completed += 1;
        Ok(IterationReport {
            iteration,
            global_step: self.global_step,
            pool_size: self.pool.len(),
            new_examples,
            explore_mean_reward,
            quantiles: self.pool.stats()?,
            loss,
            last_lr,
            eval_best_reward,
        })
    }

    /// Runs the remaining rounds, calling `after` once per completed round.
    pub fn run(
        &mut self,
        mut after: impl FnMut(&Self, &IterationReport) -> Result<()>,
    ) -> Result<Vec<IterationReport>> {
        let mut reports = Vec::new();
        while !self.is_finished() {
            let report = self.run_iteration()?;
            after(self, &report)?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// Policy parameters, optimizer moments and loop counters.
    pub fn checkpoint(&self, tokenizer: &Tokenizer) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.policy, tokenizer);
        ck.header.quantile_boundaries = self.pool.boundaries().unwrap_or_default();
        ck.header.meta = json!({
            "iterations_completed": self.completed,
            "global_step": self.global_step,
            "adam_step": self.adam.step_count(),
            "train_config": self.cfg,
        });
        let (m, v) = self.adam.moments();
        for (prefix, moments) in [(ADAM_M, m), (ADAM_V, v)] {
            for ((name, p), data) in self.policy.named_params().zip(moments) {
                let t = Tensor::new(p.shape().to_vec(), data.clone()).expect("moment matches parameter shape");
                ck.records.push((format!("{prefix}{name}"), t));
            }
        }
        ck
    }
}

/// Runs all rounds in memory and returns the trained policy with its reports.
pub fn quark_train(
    reference: &LanguageModel,
    prompts: &[Vec<u32>],
    reward: &dyn RewardFn,
    cfg: TrainConfig,
) -> Result<(LanguageModel, Vec<IterationReport>)> {
    let mut q = Quark::new(reference, prompts, reward, cfg)?;
    let reports = q.run(|_, _| Ok(()))?;
    Ok((q.into_policy(), reports))
}

/// On-disk layout of a training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const REPORTS: &'static str = "reports.jsonl";

    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::file(&root, e))?;
        Ok(RunDir { root })
    }

    pub fn checkpoint_path(&self, iteration: usize) -> PathBuf {
        self.root.join(format!("iter-{iteration}.ckpt"))
    }

    pub fn pool_path(&self, iteration: usize) -> PathBuf {
        self.root.join(format!("iter-{iteration}.pool.jsonl"))
    }

    pub fn reports_path(&self) -> PathBuf {
        self.root.join(Self::REPORTS)
    }

    /// Writes `iter-<n>.ckpt`, the pool dump, and appends the report line.
    pub fn save_iteration(&self, q: &Quark<'_>, tokenizer: &Tokenizer, report: &IterationReport) -> Result<()> {
        self.save_state(q, tokenizer, &self.checkpoint_path(report.iteration), &self.pool_path(report.iteration))?;
        let path = self.reports_path();
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::file(&path, e))?;
        let mut line = serde_json::to_vec(report)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::file(&path, e))
    }

    /// Flushes current state, e.g. after a failed round.
    pub fn save_state(&self, q: &Quark<'_>, tokenizer: &Tokenizer, ckpt: &Path, pool: &Path) -> Result<()> {
        q.checkpoint(tokenizer).save(ckpt)?;
        let f = fs::File::create(pool).map_err(|e| Error::file(pool, e))?;
        let mut w = BufWriter::new(f);
        q.pool().dump(&mut w)?;
        w.flush().map_err(|e| Error::file(pool, e))
    }

    pub fn load_pool(path: &Path) -> Result<DataPool> {
        let f = fs::File::open(path).map_err(|e| Error::file(path, e))?;
        DataPool::load(BufReader::new(f))
    }

    pub fn read_reports(path: &Path) -> Result<Vec<IterationReport>> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse { what: "report", line: i + 1, detail: e.to_string() })
            })
            .collect()
    }
}
