//! `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::autodiff::AdamConfig;
use crate::model::{DecodingParams, ModelConfig};
use crate::training::{ExploreToken, KlMode, PretrainConfig, TrainConfig, TrainOn};
use crate::{Error, Result};

/// A value that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, bool, String);

impl ConfigValue for Option<PathBuf> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn render(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl ConfigValue for PathBuf {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("path must not be empty".into());
        }
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! enum_value {
    ($t:ty { $($name:literal => $v:expr),* $(,)? }) => {
        impl ConfigValue for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($v),)*
                    _ => Err(format!("expected one of: {}", [$($name),*].join(", "))),
                }
            }
            fn render(&self) -> String {
                $(if *self == $v { return $name.to_string(); })*
                unreachable!()
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    Word,
    Byte,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Banned,
    Sentiment,
    Diversity,
    Constant,
    Plugin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalDecoding {
    Nucleus,
    Greedy,
}

enum_value!(TokenizerKind { "word" => TokenizerKind::Word, "byte" => TokenizerKind::Byte });
enum_value!(RewardKind {
    "banned" => RewardKind::Banned,
    "sentiment" => RewardKind::Sentiment,
    "diversity" => RewardKind::Diversity,
    "constant" => RewardKind::Constant,
    "plugin" => RewardKind::Plugin,
});
enum_value!(EvalDecoding { "nucleus" => EvalDecoding::Nucleus, "greedy" => EvalDecoding::Greedy });
enum_value!(KlMode { "exact" => KlMode::Exact, "approximate" => KlMode::Approximate, "off" => KlMode::Off });
enum_value!(TrainOn { "all-quantiles" => TrainOn::AllQuantiles, "best-only" => TrainOn::BestOnly });
enum_value!(ExploreToken { "best" => ExploreToken::Best, "random" => ExploreToken::Random });
enum_value!(crate::metrics::Orientation {
    "reward" => crate::metrics::Orientation::Reward,
    "badness" => crate::metrics::Orientation::Badness,
});

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $t:ty = $default:expr;)*) => {
        /// Every setting of a run. Keys match field names.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $t,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets `key` from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$t as ConfigValue>::parse(value)
                            .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// `(key, rendered value)` for every setting, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.render())),*]
            }
        }
    };
}

run_config! {
    /// Pretraining corpus, one document per line.
    corpus: Option<PathBuf> = None;
    /// Training prompts, one per line.
    prompts: Option<PathBuf> = None;
    /// Evaluation prompts; falls back to `prompts`.
    eval_prompts: Option<PathBuf> = None;
    positive_lexicon: Option<PathBuf> = None;
    /// Negative sentiment terms, or banned terms.
    negative_lexicon: Option<PathBuf> = None;
    /// Reference model; defaults to `<out_dir>/p0.ckpt`.
    p0_checkpoint: Option<PathBuf> = None;
    out_dir: PathBuf = PathBuf::from("run");
    tokenizer: TokenizerKind = TokenizerKind::Word;
    reward: RewardKind = RewardKind::Banned;
    constant_reward: f64 = 1.0;
    /// Whitespace-separated command line of an external reward process.
    plugin_command: String = String::new();
    plugin_timeout_ms: u64 = 10_000;

    d_model: usize = 32;
    n_layers: usize = 2;
    n_heads: usize = 2;
    context_length: usize = 32;
    tied: bool = true;

    pretrain_steps: usize = 1500;
    pretrain_batch_size: usize = 16;
    /// 0 uses the full context length.
    pretrain_window: usize = 0;
    pretrain_lr: f64 = 3e-3;
    pretrain_warmup: usize = 100;

    quantiles: usize = 5;
    kl_coef: f64 = 0.05;
    iterations: usize = 16;
    total_steps: usize = 8000;
    batch_size: usize = 128;
    samples_per_prompt: usize = 1;
    top_p: f64 = 0.9;
    temperature: f64 = 1.0;
    max_new_tokens: usize = 20;
    min_new_tokens: usize = 0;
    stop_at_eos: bool = false;
    greedy_fraction: f64 = 0.0;
    kl_mode: KlMode = KlMode::Exact;
    unlikelihood_alpha: f64 = 0.0;
    train_on: TrainOn = TrainOn::AllQuantiles;
    explore_token: ExploreToken = ExploreToken::Best;
    per_token_average: bool = false;
    reset_pool: bool = false;
    /// 0 keeps every example.
    pool_capacity: usize = 0;
    lr: f64 = 1e-5;
    warmup_steps: usize = 800;
    adam_beta1: f64 = 0.9;
    adam_beta2: f64 = 0.999;
    adam_eps: f64 = 1e-8;
    /// 0 disables clipping.
    clip_norm: f64 = 1.0;
    /// Samples per prompt for the per-iteration reward snapshot.
    iteration_eval_samples: usize = 0;

    eval_samples: usize = 25;
    eval_decoding: EvalDecoding = EvalDecoding::Nucleus;
    eval_top_p: f64 = 0.9;
    orientation: crate::metrics::Orientation = crate::metrics::Orientation::Reward;
    violation_threshold: f64 = 0.5;

    seed: u64 = 0;
    workers: usize = 1;
}

const PATH_KEYS: &[&str] =
    &["corpus", "prompts", "eval_prompts", "positive_lexicon", "negative_lexicon", "p0_checkpoint", "out_dir"];

impl RunConfig {
    /// Applies `key = value` lines. Relative paths are resolved against `base`.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let value = match base {
                Some(b) if PATH_KEYS.contains(&key) && !value.is_empty() && Path::new(value).is_relative() => {
                    b.join(value).display().to_string()
                }
                _ => value.to_string(),
            };
            self.set(key, &value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path.parent())?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Fully resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn model_config(&self, base_vocab: usize) -> ModelConfig {
        ModelConfig {
            base_vocab,
            n_reward_tokens: 0,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            context_length: self.context_length,
            tied: self.tied,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch_size,
            window: (self.pretrain_window > 0).then_some(self.pretrain_window),
            lr: self.pretrain_lr,
            warmup_steps: self.pretrain_warmup,
            adam: self.adam(),
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed: self.seed,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn explore_decoding(&self, eos: u32) -> DecodingParams {
        let mut d = DecodingParams::nucleus(self.top_p, self.max_new_tokens);
        d.temperature = self.temperature;
        d.min_new_tokens = self.min_new_tokens;
        if self.stop_at_eos {
            d = d.with_stop(eos);
        }
        d
    }

    pub fn eval_decoding(&self, eos: u32) -> DecodingParams {
        let mut d = match self.eval_decoding {
            EvalDecoding::Nucleus => DecodingParams::nucleus(self.eval_top_p, self.max_new_tokens),
            EvalDecoding::Greedy => DecodingParams::greedy(self.max_new_tokens),
        };
        d.temperature = self.temperature;
        d.min_new_tokens = self.min_new_tokens;
        if self.stop_at_eos {
            d = d.with_stop(eos);
        }
        d
    }

    pub fn train_config(&self, eos: u32) -> TrainConfig {
        TrainConfig {
            n_quantiles: self.quantiles,
            kl_coef: self.kl_coef,
            iterations: self.iterations,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            samples_per_prompt: self.samples_per_prompt,
            explore_decoding: self.explore_decoding(eos),
            greedy_fraction: self.greedy_fraction,
            kl_mode: self.kl_mode,
            unlikelihood_alpha: self.unlikelihood_alpha,
            train_on: self.train_on,
            explore_token: self.explore_token,
            per_token_average: self.per_token_average,
            reset_pool_each_iteration: self.reset_pool,
            pool_capacity: (self.pool_capacity > 0).then_some(self.pool_capacity),
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            adam: self.adam(),
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed: self.seed,
            workers: self.workers,
            eval_samples: self.iteration_eval_samples,
        }
    }

    pub fn plugin_timeout(&self) -> Duration {
        Duration::from_millis(self.plugin_timeout_ms)
    }

    pub fn p0_path(&self) -> PathBuf {
        self.p0_checkpoint.clone().unwrap_or_else(|| self.out_dir.join("p0.ckpt"))
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref().ok_or_else(|| Error::Config(format!("`{key}` must be set")))
    }
}
