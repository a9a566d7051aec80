use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Tokens produced by the tokenizer.
    pub base_vocab: usize,
    /// Reward tokens appended after the base vocabulary (0 before extension).
    pub n_reward_tokens: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    /// Output projection shares the token embedding table.
    pub tied: bool,
}

impl ModelConfig {
    pub fn vocab_size(&self) -> usize {
        self.base_vocab + self.n_reward_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ModelConfig(m));
        if self.base_vocab == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return fail(format!("sizes must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.context_length < 2 {
            return fail(format!("context_length {} < 2", self.context_length));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingMode {
    Greedy,
    Nucleus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub mode: DecodingMode,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Generation ends after this token is emitted (it is kept in the output).
    pub stop_token: Option<u32>,
    /// The stop token is suppressed until this many tokens exist.
    pub min_new_tokens: usize,
}

impl DecodingParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodingParams {
            mode: DecodingMode::Greedy,
            top_p: 1.0,
            temperature: 1.0,
            max_new_tokens,
            stop_token: None,
            min_new_tokens: 0,
        }
    }

    pub fn nucleus(top_p: f64, max_new_tokens: usize) -> Self {
        DecodingParams {
            mode: DecodingMode::Nucleus,
            top_p,
            ..Self::greedy(max_new_tokens)
        }
    }

    pub fn with_stop(mut self, stop: u32) -> Self {
        self.stop_token = Some(stop);
        self
    }

    pub fn with_mode(mut self, mode: DecodingMode) -> Self {
        self.mode = mode;
        self
    }

    // Negated comparisons so that NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::TrainConfig(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::TrainConfig(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}
