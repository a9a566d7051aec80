use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::autodiff::{log_softmax_in_place, Graph, Tensor, Var};
use crate::{Error, Result};

const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;
/// Noise added to the mean embedding when creating reward-token rows.
const REWARD_ROW_NOISE: f32 = 0.01;

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const PER_LAYER: usize = 12;
const FIRST_LAYER: usize = 2;

// Offsets inside one transformer block.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const W_QKV: usize = 2;
const B_QKV: usize = 3;
const W_O: usize = 4;
const B_O: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W_FC: usize = 8;
const B_FC: usize = 9;
const W_PROJ: usize = 10;
const B_PROJ: usize = 11;

/// Decoder-only causal transformer with learned absolute positions.
///
/// Logits always cover the base vocabulary only: reward tokens are inputs,
/// never predictions, so a model with reward tokens and its reference share
/// the same output support.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

/// Model parameters placed on a [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut layout = vec![
        ("tok_emb".to_owned(), vec![config.vocab_size(), d]),
        ("pos_emb".to_owned(), vec![config.context_length, d]),
    ];
    for l in 0..config.n_layers {
        let p = |n: &str| format!("h{l}.{n}");
        layout.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.w_qkv"), vec![d, 3 * d]),
            (p("attn.b_qkv"), vec![3 * d]),
            (p("attn.w_o"), vec![d, d]),
            (p("attn.b_o"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w_fc"), vec![d, 4 * d]),
            (p("mlp.b_fc"), vec![4 * d]),
            (p("mlp.w_proj"), vec![4 * d, d]),
            (p("mlp.b_proj"), vec![d]),
        ]);
    }
    layout.push(("ln_f.g".to_owned(), vec![d]));
    layout.push(("ln_f.b".to_owned(), vec![d]));
    if !config.tied {
        layout.push(("head".to_owned(), vec![config.base_vocab, d]));
    }
    layout
}

impl LanguageModel {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual projections
    /// scaled by 1/√(2·layers), zero biases, unit layer-norm gains.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let resid_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let (names, params) = param_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = if name.ends_with(".g") {
                    vec![1.0; n]
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let scale = if name.ends_with("w_o") || name.ends_with("w_proj") { resid_scale } else { 1.0 };
                    (0..n).map(|_| normal.sample(rng) * scale).collect()
                };
                (name, Tensor::new(shape, data).expect("layout shapes are consistent"))
            })
            .unzip();
        Ok(LanguageModel { config, names, params })
    }

    /// Builds a model from named tensors, checking them against the layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != named.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", layout.len(), named.len())));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in layout.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t.with_grad(false));
        }
        Ok(LanguageModel { config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Allocates (or drops) gradient accumulators on every parameter.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.params.iter_mut().for_each(|p| p.set_requires_grad(on));
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Id of reward token `r_k`, `k` in `1..=K`.
    pub fn reward_token(&self, k: usize) -> Option<u32> {
        (1..=self.config.n_reward_tokens)
            .contains(&k)
            .then(|| (self.config.base_vocab + k - 1) as u32)
    }

    /// Appends `k` reward-token rows to the embedding table, each the mean of
    /// the existing rows plus N(0, 0.01²) noise. Existing rows are untouched.
    pub fn extend_vocab<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Result<()> {
        if self.config.n_reward_tokens > 0 {
            return Err(Error::VocabAlreadyExtended);
        }
        if k == 0 {
            return Ok(());
        }
        let d = self.config.d_model;
        let table = &self.params[TOK_EMB];
        let rows = table.shape()[0];
        let mut mean = vec![0.0f64; d];
        for row in table.data().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        let noise = Normal::new(0.0f32, REWARD_ROW_NOISE).expect("valid std");
        let mut data = table.data().to_vec();
        for _ in 0..k {
            data.extend(mean.iter().map(|&m| (m / rows as f64) as f32 + noise.sample(rng)));
        }
        let requires_grad = table.requires_grad();
        self.params[TOK_EMB] = Tensor::new(vec![rows + k, d], data)?.with_grad(requires_grad);
        self.config.n_reward_tokens = k;
        Ok(())
    }

    /// Places the parameters on `g`, tracking gradients iff `trainable`.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    let t = Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("valid parameter");
                    g.leaf(t.with_grad(trainable))
                })
                .collect(),
        )
    }

    /// Adds gradients computed on `g` into the parameter accumulators.
    pub fn accumulate_grads(&mut self, g: &Graph<f32>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            g.accumulate_grad_into(v, p);
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if tokens.len() > self.config.context_length {
            return Err(Error::InputTooLong { len: tokens.len(), max: self.config.context_length });
        }
        let vocab = self.config.vocab_size();
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(())
    }

    /// Final-layer-norm hidden states, `[len × d_model]`.
    pub fn hidden(&self, g: &mut Graph<f32>, p: &Bound, tokens: &[u32]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (t, d, hd) = (tokens.len(), cfg.d_model, cfg.head_dim());
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let v = &p.0;
        let tok = g.embedding(v[TOK_EMB], &ids)?;
        let pos = g.embedding(v[POS_EMB], &positions)?;
        let mut x = g.add(tok, pos)?;
        let eps = LN_EPS;
        let att_scale = 1.0 / (hd as f32).sqrt();
        for l in 0..cfg.n_layers {
            let w = |i: usize| v[FIRST_LAYER + l * PER_LAYER + i];
            let h = g.layer_norm(x, w(LN1_G), w(LN1_B), eps)?;
            let qkv = g.matmul(h, w(W_QKV))?;
            let qkv = g.add(qkv, w(B_QKV))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let q = g.slice_cols(qkv, head * hd, hd)?;
                let k = g.slice_cols(qkv, d + head * hd, hd)?;
                let val = g.slice_cols(qkv, 2 * d + head * hd, hd)?;
                let scores = g.matmul_bt(q, k)?;
                let scores = g.scale(scores, att_scale);
                let att = g.causal_softmax_rows(scores)?;
                heads.push(g.matmul(att, val)?);
            }
            let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let proj = g.matmul(merged, w(W_O))?;
            let proj = g.add(proj, w(B_O))?;
            x = g.add(x, proj)?;
            let h = g.layer_norm(x, w(LN2_G), w(LN2_B), eps)?;
            let fc = g.matmul(h, w(W_FC))?;
            let fc = g.add(fc, w(B_FC))?;
            let act = g.gelu(fc);
            let out = g.matmul(act, w(W_PROJ))?;
            let out = g.add(out, w(B_PROJ))?;
            x = g.add(x, out)?;
        }
        let lnf = FIRST_LAYER + cfg.n_layers * PER_LAYER;
        Ok(g.layer_norm(x, v[lnf], v[lnf + 1], eps)?)
    }

    /// Base-vocabulary logits for hidden states `h`.
    pub fn head(&self, g: &mut Graph<f32>, p: &Bound, h: Var) -> Result<Var> {
        let cfg = &self.config;
        let out = if cfg.tied {
            let table = p.0[TOK_EMB];
            let w = if cfg.n_reward_tokens > 0 { g.slice_rows(table, 0, cfg.base_vocab)? } else { table };
            g.matmul_bt(h, w)?
        } else {
            let head = FIRST_LAYER + cfg.n_layers * PER_LAYER + 2;
            g.matmul_bt(h, p.0[head])?
        };
        Ok(out)
    }

    /// Row `t` holds next-token logits given `tokens[..=t]`.
    pub fn logits(&self, g: &mut Graph<f32>, p: &Bound, tokens: &[u32]) -> Result<Var> {
        let h = self.hidden(g, p, tokens)?;
        self.head(g, p, h)
    }

    /// `[len × base_vocab]` logits, evaluated without gradient tracking.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.logits(&mut g, &p, tokens)?;
        Ok(g.into_value(out))
    }

    /// Logits for the token following `tokens`.
    pub fn next_logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = self.hidden(&mut g, &p, tokens)?;
        let last = g.slice_rows(h, tokens.len() - 1, 1)?;
        let out = self.head(&mut g, &p, last)?;
        Ok(g.into_value(out).into_data())
    }

    /// Builds the model input `[r_k;] x y[..|y|-1]` and returns it with the index
    /// of the first logit row that predicts `y`.
    pub fn conditioned_input(reward_token: Option<u32>, x: &[u32], y: &[u32]) -> (Vec<u32>, usize) {
        let mut input = Vec::with_capacity(1 + x.len() + y.len());
        input.extend(reward_token);
        input.extend_from_slice(x);
        input.extend_from_slice(&y[..y.len().saturating_sub(1)]);
        let context = reward_token.is_some() as usize + x.len();
        (input, context.saturating_sub(1))
    }

    /// `Σ_t log p(y_t | [r_k;] x, y_<t)`. The reward token itself is never scored.
    pub fn sequence_logprob(&self, x: &[u32], y: &[u32], reward_token: Option<u32>) -> Result<f64> {
        if y.is_empty() {
            return Ok(0.0);
        }
        if x.is_empty() && reward_token.is_none() {
            return Err(Error::EmptyInput);
        }
        let (input, first) = Self::conditioned_input(reward_token, x, y);
        let logits = self.forward_logits(&input)?;
        let v = self.config.base_vocab;
        let mut total = 0.0;
        for (row, &target) in logits.data()[first * v..].chunks(v).zip(y) {
            if target as usize >= v {
                return Err(Error::TokenOutOfRange { id: target, vocab: v });
            }
            let mut lp: Vec<f64> = row.iter().map(|&z| z as f64).collect();
            log_softmax_in_place(&mut lp);
            total += lp[target as usize];
        }
        Ok(total)
    }

    /// `exp` of the mean per-token negative log-likelihood of each continuation given its context.
    pub fn perplexity(&self, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
        let mut nll = 0.0;
        let mut count = 0usize;
        for (x, y) in pairs {
            nll -= self.sequence_logprob(x, y, None)?;
            count += y.len();
        }
        if count == 0 {
            return Err(Error::EmptySampleSet);
        }
        Ok((nll / count as f64).exp())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn tiny(vocab: usize, layers: usize, tied: bool) -> LanguageModel {
        let cfg = ModelConfig {
            base_vocab: vocab,
            n_reward_tokens: 0,
            d_model: 16,
            n_layers: layers,
            n_heads: 2,
            context_length: 16,
            tied,
        };
        LanguageModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn finite_logits_at_init() {
        let m = tiny(11, 1, true);
        let l = m.forward_logits(&[1, 2, 3, 4]).unwrap();
        assert_eq!(l.shape(), &[4, 11]);
        assert!(l.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn causal_mask() {
        let m = tiny(11, 2, false);
        let a = m.forward_logits(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.forward_logits(&[1, 2, 3, 9, 5]).unwrap();
        let v = 11;
        for t in 0..5 {
            let same = a.data()[t * v..(t + 1) * v] == b.data()[t * v..(t + 1) * v];
            assert_eq!(same, t < 3, "row {t}");
        }
    }

    #[test]
    fn rows_match_prefix_recomputation() {
        let m = tiny(11, 2, true);
        let tokens = [3, 1, 4, 1, 5, 9];
        let full = m.forward_logits(&tokens).unwrap();
        for t in 0..tokens.len() {
            let last = m.next_logits(&tokens[..=t]).unwrap();
            let row = &full.data()[t * 11..(t + 1) * 11];
            for (a, b) in row.iter().zip(&last) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn input_errors() {
        let m = tiny(11, 1, true);
        assert!(matches!(m.forward_logits(&[]), Err(Error::EmptyInput)));
        assert!(matches!(m.forward_logits(&[11]), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(m.forward_logits(&[1; 17]), Err(Error::InputTooLong { .. })));
    }

    #[test]
    fn extend_vocab_ids_and_preservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = tiny(260, 1, true);
        let before = m.forward_logits(&[5, 6, 7]).unwrap();
        let table = m.params()[TOK_EMB].data().to_vec();
        m.extend_vocab(0, &mut rng).unwrap();
        assert_eq!(m.config().vocab_size(), 260);
        m.extend_vocab(5, &mut rng).unwrap();
        assert_eq!(m.config().vocab_size(), 265);
        assert_eq!(m.reward_token(1), Some(260));
        assert_eq!(m.reward_token(5), Some(264));
        assert_eq!(m.reward_token(6), None);
        assert_eq!(&m.params()[TOK_EMB].data()[..table.len()], &table[..]);
        let after = m.forward_logits(&[5, 6, 7]).unwrap();
        assert_eq!(before, after);
        assert!(matches!(m.extend_vocab(2, &mut rng), Err(Error::VocabAlreadyExtended)));
    }

    #[test]
    fn empty_continuation_scores_zero() {
        let m = tiny(11, 1, true);
        assert_eq!(m.sequence_logprob(&[1, 2], &[], None).unwrap(), 0.0);
    }

    #[test]
    fn conditioned_input_layout() {
        let (input, first) = LanguageModel::conditioned_input(Some(20), &[1, 2], &[3, 4, 5]);
        assert_eq!(input, vec![20, 1, 2, 3, 4]);
        assert_eq!(first, 2);
        let (input, first) = LanguageModel::conditioned_input(None, &[1, 2], &[3]);
        assert_eq!(input, vec![1, 2]);
        assert_eq!(first, 1);
    }

    #[test]
    fn appending_lowers_logprob() {
        let m = tiny(11, 1, true);
        let x = [1, 2];
        let mut y = vec![];
        let mut prev = 0.0;
        for t in [3, 4, 3, 7] {
            y.push(t);
            let lp = m.sequence_logprob(&x, &y, None).unwrap();
            assert!(lp < prev);
            prev = lp;
        }
    }
}
