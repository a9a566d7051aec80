//! The Quark objective against hand evaluation and enumeration oracles.

#[path = "support/oracles.rs"]
mod oracles;

use proptest::prelude::*;
use quark::autodiff::{Graph, Tensor};
use quark::model::{LanguageModel, ModelConfig};
use quark::rng::stream;
use quark::training::{
    approx_kl_loss, quark_loss, unlikelihood_candidates, unlikelihood_term, KlMode, LossTerms, TrainItem,
};

fn reference(vocab: usize, seed: u64) -> LanguageModel {
    let cfg = ModelConfig {
        base_vocab: vocab,
        n_reward_tokens: 0,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_length: 12,
        tied: false,
    };
    LanguageModel::new(cfg, &mut stream(seed, &[1])).unwrap()
}

/// Reference with `k` reward tokens and every parameter nudged by noise.
fn perturbed_policy(p0: &LanguageModel, k: usize, seed: u64, scale: f32) -> LanguageModel {
    let mut m = p0.clone();
    m.extend_vocab(k, &mut stream(seed, &[2])).unwrap();
    let mut rng = stream(seed, &[3]);
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x += scale * (rand::RngExt::random::<f32>(&mut rng) - 0.5);
        }
    }
    m
}

fn terms(mode: KlMode, beta: f64, alpha: f64) -> LossTerms {
    LossTerms { kl_mode: mode, kl_coef: beta, unlikelihood_alpha: alpha, per_token_average: false }
}

fn loss(
    policy: &LanguageModel,
    p0: &LanguageModel,
    batch: &[TrainItem<'_>],
    t: &LossTerms,
) -> quark::training::LossComponents {
    let mut g = Graph::new();
    let params = policy.bind(&mut g, false);
    quark_loss(&mut g, policy, &params, p0, batch, t).unwrap().1
}

#[test]
fn without_kl_or_unlikelihood_the_loss_is_mean_nll() {
    let p0 = reference(7, 1);
    let policy = perturbed_policy(&p0, 3, 1, 0.3);
    let (x1, y1, x2, y2) = (vec![0, 1], vec![2, 3, 4], vec![5], vec![6, 6]);
    let batch = [
        TrainItem::new(&x1, &y1, policy.reward_token(3)),
        TrainItem::new(&x2, &y2, policy.reward_token(1)),
    ];
    let c = loss(&policy, &p0, &batch, &terms(KlMode::Exact, 0.0, 0.0));
    assert_eq!(c.total, c.nll);
    let want = -(policy.sequence_logprob(&x1, &y1, policy.reward_token(3)).unwrap()
        + policy.sequence_logprob(&x2, &y2, policy.reward_token(1)).unwrap())
        / 2.0;
    assert!((c.nll - want).abs() < 1e-4 * want.abs(), "{} vs {want}", c.nll);
    assert!(c.kl >= 0.0);

    let per_token = LossTerms { per_token_average: true, ..terms(KlMode::Off, 0.0, 0.0) };
    let c = loss(&policy, &p0, &batch, &per_token);
    let want = -(policy.sequence_logprob(&x1, &y1, policy.reward_token(3)).unwrap() / 3.0
        + policy.sequence_logprob(&x2, &y2, policy.reward_token(1)).unwrap() / 2.0)
        / 2.0;
    assert!((c.total - want).abs() < 1e-4 * want.abs());
}

#[test]
fn unconditioned_policy_equal_to_reference_has_zero_kl() {
    let p0 = reference(6, 2);
    let mut policy = p0.clone();
    policy.extend_vocab(4, &mut stream(9, &[])).unwrap();
    let (x, y) = (vec![0, 1], vec![2, 3, 5]);
    let c = loss(&policy, &p0, &[TrainItem::new(&x, &y, None)], &terms(KlMode::Exact, 0.05, 0.0));
    assert_eq!(c.kl, 0.0);
    let c = loss(&policy, &p0, &[TrainItem::new(&x, &y, None)], &terms(KlMode::Approximate, 0.05, 0.0));
    assert_eq!(c.kl, 0.0);
}

#[test]
fn kl_penalty_enters_the_total_with_its_coefficient() {
    let p0 = reference(6, 3);
    let policy = perturbed_policy(&p0, 2, 3, 0.5);
    let (x, y) = (vec![1], vec![2, 3]);
    let batch = [TrainItem::new(&x, &y, policy.reward_token(2))];
    let c = loss(&policy, &p0, &batch, &terms(KlMode::Exact, 0.2, 0.0));
    assert!(c.kl > 0.0);
    assert!((c.total - (c.nll + 0.2 * c.kl)).abs() < 1e-5 * c.total);
    let off = loss(&policy, &p0, &batch, &terms(KlMode::Off, 0.2, 0.0));
    assert_eq!(off.kl, 0.0);
}

#[test]
fn approximate_kl_matches_exact_in_expectation_on_tabular_models() {
    let gap = oracles::kl_consistency_gap(30);
    assert!(gap < 1e-6, "{gap:e}");
}

#[test]
fn approximate_kl_matches_exact_in_expectation_on_transformers() {
    // Enumerate every continuation of length 2 over a 4-token vocabulary.
    let v = 4u32;
    let p0 = reference(v as usize, 5);
    let policy = perturbed_policy(&p0, 2, 5, 0.8);
    let x = vec![0u32];
    let token = policy.reward_token(2);
    let (mut approx, mut exact, mut mass) = (0.0, 0.0, 0.0);
    for a in 0..v {
        for b in 0..v {
            let y = vec![a, b];
            let w = p0.sequence_logprob(&x, &y, None).unwrap().exp();
            let batch = [TrainItem::new(&x, &y, token)];
            let mut g = Graph::new();
            let params = policy.bind(&mut g, false);
            approx += w * approx_kl_loss(&mut g, &policy, &params, &p0, &batch, 0.0).unwrap().1.kl;
            exact += w * loss(&policy, &p0, &batch, &terms(KlMode::Exact, 0.0, 0.0)).kl;
            mass += w;
        }
    }
    assert!((mass - 1.0).abs() < 1e-5);
    assert!(exact > 0.01);
    assert!((approx - exact).abs() < 1e-5, "{approx} vs {exact}");
}

#[test]
fn unlikelihood_by_hand() {
    let (prompt, y) = ([0u32], [1u32, 0, 2]);
    let cands = unlikelihood_candidates(&prompt, &y, 4);
    assert_eq!(cands, vec![vec![0], vec![1], vec![0, 1]]);
    assert_eq!(unlikelihood_candidates(&[], &[1], 4), vec![Vec::<usize>::new()]);

    let logits: [[f64; 4]; 3] = [[0.5, -1.0, 0.2, 0.0], [1.5, 0.3, -0.7, 0.1], [0.0, 0.9, 0.4, -2.0]];
    let softmax = |z: &[f64; 4]| {
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        z.map(|v| v.exp() / s)
    };
    let mut want = 0.0;
    for (row, cs) in logits.iter().zip(&cands) {
        let p = softmax(row);
        for &c in cs {
            want -= (1.0 - p[c]).ln();
        }
    }
    want /= 3.0;
    let mut g: Graph<f32> = Graph::new();
    let data = logits.iter().flatten().map(|&v| v as f32).collect();
    let l = g.constant(Tensor::new(vec![3, 4], data).unwrap());
    let ul = unlikelihood_term(&mut g, l, &prompt, &y).unwrap();
    assert!((g.value(ul).item() as f64 - want).abs() < 1e-6);

    let mut g: Graph<f32> = Graph::new();
    let l = g.constant(Tensor::new(vec![1, 4], vec![0.0, 0.0, 0.0, 0.0]).unwrap());
    let ul = unlikelihood_term(&mut g, l, &[], &[1]).unwrap();
    assert_eq!(g.value(ul).item(), 0.0);

    let mut g: Graph<f32> = Graph::new();
    let l = g.constant(Tensor::new(vec![2, 3], vec![-1e4, 10.0, -1e4, -1e4, -1e4, 10.0]).unwrap());
    let ul = unlikelihood_term(&mut g, l, &[0], &[1, 2]).unwrap();
    assert_eq!(g.value(ul).item(), 0.0);
}

#[test]
fn empty_continuations_count_but_contribute_nothing() {
    let p0 = reference(5, 6);
    let policy = perturbed_policy(&p0, 2, 6, 0.2);
    let (x, y, e) = (vec![1u32], vec![2u32, 3], Vec::<u32>::new());
    let one = loss(&policy, &p0, &[TrainItem::new(&x, &y, None)], &terms(KlMode::Exact, 0.1, 0.0));
    let two = loss(
        &policy,
        &p0,
        &[TrainItem::new(&x, &y, None), TrainItem::new(&x, &e, None)],
        &terms(KlMode::Exact, 0.1, 0.0),
    );
    assert!((two.total - one.total / 2.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn kl_component_is_never_negative(
        seed in 0u64..1000,
        y in proptest::collection::vec(0u32..6, 1..6),
        k in 1usize..4,
    ) {
        let p0 = reference(6, seed % 7);
        let policy = perturbed_policy(&p0, 3, seed, 1.0);
        let x = vec![(seed % 6) as u32];
        let c = loss(&policy, &p0, &[TrainItem::new(&x, &y, policy.reward_token(k))], &terms(KlMode::Exact, 0.05, 0.0));
        prop_assert!(c.kl >= 0.0);
        prop_assert!(c.nll > 0.0);
    }
}
