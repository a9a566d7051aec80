//! Independent brute-force oracles shared by the unit-level and acceptance tests.

#![allow(dead_code)]

use quark::autodiff::{Graph, Tensor};
use quark::datapool::DataPool;
use quark::metrics::dist_n;
use quark::rewards::{diversity, rep_n};
use quark::rng::stream;
use rand::RngExt;

/// rep-n by pairwise comparison: an n-gram counts as unique at its first occurrence only.
pub fn brute_rep_n(y: &[u8], n: usize) -> f64 {
    if y.len() < n {
        return 0.0;
    }
    let total = y.len() - n + 1;
    let mut unique = 0;
    for i in 0..total {
        if !(0..i).any(|j| y[j..j + n] == y[i..i + n]) {
            unique += 1;
        }
    }
    100.0 * (1.0 - unique as f64 / total as f64)
}

pub fn brute_diversity(y: &[u8]) -> f64 {
    let mut d = 1.0;
    for n in 2..=4 {
        d *= 1.0 - brute_rep_n(y, n) / 100.0;
    }
    d
}

/// Every sequence of length `0..=max_len` over `alphabet` symbols.
pub fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for a in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Number of (sequence, quantity) pairs checked and the ones that differ, over all binary sequences up to length 6.
pub fn formula_mismatches() -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for y in all_sequences(2, 6) {
        for n in 1..=6 {
            checked += 1;
            if rep_n(&y, n) != brute_rep_n(&y, n) {
                bad.push(format!("rep_{n}({y:?})"));
            }
        }
        checked += 1;
        if diversity(&y) != brute_diversity(&y) {
            bad.push(format!("diversity({y:?})"));
        }
    }
    (checked, bad)
}

/// Hand-counted dist-n fixtures: (generations, n, expected).
pub fn dist_fixtures() -> Vec<(Vec<Vec<u8>>, usize, f64)> {
    vec![
        (vec![vec![0, 1, 2, 3]], 2, 0.75),
        (vec![vec![0, 0, 0, 0]], 2, 0.25),
        (vec![vec![0]], 2, 0.0),
        (vec![vec![0, 1, 2, 3], vec![0, 0, 0, 0]], 2, 0.5),
        (vec![vec![0, 1, 0, 1, 0]], 3, 0.4),
    ]
}

pub fn dist_fixture_failures() -> Vec<String> {
    dist_fixtures()
        .into_iter()
        .filter(|(g, n, want)| (dist_n(g, *n) - want).abs() > 1e-12)
        .map(|(g, n, want)| format!("dist_{n}({g:?}) = {} != {want}", dist_n(&g, n)))
        .collect()
}

/// Random pool of up to 1000 examples; half the pools draw rewards from a few levels to force ties.
pub fn random_pool(seed: u64) -> (DataPool, usize) {
    let mut rng = stream(seed, &[0xda7a]);
    let n = rng.random_range(1..=1000usize);
    let k = rng.random_range(1..=10usize).min(n);
    let tied = rng.random_bool(0.5);
    let mut pool = DataPool::new();
    let items: Vec<_> = (0..n)
        .map(|i| {
            let r = if tied { rng.random_range(0..4u32) as f64 / 3.0 } else { rng.random::<f64>() };
            (vec![i as u32], vec![], r)
        })
        .collect();
    pool.add(items).unwrap();
    (pool, k)
}

/// Checks the partition of a freshly quantized pool against a sort-and-split oracle.
pub fn check_partition(pool: &mut DataPool, k: usize) -> Result<(), String> {
    pool.quantize(k).map_err(|e| e.to_string())?;
    let n = pool.len();
    let mut oracle: Vec<(f64, u64)> = pool.examples().iter().map(|e| (e.reward, e.insertion_index)).collect();
    oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut seen = Vec::new();
    let mut sizes = Vec::new();
    for q in 1..=k {
        let members: Vec<(f64, u64)> =
            pool.quantile(q).map_err(|e| e.to_string())?.map(|e| (e.reward, e.insertion_index)).collect();
        sizes.push(members.len());
        seen.extend(members);
    }
    if seen != oracle {
        return Err("quantiles concatenated differ from the stable (reward, insertion) order".into());
    }
    let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
    if hi - lo > 1 {
        return Err(format!("size spread {} > 1: {sizes:?}", hi - lo));
    }
    let expected: Vec<usize> = (0..k).map(|q| n / k + usize::from(q < n % k)).collect();
    if sizes != expected {
        return Err(format!("sizes {sizes:?}, expected {expected:?}"));
    }
    let assigned: Vec<Option<usize>> = pool.examples().iter().map(|e| e.quantile).collect();
    let before = pool.stats().map_err(|e| e.to_string())?;
    pool.quantize(k).map_err(|e| e.to_string())?;
    let again: Vec<Option<usize>> = pool.examples().iter().map(|e| e.quantile).collect();
    if assigned != again || before != pool.stats().map_err(|e| e.to_string())? {
        return Err("re-quantizing changed the assignment".into());
    }
    Ok(())
}

/// Tabular two-step model: first-token logits and, per first token, second-token logits.
pub struct Tabular {
    pub first: Vec<f64>,
    pub second: Vec<Vec<f64>>,
}

impl Tabular {
    pub fn random(seed: u64, v: usize, scale: f64) -> Self {
        let mut rng = stream(seed, &[0x7ab]);
        let mut row = || (0..v).map(|_| rng.random_range(-scale..scale)).collect::<Vec<f64>>();
        let first = row();
        let second = (0..v).map(|_| row()).collect();
        Tabular { first, second }
    }

    fn rows(&self, y: &[usize]) -> Tensor<f64> {
        let v = self.first.len();
        let mut data = self.first.clone();
        if y.len() > 1 {
            data.extend(&self.second[y[0]]);
        }
        Tensor::new(vec![y.len(), v], data[..y.len() * v].to_vec()).unwrap()
    }

    pub fn prob(&self, y: &[usize]) -> f64 {
        let softmax = |z: &[f64]| {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let mut p = softmax(&self.first)[y[0]];
        if y.len() > 1 {
            p *= softmax(&self.second[y[0]])[y[1]];
        }
        p
    }
}

/// `(E_{y∼p0}[point-wise log-ratio], E_{y∼p0}[exact teacher-forced KL])` over all `y ∈ V^len`.
pub fn kl_expectations(p0: &Tabular, policy: &Tabular, len: usize) -> (f64, f64) {
    let v = p0.first.len();
    let seqs: Vec<Vec<usize>> = if len == 1 {
        (0..v).map(|a| vec![a]).collect()
    } else {
        (0..v).flat_map(|a| (0..v).map(move |b| vec![a, b])).collect()
    };
    let (mut approx, mut exact) = (0.0, 0.0);
    for y in seqs {
        let w = p0.prob(&y);
        let mut g: Graph<f64> = Graph::new();
        let p = g.constant(p0.rows(&y));
        let q = g.param(policy.rows(&y));
        let lr = g.log_ratio_at(p, q, &y).unwrap();
        let kl = g.kl_rows(p, q).unwrap();
        approx += w * g.value(lr).item();
        exact += w * g.value(kl).item();
    }
    (approx, exact)
}

/// Largest |E[approx] − E[exact]| over random tabular models with `V ∈ {2,3,4}` and `|y| ∈ {1,2}`.
pub fn kl_consistency_gap(models: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..models {
        let v = 2 + (seed % 3) as usize;
        let p0 = Tabular::random(seed, v, 2.0);
        let policy = Tabular::random(seed + 10_000, v, 2.0);
        for len in 1..=2 {
            let (a, e) = kl_expectations(&p0, &policy, len);
            worst = worst.max((a - e).abs());
        }
    }
    worst
}
