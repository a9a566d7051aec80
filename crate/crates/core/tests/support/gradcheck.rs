//! Finite-difference gradient oracle for the autodiff ops, in f64.

use quark::autodiff::{Graph, Tensor, Var};
use quark::rng::stream;
use rand::RngExt;

pub const SEEDS: u64 = 10;
pub const TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-6;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

pub fn random(seed: u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut rng = stream(seed, &[shape.iter().product::<usize>() as u64, shape.len() as u64]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Reduces the op output to a scalar through fixed random weights so every output entry matters.
fn scalar_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    if g.value(out).is_scalar() {
        return out;
    }
    let w = g.constant(random(seed ^ 0x5eed, g.value(out).shape(), 1.0));
    let prod = g.mul(out, w).unwrap();
    g.sum_all(prod)
}

fn loss_value(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let l = scalar_loss(&mut g, out, seed);
    g.value(l).item()
}

/// Largest relative error between analytic and central-difference gradients.
/// Denominators are floored at 1e-3 so near-zero gradients are compared absolutely.
pub fn max_rel_error(inputs: Vec<Tensor<f64>>, build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let l = scalar_loss(&mut g, out, seed);
    g.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("input tracks a gradient").to_vec();
        #[allow(clippy::needless_range_loop)]
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (loss_value(&plus, build, seed) - loss_value(&minus, build, seed)) / (2.0 * H);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

fn targets(seed: u64, n: usize, v: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[77]);
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

/// Op name, graph builder and input shapes.
pub type Case = (&'static str, Box<Build>, Vec<Vec<usize>>);

/// (name, build, input shapes) for every op.
pub fn cases(seed: u64) -> Vec<Case> {
    let t = targets(seed, 3, 5);
    let t2 = t.clone();
    let t3 = t.clone();
    let ids = targets(seed + 1, 4, 6);
    let cands: Vec<Vec<usize>> = vec![vec![], vec![0, 2], vec![1, 3, 4]];
    // The reference side of the KL ops is frozen by design, so it enters as a constant.
    let reference = random(seed + 1000, &[3, 5], 1.5);
    let reference2 = reference.clone();
    vec![
        ("matmul", Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()), vec![vec![3, 4], vec![4, 2]]),
        ("matmul_bt", Box::new(|g, v| g.matmul_bt(v[0], v[1]).unwrap()), vec![vec![3, 4], vec![5, 4]]),
        ("add", Box::new(|g, v| g.add(v[0], v[1]).unwrap()), vec![vec![3, 4], vec![3, 4]]),
        ("add_row", Box::new(|g, v| g.add(v[0], v[1]).unwrap()), vec![vec![3, 4], vec![4]]),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1]).unwrap()), vec![vec![2, 3], vec![2, 3]]),
        ("scale", Box::new(|g, v| g.scale(v[0], -1.7)), vec![vec![2, 3]]),
        ("gelu", Box::new(|g, v| g.gelu(v[0])), vec![vec![3, 4]]),
        ("softmax_rows", Box::new(|g, v| g.softmax_rows(v[0]).unwrap()), vec![vec![3, 5]]),
        ("causal_softmax_rows", Box::new(|g, v| g.causal_softmax_rows(v[0]).unwrap()), vec![vec![4, 4]]),
        ("log_softmax_rows", Box::new(|g, v| g.log_softmax_rows(v[0]).unwrap()), vec![vec![3, 5]]),
        (
            "layer_norm",
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
            vec![vec![3, 6], vec![6], vec![6]],
        ),
        ("embedding", Box::new(move |g, v| g.embedding(v[0], &ids).unwrap()), vec![vec![6, 3]]),
        ("slice_cols", Box::new(|g, v| g.slice_cols(v[0], 1, 3).unwrap()), vec![vec![3, 5]]),
        ("slice_rows", Box::new(|g, v| g.slice_rows(v[0], 1, 2).unwrap()), vec![vec![4, 3]]),
        ("concat_cols", Box::new(|g, v| g.concat_cols(&[v[0], v[1]]).unwrap()), vec![vec![3, 2], vec![3, 4]]),
        ("sum_all", Box::new(|g, v| g.sum_all(v[0])), vec![vec![3, 4]]),
        (
            "sum_scalars",
            Box::new(|g, v| {
                let a = g.sum_all(v[0]);
                let b = g.sum_all(v[1]);
                let b2 = g.mul(b, b).unwrap();
                g.sum_scalars(&[a, b2]).unwrap()
            }),
            vec![vec![2, 2], vec![3]],
        ),
        ("cross_entropy", Box::new(move |g, v| g.cross_entropy(v[0], &t).unwrap()), vec![vec![3, 5]]),
        (
            "kl_rows",
            Box::new(move |g, v| {
                let p = g.constant(reference.clone());
                g.kl_rows(p, v[0]).unwrap()
            }),
            vec![vec![3, 5]],
        ),
        (
            "log_ratio_at",
            Box::new(move |g, v| {
                let p = g.constant(reference2.clone());
                g.log_ratio_at(p, v[0], &t2).unwrap()
            }),
            vec![vec![3, 5]],
        ),
        ("unlikelihood", Box::new(move |g, v| g.unlikelihood(v[0], &cands, 3).unwrap()), vec![vec![3, 5]]),
        (
            "attention_chain",
            Box::new(move |g, v| {
                let s = g.matmul_bt(v[0], v[1]).unwrap();
                let s = g.scale(s, 0.5);
                let a = g.causal_softmax_rows(s).unwrap();
                let h = g.matmul(a, v[2]).unwrap();
                let h = g.gelu(h);
                g.cross_entropy(h, &t3[..3]).unwrap()
            }),
            vec![vec![3, 4], vec![3, 4], vec![3, 5]],
        ),
    ]
}

/// Worst error per op over `SEEDS` seeds.
pub fn worst_errors() -> Vec<(&'static str, f64)> {
    let names: Vec<&str> = cases(0).iter().map(|c| c.0).collect();
    let mut worst = vec![0.0f64; names.len()];
    for seed in 0..SEEDS {
        for (i, (_, build, shapes)) in cases(seed).into_iter().enumerate() {
            let inputs = shapes.iter().enumerate().map(|(k, s)| random(seed * 31 + k as u64, s, 1.5)).collect();
            worst[i] = worst[i].max(max_rel_error(inputs, &*build, seed));
        }
    }
    names.into_iter().zip(worst).collect()
}
