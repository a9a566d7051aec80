//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so node index order is a valid
//! topological order and `backward` simply walks the tape in reverse.

use super::{Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulBt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: F },
    Gelu { a: Var },
    Softmax { a: Var },
    CausalSoftmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SumAll { a: Var },
    SumScalars { parts: Vec<Var> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    KlRows { q: Var, p_probs: Vec<F>, q_probs: Vec<F> },
    LogRatioAt { q: Var, targets: Vec<usize>, q_probs: Vec<F> },
    Unlikelihood { logits: Var, candidates: Vec<Vec<usize>>, probs: Vec<F>, norm: F },
}

#[derive(Debug)]
struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Probability floor inside `log(1 - p)` for the unlikelihood penalty.
const UNLIKELIHOOD_FLOOR: f64 = 1e-6;

/// A computation graph. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    /// Adds a constant leaf.
    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<F> {
        self.nodes.swap_remove(v.0).value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn output(&mut self, shape: Vec<usize>, data: Vec<F>, inputs: &[Var], op: Op<F>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let grad = requires_grad.then(|| vec![F::zero(); data.len()]);
        self.push(Tensor::from_parts(shape, data, grad), op)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.value(v)
            .dims2()
            .ok_or_else(|| shape_err(op, format!("expected rank 1 or 2, got {:?}", self.value(v).shape())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        Ok(self.output(vec![m, n], out, &[a, b], Op::Matmul { a, b }))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a, "matmul_bt")?;
        let (n, k2) = self.dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("[{m}x{k}] x [{n}x{k2}]ᵀ")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        Ok(self.output(vec![m, n], out, &[a, b], Op::MatmulBt { a, b }))
    }

    /// Elementwise sum. A rank-1 (or single-row) `b` is broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa == sb {
            let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
            return Ok(self.output(sa, out, &[a, b], Op::Add { a, b }));
        }
        let (_, c) = self.dims(a, "add")?;
        let (br, bc) = self.dims(b, "add")?;
        if br == 1 && bc == c && sa.len() == 2 {
            let bd = self.value(b).data();
            let out: Vec<F> = self
                .value(a)
                .data()
                .chunks(c)
                .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
                .collect();
            return Ok(self.output(sa, out, &[a, b], Op::AddRow { a, row: b }));
        }
        Err(shape_err("add", format!("{sa:?} + {sb:?}")))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.value(a).shape().to_vec();
        if sa != self.value(b).shape() {
            return Err(shape_err("mul", format!("{sa:?} * {:?}", self.value(b).shape())));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        Ok(self.output(sa, out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x * factor).collect();
        let shape = t.shape().to_vec();
        self.output(shape, out, &[a], Op::Scale { a, factor })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| gelu(x)).collect();
        let shape = t.shape().to_vec();
        self.output(shape, out, &[a], Op::Gelu { a })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a, "softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.value(a).shape().to_vec();
        debug_assert_eq!(out.len(), r * c);
        Ok(self.output(shape, out, &[a], Op::Softmax { a }))
    }

    /// Row softmax restricted to columns `j <= i`; masked entries are exactly 0.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a, "causal_softmax_rows")?;
        if r != c {
            return Err(shape_err("causal_softmax_rows", format!("expected square, got [{r}x{c}]")));
        }
        let mut out = self.value(a).data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let (visible, masked) = row.split_at_mut(i + 1);
            softmax_in_place(visible);
            masked.iter_mut().for_each(|v| *v = F::zero());
        }
        Ok(self.output(vec![r, c], out, &[a], Op::CausalSoftmax { a }))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, c) = self.dims(a, "log_softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.output(shape, out, &[a], Op::LogSoftmax { a }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var, TensorError> {
        let (r, c) = self.dims(x, "layer_norm")?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(shape_err(
                "layer_norm",
                format!("gain/bias must have {c} entries, got {}/{}", self.value(gain).numel(), self.value(bias).numel()),
            ));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let n = F::of(c as f64);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xd.chunks(c) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.output(shape, out, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(shape_err("embedding", "empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange { op: "embedding", index: bad, bound: v });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.output(vec![ids.len(), d], out, &[table], Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let out = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.output(vec![r, len], out, &[a], Op::SliceCols { a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        Ok(self.output(vec![len, c], out, &[a], Op::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs".into()));
        };
        let (r, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.output(vec![r, total], out, parts, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.output(vec![1], vec![s], &[a], Op::SumAll { a })
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut s = F::zero();
        for &p in parts {
            if !self.value(p).is_scalar() {
                return Err(shape_err("sum_scalars", format!("non-scalar {:?}", self.value(p).shape())));
            }
            s = s + self.value(p).item();
        }
        Ok(self.output(vec![1], vec![s], parts, Op::SumScalars { parts: parts.to_vec() }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (t, v) = self.dims(logits, "cross_entropy")?;
        check_targets("cross_entropy", t, v, targets)?;
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &y) in probs.chunks_mut(v).zip(targets) {
            log_softmax_in_place(row);
            total -= row[y].f64();
            row.iter_mut().for_each(|x| *x = x.exp());
        }
        let value = F::of(total / t as f64);
        Ok(self.output(vec![1], vec![value], &[logits], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// `Σ_rows KL(softmax(p) ‖ softmax(q))`. The `p` side is a constant: no gradient reaches it.
    pub fn kl_rows(&mut self, p_logits: Var, q_logits: Var) -> Result<Var, TensorError> {
        let sp = self.value(p_logits).shape().to_vec();
        if sp != self.value(q_logits).shape() {
            return Err(shape_err("kl_rows", format!("{sp:?} vs {:?}", self.value(q_logits).shape())));
        }
        let (_, v) = self.dims(p_logits, "kl_rows")?;
        let mut lp = self.value(p_logits).data().to_vec();
        let mut lq = self.value(q_logits).data().to_vec();
        let mut total = 0.0f64;
        for (rp, rq) in lp.chunks_mut(v).zip(lq.chunks_mut(v)) {
            log_softmax_in_place(rp);
            log_softmax_in_place(rq);
            for (a, b) in rp.iter_mut().zip(rq.iter_mut()) {
                let pa = a.exp();
                total += pa.f64() * (*a - *b).f64();
                *a = pa;
                *b = b.exp();
            }
        }
        let value = F::of(total);
        Ok(self.output(vec![1], vec![value], &[q_logits], Op::KlRows { q: q_logits, p_probs: lp, q_probs: lq }))
    }

    /// `Σ_rows [log p(target) − log q(target)]`, gradient into `q` only.
    pub fn log_ratio_at(&mut self, p_logits: Var, q_logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let sp = self.value(p_logits).shape().to_vec();
        if sp != self.value(q_logits).shape() {
            return Err(shape_err("log_ratio_at", format!("{sp:?} vs {:?}", self.value(q_logits).shape())));
        }
        let (t, v) = self.dims(p_logits, "log_ratio_at")?;
        check_targets("log_ratio_at", t, v, targets)?;
        let mut lp = self.value(p_logits).data().to_vec();
        let mut lq = self.value(q_logits).data().to_vec();
        let mut total = 0.0f64;
        for ((rp, rq), &y) in lp.chunks_mut(v).zip(lq.chunks_mut(v)).zip(targets) {
            log_softmax_in_place(rp);
            log_softmax_in_place(rq);
            total += (rp[y] - rq[y]).f64();
            rq.iter_mut().for_each(|x| *x = x.exp());
        }
        let value = F::of(total);
        Ok(self.output(
            vec![1],
            vec![value],
            &[q_logits],
            Op::LogRatioAt { q: q_logits, targets: targets.to_vec(), q_probs: lq },
        ))
    }

    /// `-(1/norm) Σ_i Σ_{c ∈ candidates[i]} log(1 − softmax(logits_i)[c])`.
    pub fn unlikelihood(&mut self, logits: Var, candidates: &[Vec<usize>], norm: usize) -> Result<Var, TensorError> {
        let (t, v) = self.dims(logits, "unlikelihood")?;
        if candidates.len() != t {
            return Err(shape_err("unlikelihood", format!("{} candidate sets for {t} rows", candidates.len())));
        }
        if let Some(&bad) = candidates.iter().flatten().find(|&&c| c >= v) {
            return Err(TensorError::IndexOutOfRange { op: "unlikelihood", index: bad, bound: v });
        }
        let norm = norm.max(1);
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, cands) in probs.chunks_mut(v).zip(candidates) {
            softmax_in_place(row);
            for &c in cands {
                total -= (1.0 - row[c].f64()).max(UNLIKELIHOOD_FLOOR).ln();
            }
        }
        let value = F::of(total / norm as f64);
        Ok(self.output(
            vec![1],
            vec![value],
            &[logits],
            Op::Unlikelihood { logits, candidates: candidates.to_vec(), probs, norm: F::of(norm as f64) },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Intermediate gradients are reset first; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarBackward { shape: self.value(loss).shape().to_vec() });
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.value.zero_grad();
            }
        }
        match self.nodes[loss.0].value.grad_mut() {
            Some(g) => g[0] = g[0] + F::one(),
            None => return Ok(()),
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(grad) = node.value.grad() else { continue };
            backprop(&node.op, &node.value, grad, before);
        }
        Ok(())
    }

    /// Adds the gradient of `v` into `target`'s accumulator.
    pub fn accumulate_grad_into(&self, v: Var, target: &mut Tensor<F>) {
        if let (Some(src), Some(dst)) = (self.grad(v), target.grad_mut()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
}

fn check_targets(op: &'static str, rows: usize, v: usize, targets: &[usize]) -> Result<(), TensorError> {
    if targets.len() != rows {
        return Err(shape_err(op, format!("{} targets for {rows} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(TensorError::IndexOutOfRange { op, index: bad, bound: v });
    }
    Ok(())
}

#[inline]
/// Dot product with eight independent partial sums, which lets the loop vectorize.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut acc = lanes.iter().fold(F::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        acc = acc + x * y;
    }
    acc
}

fn zip_map<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044715;

#[inline]
fn gelu<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

#[inline]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x);
    let t = inner.tanh();
    let dinner = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_K) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

fn acc<F: Scalar>(nodes: &mut [Node<F>], v: Var, f: impl FnOnce(&mut [F], &[F])) {
    if let (data, Some(grad)) = nodes[v.0].value.data_and_grad_mut() {
        f(grad, data);
    }
}

fn backprop<F: Scalar>(op: &Op<F>, out: &Tensor<F>, dout: &[F], nodes: &mut [Node<F>]) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = nodes[a.0].value.dims2().unwrap();
            let (_, n) = nodes[b.0].value.dims2().unwrap();
            if nodes[a.0].value.requires_grad() {
                let bd = nodes[b.0].value.data().to_vec();
                acc(nodes, *a, |ga, _| {
                    for i in 0..m {
                        let drow = &dout[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = ga[i * k + p] + dot(drow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
            }
            if nodes[b.0].value.requires_grad() {
                let ad = nodes[a.0].value.data().to_vec();
                acc(nodes, *b, |gb, _| {
                    for i in 0..m {
                        let drow = &dout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (g, &d) in gb[p * n..(p + 1) * n].iter_mut().zip(drow) {
                                *g = *g + av * d;
                            }
                        }
                    }
                });
            }
        }
        Op::MatmulBt { a, b } => {
            let (m, k) = nodes[a.0].value.dims2().unwrap();
            let (n, _) = nodes[b.0].value.dims2().unwrap();
            if nodes[a.0].value.requires_grad() {
                let bd = nodes[b.0].value.data().to_vec();
                acc(nodes, *a, |ga, _| {
                    for i in 0..m {
                        let grow = &mut ga[i * k..(i + 1) * k];
                        for j in 0..n {
                            let d = dout[i * n + j];
                            for (g, &bv) in grow.iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                *g = *g + d * bv;
                            }
                        }
                    }
                });
            }
            if nodes[b.0].value.requires_grad() {
                let ad = nodes[a.0].value.data().to_vec();
                acc(nodes, *b, |gb, _| {
                    for i in 0..m {
                        let arow = &ad[i * k..(i + 1) * k];
                        for j in 0..n {
                            let d = dout[i * n + j];
                            for (g, &av) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *g = *g + d * av;
                            }
                        }
                    }
                });
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                acc(nodes, *v, |g, _| add_into(g, dout));
            }
        }
        Op::AddRow { a, row } => {
            acc(nodes, *a, |g, _| add_into(g, dout));
            acc(nodes, *row, |g, _| {
                let c = g.len();
                for drow in dout.chunks(c) {
                    add_into(g, drow);
                }
            });
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (nodes[a.0].value.data().to_vec(), nodes[b.0].value.data().to_vec());
            acc(nodes, *a, |g, _| {
                for ((g, &d), &bv) in g.iter_mut().zip(dout).zip(&bd) {
                    *g = *g + d * bv;
                }
            });
            acc(nodes, *b, |g, _| {
                for ((g, &d), &av) in g.iter_mut().zip(dout).zip(&ad) {
                    *g = *g + d * av;
                }
            });
        }
        Op::Scale { a, factor } => {
            acc(nodes, *a, |g, _| {
                for (g, &d) in g.iter_mut().zip(dout) {
                    *g = *g + d * *factor;
                }
            });
        }
        Op::Gelu { a } => {
            acc(nodes, *a, |g, x| {
                for ((g, &d), &x) in g.iter_mut().zip(dout).zip(x) {
                    *g = *g + d * gelu_grad(x);
                }
            });
        }
        Op::Softmax { a } | Op::CausalSoftmax { a } => {
            let c = out.dims2().unwrap().1;
            let y = out.data();
            acc(nodes, *a, |g, _| {
                for ((grow, drow), yrow) in g.chunks_mut(c).zip(dout.chunks(c)).zip(y.chunks(c)) {
                    let s = dot(drow, yrow);
                    for ((g, &d), &yv) in grow.iter_mut().zip(drow).zip(yrow) {
                        *g = *g + yv * (d - s);
                    }
                }
            });
        }
        Op::LogSoftmax { a } => {
            let c = out.dims2().unwrap().1;
            let y = out.data();
            acc(nodes, *a, |g, _| {
                for ((grow, drow), yrow) in g.chunks_mut(c).zip(dout.chunks(c)).zip(y.chunks(c)) {
                    let s: F = drow.iter().copied().sum();
                    for ((g, &d), &yv) in grow.iter_mut().zip(drow).zip(yrow) {
                        *g = *g + d - yv.exp() * s;
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let c = out.dims2().unwrap().1;
            let gd = nodes[gain.0].value.data().to_vec();
            acc(nodes, *gain, |g, _| {
                for (drow, hrow) in dout.chunks(c).zip(xhat.chunks(c)) {
                    for ((g, &d), &h) in g.iter_mut().zip(drow).zip(hrow) {
                        *g = *g + d * h;
                    }
                }
            });
            acc(nodes, *bias, |g, _| {
                for drow in dout.chunks(c) {
                    add_into(g, drow);
                }
            });
            acc(nodes, *x, |g, _| {
                let n = F::of(c as f64);
                for (((grow, drow), hrow), &rs) in g.chunks_mut(c).zip(dout.chunks(c)).zip(xhat.chunks(c)).zip(rstd) {
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for j in 0..c {
                        let dh = drow[j] * gd[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hrow[j];
                    }
                    mean_dh = mean_dh / n;
                    mean_dh_h = mean_dh_h / n;
                    for j in 0..c {
                        let dh = drow[j] * gd[j];
                        grow[j] = grow[j] + rs * (dh - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            acc(nodes, *table, |g, _| {
                let d = dout.len() / ids.len();
                for (&id, drow) in ids.iter().zip(dout.chunks(d)) {
                    add_into(&mut g[id * d..(id + 1) * d], drow);
                }
            });
        }
        Op::SliceCols { a, start } => {
            let w = out.dims2().unwrap().1;
            let c = nodes[a.0].value.dims2().unwrap().1;
            acc(nodes, *a, |g, _| {
                for (grow, drow) in g.chunks_mut(c).zip(dout.chunks(w)) {
                    add_into(&mut grow[*start..*start + w], drow);
                }
            });
        }
        Op::SliceRows { a, start } => {
            let c = out.dims2().unwrap().1;
            acc(nodes, *a, |g, _| add_into(&mut g[start * c..start * c + dout.len()], dout));
        }
        Op::ConcatCols { parts } => {
            let total = out.dims2().unwrap().1;
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].value.dims2().unwrap().1;
                acc(nodes, *p, |g, _| {
                    for (grow, drow) in g.chunks_mut(w).zip(dout.chunks(total)) {
                        add_into(grow, &drow[offset..offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::SumAll { a } => {
            let d = dout[0];
            acc(nodes, *a, |g, _| g.iter_mut().for_each(|g| *g = *g + d));
        }
        Op::SumScalars { parts } => {
            let d = dout[0];
            for p in parts {
                acc(nodes, *p, |g, _| g[0] = g[0] + d);
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let t = targets.len();
            let v = probs.len() / t;
            let scale = dout[0] / F::of(t as f64);
            acc(nodes, *logits, |g, _| {
                for ((grow, prow), &y) in g.chunks_mut(v).zip(probs.chunks(v)).zip(targets) {
                    for (j, (g, &p)) in grow.iter_mut().zip(prow).enumerate() {
                        let onehot = if j == y { F::one() } else { F::zero() };
                        *g = *g + scale * (p - onehot);
                    }
                }
            });
        }
        Op::KlRows { q, p_probs, q_probs } => {
            let d = dout[0];
            acc(nodes, *q, |g, _| {
                for ((g, &p), &qv) in g.iter_mut().zip(p_probs).zip(q_probs) {
                    *g = *g + d * (qv - p);
                }
            });
        }
        Op::LogRatioAt { q, targets, q_probs } => {
            let d = dout[0];
            let v = q_probs.len() / targets.len();
            acc(nodes, *q, |g, _| {
                for ((grow, qrow), &y) in g.chunks_mut(v).zip(q_probs.chunks(v)).zip(targets) {
                    for (j, (g, &qv)) in grow.iter_mut().zip(qrow).enumerate() {
                        let onehot = if j == y { F::one() } else { F::zero() };
                        *g = *g + d * (qv - onehot);
                    }
                }
            });
        }
        Op::Unlikelihood { logits, candidates, probs, norm } => {
            let v = probs.len() / candidates.len();
            let scale = dout[0] / *norm;
            let floor = F::of(UNLIKELIHOOD_FLOOR);
            acc(nodes, *logits, |g, _| {
                for ((grow, prow), cands) in g.chunks_mut(v).zip(probs.chunks(v)).zip(candidates) {
                    for &c in cands {
                        let pc = prow[c];
                        let w = scale * pc / (F::one() - pc).max(floor);
                        // d/dz_j [-log(1 - p_c)] = p_c (δ_cj − p_j) / (1 − p_c)
                        for (j, (g, &pj)) in grow.iter_mut().zip(prow).enumerate() {
                            let delta = if j == c { F::one() } else { F::zero() };
                            *g = *g + w * (delta - pj);
                        }
                    }
                }
            });
        }
    }
}

#[inline]
fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
