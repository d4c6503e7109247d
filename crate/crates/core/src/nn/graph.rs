//! Tape-based reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so the backward sweep simply walks the
//! tape in reverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Tanh(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Im2Col(Var, usize),
    GatherRows(Var, Vec<usize>),
    Mae(Var, Vec<f64>),
    Mse(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    train: bool,
    rng: ChaCha8Rng,
    non_finite: Option<&'static str>,
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n x k) * b^T` where `b` is `m x k`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = ar.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b` where `a` is `n x k` and `b` is `n x m`; result `k x m`.
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * m..(p + 1) * m].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Graph {
    pub fn new(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            non_finite: None,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first operation that produced a NaN or infinity.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.data.iter().all(|v| v.is_finite()) {
            self.non_finite = Some(name);
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::SliceCols(a, _)
            | Op::SoftmaxRows(a)
            | Op::Im2Col(a, _)
            | Op::GatherRows(a, _)
            | Op::Mae(a, _)
            | Op::Mse(a, _)
            | Op::CrossEntropy(a, _, _) => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.data.len(), 1, "not a scalar");
        t.data[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, "constant")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), "param")
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((n, k), (k2, m)) = (self.dims(a), self.dims(b));
        assert_eq!(k, k2, "matmul inner dimensions {n}x{k} * {k2}x{m}");
        let out = matmul(&self.value(a).data, &self.value(b).data, n, k, m);
        self.push(Tensor::new(vec![n, m], out), Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let ((n, k), (m, k2)) = (self.dims(a), self.dims(b));
        assert_eq!(k, k2, "matmul_nt widths {k} vs {k2}");
        let out = matmul_nt(&self.value(a).data, &self.value(b).data, n, k, m);
        self.push(Tensor::new(vec![n, m], out), Op::MatMulNt(a, b), "matmul_nt")
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shapes differ");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape.clone(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), "mul")
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.dims(a);
        assert_eq!(self.dims(row), (1, c), "add_row expects a 1x{c} row");
        let r = self.value(row).data.clone();
        let mut data = self.value(a).data.clone();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(Tensor::new(vec![n, c], data), Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a), "tanh")
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.value(a).data.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = self.value(a).data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::MulConst(a, mask), "dropout")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, c) = self.dims(a);
        assert!(start + len <= c, "slice {start}+{len} beyond {c} columns");
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::new(vec![n, len], data), Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                assert_eq!(self.dims(p).0, n, "concat row counts differ");
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![n, total], data), Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, c) = self.dims(a);
        let mut data = self.value(a).data.clone();
        for row in data.chunks_mut(c.max(1)).take(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::new(vec![n, c], data), Op::SoftmaxRows(a), "softmax")
    }

    /// Per-row layer normalization with `1 x C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, c));
        assert_eq!(self.dims(beta), (1, c));
        let src = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::new(vec![n, c], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Unfolds `k` zero-padded neighbouring frames of each row side by side:
    /// output row `t` holds rows `t - k/2 ..= t + k/2`.
    pub fn im2col(&mut self, a: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "im2col needs an odd kernel");
        let (n, c) = self.dims(a);
        let half = (k / 2) as isize;
        let src = &self.value(a).data;
        let mut data = vec![0.0; n * k * c];
        for t in 0..n as isize {
            for o in 0..k as isize {
                let s = t + o - half;
                if s < 0 || s >= n as isize {
                    continue;
                }
                let dst = (t as usize * k + o as usize) * c;
                data[dst..dst + c].copy_from_slice(&src[s as usize * c..(s as usize + 1) * c]);
            }
        }
        self.push(Tensor::new(vec![n, k * c], data), Op::Im2Col(a, k), "im2col")
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let (n, c) = self.dims(a);
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            assert!(i < n, "gather index {i} out of {n} rows");
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(Tensor::new(vec![index.len(), c], data), Op::GatherRows(a, index), "gather_rows")
    }

    fn check_target(&self, a: Var, target: &Tensor) {
        assert_eq!(self.value(a).shape, target.shape, "loss target shape differs");
    }

    /// Mean absolute error against a constant target.
    pub fn mae(&mut self, a: Var, target: &Tensor) -> Var {
        self.check_target(a, target);
        let p = &self.value(a).data;
        let n = p.len().max(1) as f64;
        let v = p.iter().zip(&target.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        self.push(Tensor::scalar(v), Op::Mae(a, target.data.clone()), "mae")
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Var {
        self.check_target(a, target);
        let p = &self.value(a).data;
        let n = p.len().max(1) as f64;
        let v = p.iter().zip(&target.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        self.push(Tensor::scalar(v), Op::Mse(a, target.data.clone()), "mse")
    }

    /// Mean over rows of `-log softmax(logits)[id]`. Panics on an id out of range.
    pub fn cross_entropy(&mut self, logits: Var, ids: &[usize]) -> Var {
        let (n, c) = self.dims(logits);
        assert_eq!(ids.len(), n, "one class id per row");
        let mut probs = self.value(logits).data.clone();
        let mut loss = 0.0;
        for (row, &id) in probs.chunks_mut(c.max(1)).take(n).zip(ids) {
            assert!(id < c, "class id {id} out of range for {c} classes");
            let lse = log_sum_exp(row);
            loss += lse - row[id];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let v = loss / n.max(1) as f64;
        self.push(Tensor::scalar(v), Op::CrossEntropy(logits, ids.to_vec(), probs), "cross_entropy")
    }

    /// Gradient of a previous backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).data.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        self.grads = grads;
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).cols();
                acc(*a, matmul_nt(g, &val(*b).data, n, m, k));
                acc(*b, matmul_tn(&val(*a).data, g, n, k, m));
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).rows();
                acc(*a, matmul(g, &val(*b).data, n, m, k));
                acc(*b, matmul_tn(g, &val(*a).data, n, m, k));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(&tb.data).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(&ta.data).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(a, row) => {
                let c = val(*row).cols();
                let mut gr = vec![0.0; c];
                for chunk in g.chunks(c.max(1)) {
                    for (s, v) in gr.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                acc(*a, g.to_vec());
                acc(*row, gr);
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::MulConst(a, mask) => acc(*a, g.iter().zip(mask).map(|(x, m)| x * m).collect()),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(a) => acc(
                *a,
                g.iter()
                    .zip(&node.value.data)
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect(),
            ),
            Op::SliceCols(a, start) => {
                let (n, c) = (val(*a).rows(), val(*a).cols());
                let w = node.value.cols();
                let mut d = vec![0.0; n * c];
                for i in 0..n {
                    d[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut d = Vec::with_capacity(n * w);
                    for i in 0..n {
                        d.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    acc(p, d);
                    off += w;
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d
                    .chunks_mut(c.max(1))
                    .zip(g.chunks(c.max(1)))
                    .zip(node.value.data.chunks(c.max(1)))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let n = node.value.rows();
                let gm = &val(*gamma).data;
                let mut dx = vec![0.0; n * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..n {
                    let gr = &g[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_xh = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gm[j];
                        mean_dh += dh;
                        mean_dh_xh += dh * xh[j];
                        dg[j] += gr[j] * xh[j];
                        db[j] += gr[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_xh /= c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gm[j];
                        dx[i * c + j] = inv_std[i] * (dh - mean_dh - xh[j] * mean_dh_xh);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Im2Col(a, k) => {
                let (n, c) = (val(*a).rows(), val(*a).cols());
                let half = (*k / 2) as isize;
                let mut d = vec![0.0; n * c];
                for t in 0..n as isize {
                    for o in 0..*k as isize {
                        let s = t + o - half;
                        if s < 0 || s >= n as isize {
                            continue;
                        }
                        let src = (t as usize * k + o as usize) * c;
                        for j in 0..c {
                            d[s as usize * c + j] += g[src + j];
                        }
                    }
                }
                acc(*a, d);
            }
            Op::GatherRows(a, index) => {
                let (n, c) = (val(*a).rows(), val(*a).cols());
                let mut d = vec![0.0; n * c];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[r * c + j];
                    }
                }
                acc(*a, d);
            }
            Op::Mae(a, target) => {
                let n = target.len().max(1) as f64;
                acc(
                    *a,
                    val(*a)
                        .data
                        .iter()
                        .zip(target)
                        .map(|(x, y)| g[0] * (x - y).signum() * f64::from(x != y) / n)
                        .collect(),
                );
            }
            Op::Mse(a, target) => {
                let n = target.len().max(1) as f64;
                acc(
                    *a,
                    val(*a)
                        .data
                        .iter()
                        .zip(target)
                        .map(|(x, y)| g[0] * 2.0 * (x - y) / n)
                        .collect(),
                );
            }
            Op::CrossEntropy(a, ids, probs) => {
                let c = val(*a).cols();
                let n = ids.len().max(1) as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| g[0] * p / n).collect();
                for (r, &id) in ids.iter().enumerate() {
                    d[r * c + id] -= g[0] / n;
                }
                acc(*a, d);
            }
        }
    }

    /// Parameter gradients of the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => self.grads.get(i).and_then(|g| g.as_deref()).map(|g| (id, g)),
            _ => None,
        })
    }

    /// Adds the parameter gradients of the last backward pass into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g);
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
