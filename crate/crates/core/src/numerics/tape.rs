//! Reverse-mode differentiation over an eagerly evaluated operation tape.
//!
//! Every primitive computes its forward value immediately and records
//! whatever the backward pass needs. `Tape::backward` walks the record in
//! reverse creation order, so each node's gradient is complete before it is
//! propagated to its inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Validity mask over the first two axes `[batch, len]` of a padded tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    lengths: Vec<usize>,
    max_len: usize,
}

impl Mask {
    pub fn from_lengths(lengths: &[usize], max_len: usize) -> Self {
        assert!(lengths.iter().all(|&l| l <= max_len));
        Mask {
            lengths: lengths.to_vec(),
            max_len,
        }
    }

    pub fn full(batch: usize, len: usize) -> Self {
        Mask::from_lengths(&vec![len; batch], len)
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// One flag per `(b, t)` row, row-major.
    pub fn flags(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.batch() * self.max_len);
        for &l in &self.lengths {
            out.extend((0..self.max_len).map(|t| t < l));
        }
        out
    }

    pub fn count(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Mask after a stride-2 "same" downsampling along the length axis.
    pub fn halved(&self) -> Mask {
        Mask {
            lengths: self.lengths.iter().map(|l| l.div_ceil(2)).collect(),
            max_len: self.max_len.div_ceil(2),
        }
    }
}

/// Behaviour switches for a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeMode {
    /// Dropout active and batch normalization in batch-statistics mode.
    pub training: bool,
    /// Forces every dropout rate to zero.
    pub deterministic: bool,
    /// Fail on the first non-finite value.
    pub strict: bool,
    pub seed: u64,
}

impl TapeMode {
    pub fn inference() -> Self {
        TapeMode {
            training: false,
            deterministic: true,
            strict: true,
            seed: 0,
        }
    }

    pub fn training(seed: u64) -> Self {
        TapeMode {
            training: true,
            deterministic: true,
            strict: true,
            seed,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulConst(Var, Vec<f64>),
    MaskRows(Var, Vec<bool>),
    GatherRows(Var, Vec<Option<usize>>),
    Reshape(Var),
    Matmul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Conv1d {
        x: Var,
        w: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        valid: Vec<bool>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    GruStep {
        x: Var,
        h: Var,
        wx: Var,
        wh: Var,
        bx: Var,
        bh: Var,
        r: Vec<f64>,
        z: Vec<f64>,
        n: Vec<f64>,
        hn: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Mae {
        pred: Var,
        target: Var,
        weights: Vec<f64>,
        count: f64,
    },
    Mse {
        pred: Var,
        target: Var,
        weights: Vec<f64>,
        count: f64,
    },
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MulConst(..) => "mul_const",
            Op::MaskRows(..) => "mask_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Matmul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Attention { .. } => "attention",
            Op::GruStep { .. } => "gru_step",
            Op::Dropout(..) => "dropout",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mae { .. } => "mae",
            Op::Mse { .. } => "mse",
            Op::StopGradient => "stop_gradient",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::MaskRows(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Dropout(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Conv1d { x, w } | Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::GruStep {
                x, h, wx, wh, bx, bh, ..
            } => vec![*x, *h, *wx, *wh, *bx, *bh],
            Op::Concat(vs) => vs.clone(),
            Op::Mae { pred, target, .. } | Op::Mse { pred, target, .. } => vec![*pred, *target],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `n` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, n: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n])
    }
}

/// Batch statistics computed by a training-mode batch-normalization call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, for running-statistics updates.
    pub var: Vec<f64>,
}

pub enum NormStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

pub struct Tape {
    nodes: Vec<Node>,
    mode: TapeMode,
    rng: ChaCha8Rng,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new(mode: TapeMode) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(mode.seed),
            mode,
        }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Direct inputs of the primitive that produced `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Attention weights `[batch, heads, q_len, k_len]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, heads, probs, .. } => {
                let qs = self.shape(*q);
                let ks = self.shape(*k);
                Tensor::new(vec![qs[0], *heads, qs[1], ks[1]], probs.clone()).ok()
            }
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.mode.strict && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            Op::StopGradient => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// `x[..., n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(b) != [n] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            add_into(row, &bv);
        }
        self.push(out, Op::AddBias(x, b))
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(shape_err("mul_const", self.shape(x), &[c.len()]));
        }
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&c) {
            *o *= m;
        }
        self.push(out, Op::MulConst(x, c))
    }

    /// Zeroes every padded `(b, t)` row of a `[B, T, ...]` tensor.
    pub fn mask_rows(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 || s[0] != mask.batch() || s[1] != mask.max_len() {
            return Err(shape_err(
                "mask_rows",
                s,
                &[mask.batch(), mask.max_len()],
            ));
        }
        let flags = mask.flags();
        let width = self.value(x).numel() / flags.len();
        let mut out = self.value(x).clone();
        for (row, keep) in out.data_mut().chunks_mut(width).zip(&flags) {
            if !keep {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.push(out, Op::MaskRows(x, flags))
    }

    /// Builds a tensor whose row `r` (over the trailing axis) is row
    /// `src[r]` of `x`, or zeros for `None`.
    pub fn gather_rows(
        &mut self,
        x: Var,
        src: Vec<Option<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let n_rows = xv.numel() / c;
        let n_out: usize = out_shape.iter().product();
        if out_shape.last() != Some(&c) || n_out != src.len() * c {
            return Err(shape_err("gather_rows", xv.shape(), &out_shape));
        }
        let mut data = vec![0.0; n_out];
        for (r, s) in src.iter().enumerate() {
            if let Some(s) = *s {
                if s >= n_rows {
                    return Err(Error::invalid(format!(
                        "gather_rows: source row {s} out of range 0..{n_rows}"
                    )));
                }
                data[r * c..(r + 1) * c].copy_from_slice(xv.row(s));
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::GatherRows(x, src))
    }

    /// Table lookup: `table[n, d]` indexed by `ids` gives `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(shape_err("embedding", ts, ids_shape));
        }
        let (n, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::UnknownLabel {
                kind: "embedding",
                id: bad,
                limit: n,
            });
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        self.gather_rows(table, ids.iter().map(|&i| Some(i)).collect(), shape)
    }

    /// `[B, C] -> [B, L, C]` by repetition.
    pub fn broadcast_rows(&mut self, x: Var, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("broadcast_rows", &s, &[len]));
        }
        let src = (0..s[0]).flat_map(|b| (0..len).map(move |_| Some(b))).collect();
        self.gather_rows(x, src, vec![s[0], len, s[1]])
    }

    /// `[...] -> [B, ...]` by repetition.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rows = self.value(x).numel() / self.value(x).last_dim();
        let src = (0..batch).flat_map(|_| (0..rows).map(Some)).collect();
        let mut shape = vec![batch];
        shape.extend(&s);
        self.gather_rows(x, src, shape)
    }

    /// `[B, T, C] -> [B, C]` at time `t`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || t >= s[1] {
            return Err(shape_err("select_time", &s, &[t]));
        }
        let src = (0..s[0]).map(|b| Some(b * s[1] + t)).collect();
        self.gather_rows(x, src, vec![s[0], s[2]])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// `x[..., k] @ w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != k {
            return Err(shape_err("matmul", &xs, &ws));
        }
        let n = ws[1];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let rows = xv.len() / k;
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let out = &mut data[r * n..(r + 1) * n];
            for (kk, &a) in xv[r * k..(r + 1) * k].iter().enumerate() {
                if a != 0.0 {
                    for (o, &b) in out.iter_mut().zip(&wv[kk * n..(kk + 1) * n]) {
                        *o += a * b;
                    }
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Matmul(x, w))
    }

    /// Affine map `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x))
    }

    /// Same-padded 1-D convolution along time: `x[B, T, cin]`, `w[k, cin, cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || ws[0] % 2 == 0 {
            return Err(shape_err("conv1d", &xs, &ws));
        }
        let (b, t, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[2]);
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut data = vec![0.0; b * t * cout];
        for bi in 0..b {
            for ti in 0..t {
                let out = &mut data[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                for ki in 0..k {
                    let s = ti + ki;
                    if s < pad || s - pad >= t {
                        continue;
                    }
                    let xrow = &xv[(bi * t + s - pad) * cin..(bi * t + s - pad + 1) * cin];
                    for (ci, &a) in xrow.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let wrow = &wv[(ki * cin + ci) * cout..(ki * cin + ci + 1) * cout];
                        for (o, &wv) in out.iter_mut().zip(wrow) {
                            *o += a * wv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, t, cout], data)?;
        self.push(out, Op::Conv1d { x, w })
    }

    /// 2-D convolution over `x[B, T, F, cin]` with `w[kt, kf, cin, cout]`,
    /// padding `k / 2` and the given stride. Output extents are
    /// `ceil(T / stride)` for kernel 3, stride 2.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != xs[3] || stride == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let (b, t, f, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kt, kf, cout) = (ws[0], ws[1], ws[3]);
        let (pt, pf) = (kt / 2, kf / 2);
        let to = (t + 2 * pt - kt) / stride + 1;
        let fo = (f + 2 * pf - kf) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut data = vec![0.0; b * to * fo * cout];
        for bi in 0..b {
            for i in 0..to {
                for j in 0..fo {
                    let o0 = ((bi * to + i) * fo + j) * cout;
                    let out = &mut data[o0..o0 + cout];
                    for di in 0..kt {
                        let si = i * stride + di;
                        if si < pt || si - pt >= t {
                            continue;
                        }
                        for dj in 0..kf {
                            let sj = j * stride + dj;
                            if sj < pf || sj - pf >= f {
                                continue;
                            }
                            let x0 = ((bi * t + si - pt) * f + sj - pf) * cin;
                            for ci in 0..cin {
                                let a = xv[x0 + ci];
                                if a == 0.0 {
                                    continue;
                                }
                                let w0 = ((di * kf + dj) * cin + ci) * cout;
                                for (o, &wv) in out.iter_mut().zip(&wv[w0..w0 + cout]) {
                                    *o += a * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, to, fo, cout], data)?;
        self.push(out, Op::Conv2d { x, w, stride })
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        let mut xhat = vec![0.0; out.numel()];
        let mut inv_std = Vec::with_capacity(out.numel() / c);
        for (row, xh) in out.data_mut().chunks_mut(c).zip(xhat.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            for i in 0..c {
                xh[i] = (row[i] - mean) * is;
                row[i] = xh[i] * g[i] + be[i];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Batch normalization over every valid row of `x[B, T, ..., C]`.
    ///
    /// `mask` marks valid `(b, t)` positions; padded rows come out as zeros
    /// and never contribute to the statistics. Returns batch statistics when
    /// `stats` is [`NormStats::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mask: &Mask,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if self.shape(gamma) != [c]
            || self.shape(beta) != [c]
            || xs.len() < 3
            || xs[0] != mask.batch()
            || xs[1] != mask.max_len()
        {
            return Err(shape_err("batch_norm", &xs, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / c;
        let per_t = rows / (xs[0] * xs[1]);
        let valid: Vec<bool> = mask
            .flags()
            .into_iter()
            .flat_map(|f| std::iter::repeat(f).take(per_t))
            .collect();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let n = valid.iter().filter(|v| **v).count();
                if n == 0 {
                    return Err(Error::invalid("batch_norm: no valid rows"));
                }
                let mut mean = vec![0.0; c];
                for (row, _) in xv.chunks(c).zip(&valid).filter(|(_, v)| **v) {
                    add_into(&mut mean, row);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for (row, _) in xv.chunks(c).zip(&valid).filter(|(_, v)| **v) {
                    for i in 0..c {
                        var[i] += (row[i] - mean[i]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, Some(n))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", &xs, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            if !valid[r] {
                continue;
            }
            for i in 0..c {
                let xh = (xv[r * c + i] - mean[i]) * inv_std[i];
                xhat[r * c + i] = xh;
                data[r * c + i] = xh * g[i] + be[i];
            }
        }
        let out = Tensor::new(xs, data)?;
        let report = batch_stats.map(|n| BatchStats {
            var: var
                .iter()
                .map(|v| if n > 1 { v * n as f64 / (n - 1) as f64 } else { *v })
                .collect(),
            mean: mean.clone(),
        });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                valid,
                xhat,
                inv_std,
                batch_stats: batch_stats.is_some(),
            },
        )?;
        Ok((v, report))
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `q[B, Lq, heads*dk]`, `k[B, Lk, heads*dk]`, `v[B, Lk, heads*dv]`;
    /// keys outside `key_mask` get zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&Mask>,
    ) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() != 3
            || ks.len() != 3
            || vs.len() != 3
            || qs[0] != ks[0]
            || ks[0] != vs[0]
            || ks[1] != vs[1]
            || qs[2] != ks[2]
            || heads == 0
            || qs[2] % heads != 0
            || vs[2] % heads != 0
        {
            return Err(shape_err("attention", &qs, &ks));
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        let (dk, dv) = (qs[2] / heads, vs[2] / heads);
        if let Some(m) = key_mask {
            if m.batch() != b || m.max_len() != lk {
                return Err(shape_err("attention", &qs, &[m.batch(), m.max_len()]));
            }
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![0.0; b * heads * lq * lk];
        let mut data = vec![0.0; b * lq * heads * dv];
        for bi in 0..b {
            let valid_k = key_mask.map_or(lk, |m| m.lengths()[bi]);
            if valid_k == 0 {
                return Err(Error::invalid("attention: item with no valid keys"));
            }
            for h in 0..heads {
                for i in 0..lq {
                    let p0 = ((bi * heads + h) * lq + i) * lk;
                    let prow = &mut probs[p0..p0 + lk];
                    let qrow = &qv[(bi * lq + i) * qs[2] + h * dk..][..dk];
                    for j in 0..valid_k {
                        let krow = &kv[(bi * lk + j) * ks[2] + h * dk..][..dk];
                        prow[j] = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut prow[..valid_k]);
                    let out = &mut data[(bi * lq + i) * heads * dv + h * dv..][..dv];
                    for j in 0..valid_k {
                        let vrow = &vv[(bi * lk + j) * vs[2] + h * dv..][..dv];
                        let p = prow[j];
                        for (o, x) in out.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, lq, heads * dv], data)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// One gated-recurrent-unit step with gates ordered `[reset, update, new]`:
    /// `x[B, I]`, `h[B, G]`, `wx[I, 3G]`, `wh[G, 3G]`, `bx[3G]`, `bh[3G]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_step(
        &mut self,
        x: Var,
        h: Var,
        wx: Var,
        wh: Var,
        bx: Var,
        bh: Var,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let hs = self.shape(h).to_vec();
        if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] {
            return Err(shape_err("gru_step", &xs, &hs));
        }
        let (b, i_dim, g) = (xs[0], xs[1], hs[1]);
        if self.shape(wx) != [i_dim, 3 * g]
            || self.shape(wh) != [g, 3 * g]
            || self.shape(bx) != [3 * g]
            || self.shape(bh) != [3 * g]
        {
            return Err(shape_err("gru_step", self.shape(wx), self.shape(wh)));
        }
        let gx = matmul_rows(self.value(x).data(), self.value(wx).data(), b, i_dim, 3 * g);
        let gh = matmul_rows(self.value(h).data(), self.value(wh).data(), b, g, 3 * g);
        let bxv = self.value(bx).data();
        let bhv = self.value(bh).data();
        let hv = self.value(h).data();
        let mut r = vec![0.0; b * g];
        let mut z = vec![0.0; b * g];
        let mut n = vec![0.0; b * g];
        let mut hn = vec![0.0; b * g];
        let mut data = vec![0.0; b * g];
        for bi in 0..b {
            let gxr = &gx[bi * 3 * g..(bi + 1) * 3 * g];
            let ghr = &gh[bi * 3 * g..(bi + 1) * 3 * g];
            for j in 0..g {
                let idx = bi * g + j;
                r[idx] = sigmoid(gxr[j] + bxv[j] + ghr[j] + bhv[j]);
                z[idx] = sigmoid(gxr[g + j] + bxv[g + j] + ghr[g + j] + bhv[g + j]);
                hn[idx] = ghr[2 * g + j] + bhv[2 * g + j];
                n[idx] = (gxr[2 * g + j] + bxv[2 * g + j] + r[idx] * hn[idx]).tanh();
                data[idx] = (1.0 - z[idx]) * n[idx] + z[idx] * hv[idx];
            }
        }
        let out = Tensor::new(vec![b, g], data)?;
        self.push(
            out,
            Op::GruStep {
                x,
                h,
                wx,
                wh,
                bx,
                bh,
                r,
                z,
                n,
                hn,
            },
        )
    }

    /// Inverted dropout. Identity when the rate is zero, outside training, or
    /// in deterministic mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 || !self.mode.training || self.mode.deterministic {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout(x, mask))
    }

    /// Concatenation along the trailing axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    fn loss_weights(&self, op: &'static str, pred: Var, target: Var, mask: Option<&Mask>) -> Result<Vec<f64>> {
        self.same_shape(op, pred, target)?;
        let n = self.value(pred).numel();
        match mask {
            None => Ok(vec![1.0; n]),
            Some(m) => {
                let s = self.shape(pred);
                if s.len() < 2 || s[0] != m.batch() || s[1] != m.max_len() {
                    return Err(shape_err(op, s, &[m.batch(), m.max_len()]));
                }
                let flags = m.flags();
                let per = n / flags.len();
                Ok(flags
                    .iter()
                    .flat_map(|&f| std::iter::repeat(if f { 1.0 } else { 0.0 }).take(per))
                    .collect())
            }
        }
    }

    /// Mean absolute error over the cells selected by `mask`.
    pub fn mae(&mut self, pred: Var, target: Var, mask: Option<&Mask>) -> Result<Var> {
        let weights = self.loss_weights("mae", pred, target, mask)?;
        let count: f64 = weights.iter().sum();
        if count == 0.0 {
            return Err(Error::invalid("mae: no valid cells"));
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .zip(&weights)
            .map(|((p, t), w)| w * (p - t).abs())
            .sum();
        self.push(
            Tensor::scalar(s / count),
            Op::Mae {
                pred,
                target,
                weights,
                count,
            },
        )
    }

    /// Mean squared error over the cells selected by `mask`.
    pub fn mse(&mut self, pred: Var, target: Var, mask: Option<&Mask>) -> Result<Var> {
        let weights = self.loss_weights("mse", pred, target, mask)?;
        let count: f64 = weights.iter().sum();
        if count == 0.0 {
            return Err(Error::invalid("mse: no valid cells"));
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .zip(&weights)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum();
        self.push(
            Tensor::scalar(s / count),
            Op::Mse {
                pred,
                target,
                weights,
                count,
            },
        )
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        add_into(&mut gb, row);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MulConst(x, c) => {
                self.accumulate(grads, *x, g.iter().zip(c).map(|(g, c)| g * c).collect())
            }
            Op::MaskRows(x, flags) => {
                let width = g.len() / flags.len();
                let mut gx = g.to_vec();
                for (row, keep) in gx.chunks_mut(width).zip(flags) {
                    if !keep {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows(x, src) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let c = xv.last_dim();
                    let mut gx = vec![0.0; xv.numel()];
                    for (r, s) in src.iter().enumerate() {
                        if let Some(s) = *s {
                            add_into(&mut gx[s * c..(s + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Matmul(x, w) => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let rows = xv.len() / k;
                if self.wants(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            gx[r * k + kk] = grow
                                .iter()
                                .zip(&wv[kk * n..(kk + 1) * n])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; wv.len()];
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let a = xv[r * k + kk];
                            if a != 0.0 {
                                for (o, gg) in gw[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                    *o += a * gg;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..c {
                        out[i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv1d { x, w } => self.conv1d_backward(*x, *w, g, grads),
            Op::Conv2d { x, w, stride } => self.conv2d_backward(*x, *w, *stride, g, grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let gm = self.value(*gamma).data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (r, ((grow, xh), out)) in g
                    .chunks(c)
                    .zip(xhat.chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for i in 0..c {
                        let d = grow[i] * gm[i];
                        s1 += d;
                        s2 += d * xh[i];
                        gg[i] += grow[i] * xh[i];
                        gb[i] += grow[i];
                    }
                    let cf = c as f64;
                    for i in 0..c {
                        let d = grow[i] * gm[i];
                        out[i] = inv_std[r] / cf * (cf * d - s1 - xh[i] * s2);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                valid,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = node.value.last_dim();
                let gm = self.value(*gamma).data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                let mut n = 0usize;
                for ((grow, xh), _) in g.chunks(c).zip(xhat.chunks(c)).zip(valid).filter(|(_, v)| **v) {
                    n += 1;
                    for i in 0..c {
                        gg[i] += grow[i] * xh[i];
                        gb[i] += grow[i];
                        let d = grow[i] * gm[i];
                        s1[i] += d;
                        s2[i] += d * xh[i];
                    }
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, ok) in valid.iter().enumerate() {
                        if !ok {
                            continue;
                        }
                        for i in 0..c {
                            let d = g[r * c + i] * gm[i];
                            gx[r * c + i] = if *batch_stats {
                                inv_std[i] / nf * (nf * d - s1[i] - xhat[r * c + i] * s2[i])
                            } else {
                                d * inv_std[i]
                            };
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::GruStep {
                x,
                h,
                wx,
                wh,
                bx,
                bh,
                r,
                z,
                n,
                hn,
            } => {
                let hv = self.value(*h).data();
                let xv = self.value(*x).data();
                let hs = self.shape(*h);
                let (b, gdim) = (hs[0], hs[1]);
                let idim = self.shape(*x)[1];
                let mut gx_gate = vec![0.0; b * 3 * gdim];
                let mut gh_gate = vec![0.0; b * 3 * gdim];
                let mut dh = vec![0.0; b * gdim];
                for bi in 0..b {
                    for j in 0..gdim {
                        let i = bi * gdim + j;
                        let dn = g[i] * (1.0 - z[i]);
                        let dz = g[i] * (hv[i] - n[i]);
                        dh[i] = g[i] * z[i];
                        let dan = dn * (1.0 - n[i] * n[i]);
                        let dr = dan * hn[i];
                        let dar = dr * r[i] * (1.0 - r[i]);
                        let daz = dz * z[i] * (1.0 - z[i]);
                        let o = bi * 3 * gdim;
                        gx_gate[o + j] = dar;
                        gx_gate[o + gdim + j] = daz;
                        gx_gate[o + 2 * gdim + j] = dan;
                        gh_gate[o + j] = dar;
                        gh_gate[o + gdim + j] = daz;
                        gh_gate[o + 2 * gdim + j] = dan * r[i];
                    }
                }
                let wxv = self.value(*wx).data();
                let whv = self.value(*wh).data();
                if self.wants(*x) {
                    self.accumulate(grads, *x, matmul_rows_t(&gx_gate, wxv, b, 3 * gdim, idim));
                }
                if self.wants(*h) {
                    let back = matmul_rows_t(&gh_gate, whv, b, 3 * gdim, gdim);
                    self.accumulate(grads, *h, back.iter().zip(&dh).map(|(a, b)| a + b).collect());
                }
                if self.wants(*wx) {
                    self.accumulate(grads, *wx, outer_sum(xv, &gx_gate, b, idim, 3 * gdim));
                }
                if self.wants(*wh) {
                    self.accumulate(grads, *wh, outer_sum(hv, &gh_gate, b, gdim, 3 * gdim));
                }
                if self.wants(*bx) {
                    self.accumulate(grads, *bx, column_sum(&gx_gate, 3 * gdim));
                }
                if self.wants(*bh) {
                    self.accumulate(grads, *bh, column_sum(&gh_gate, 3 * gdim));
                }
            }
            Op::Dropout(x, mask) => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect())
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Mae {
                pred,
                target,
                weights,
                count,
            } => {
                let d: Vec<f64> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(self.value(*target).data())
                    .zip(weights)
                    .map(|((p, t), w)| {
                        let s = if p > t {
                            1.0
                        } else if p < t {
                            -1.0
                        } else {
                            0.0
                        };
                        g[0] * w * s / count
                    })
                    .collect();
                if self.wants(*target) {
                    self.accumulate(grads, *target, d.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *pred, d);
            }
            Op::Mse {
                pred,
                target,
                weights,
                count,
            } => {
                let d: Vec<f64> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(self.value(*target).data())
                    .zip(weights)
                    .map(|((p, t), w)| g[0] * w * 2.0 * (p - t) / count)
                    .collect();
                if self.wants(*target) {
                    self.accumulate(grads, *target, d.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *pred, d);
            }
        }
        Ok(())
    }

    fn conv1d_backward(&self, x: Var, w: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (b, t, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[2]);
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut gx = vec![0.0; if want_x { xv.len() } else { 0 }];
        let mut gw = vec![0.0; if want_w { wv.len() } else { 0 }];
        for bi in 0..b {
            for ti in 0..t {
                let grow = &g[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                for ki in 0..k {
                    let s = ti + ki;
                    if s < pad || s - pad >= t {
                        continue;
                    }
                    let xo = (bi * t + s - pad) * cin;
                    for ci in 0..cin {
                        let wo = (ki * cin + ci) * cout;
                        if want_x {
                            gx[xo + ci] += grow
                                .iter()
                                .zip(&wv[wo..wo + cout])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                        if want_w {
                            let a = xv[xo + ci];
                            if a != 0.0 {
                                for (o, gg) in gw[wo..wo + cout].iter_mut().zip(grow) {
                                    *o += a * gg;
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, gx);
        }
        if want_w {
            self.accumulate(grads, w, gw);
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, stride: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (b, t, f, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kt, kf, cout) = (ws[0], ws[1], ws[3]);
        let (pt, pf) = (kt / 2, kf / 2);
        let os = node_shape_conv2d(t, f, kt, kf, stride);
        let (to, fo) = os;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut gx = vec![0.0; if want_x { xv.len() } else { 0 }];
        let mut gw = vec![0.0; if want_w { wv.len() } else { 0 }];
        for bi in 0..b {
            for i in 0..to {
                for j in 0..fo {
                    let o0 = ((bi * to + i) * fo + j) * cout;
                    let grow = &g[o0..o0 + cout];
                    for di in 0..kt {
                        let si = i * stride + di;
                        if si < pt || si - pt >= t {
                            continue;
                        }
                        for dj in 0..kf {
                            let sj = j * stride + dj;
                            if sj < pf || sj - pf >= f {
                                continue;
                            }
                            let x0 = ((bi * t + si - pt) * f + sj - pf) * cin;
                            for ci in 0..cin {
                                let w0 = ((di * kf + dj) * cin + ci) * cout;
                                if want_x {
                                    gx[x0 + ci] += grow
                                        .iter()
                                        .zip(&wv[w0..w0 + cout])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                                if want_w {
                                    let a = xv[x0 + ci];
                                    if a != 0.0 {
                                        for (o, gg) in gw[w0..w0 + cout].iter_mut().zip(grow) {
                                            *o += a * gg;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, gx);
        }
        if want_w {
            self.accumulate(grads, w, gw);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let qs = self.shape(q);
        let ks = self.shape(k);
        let vs = self.shape(v);
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        let (dk, dv) = (qs[2] / heads, vs[2] / heads);
        let scale = 1.0 / (dk as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; lk];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..lq {
                    let p0 = ((bi * heads + h) * lq + i) * lk;
                    let prow = &probs[p0..p0 + lk];
                    let grow = &g[(bi * lq + i) * heads * dv + h * dv..][..dv];
                    for j in 0..lk {
                        let vo = (bi * lk + j) * vs[2] + h * dv;
                        dp[j] = grow.iter().zip(&vv[vo..vo + dv]).map(|(a, b)| a * b).sum();
                        if prow[j] != 0.0 {
                            for (o, gg) in gv[vo..vo + dv].iter_mut().zip(grow) {
                                *o += prow[j] * gg;
                            }
                        }
                    }
                    let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qo = (bi * lq + i) * qs[2] + h * dk;
                    for j in 0..lk {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let ko = (bi * lk + j) * ks[2] + h * dk;
                        for d in 0..dk {
                            gq[qo + d] += ds * kv[ko + d];
                            gk[ko + d] += ds * qv[qo + d];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

fn node_shape_conv2d(t: usize, f: usize, kt: usize, kf: usize, stride: usize) -> (usize, usize) {
    ((t + 2 * (kt / 2) - kt) / stride + 1, (f + 2 * (kf / 2) - kf) / stride + 1)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `a[rows, k] @ b[k, n]`.
fn matmul_rows(a: &[f64], b: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let o = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let av = a[r * k + kk];
            if av != 0.0 {
                for (x, y) in o.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                    *x += av * y;
                }
            }
        }
    }
    out
}

/// `a[rows, n] @ b[k, n]^T`.
fn matmul_rows_t(a: &[f64], b: &[f64], rows: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * k];
    for r in 0..rows {
        let ar = &a[r * n..(r + 1) * n];
        for kk in 0..k {
            out[r * k + kk] = ar.iter().zip(&b[kk * n..(kk + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[rows, k]^T @ g[rows, n]`.
fn outer_sum(a: &[f64], g: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for r in 0..rows {
        for kk in 0..k {
            let av = a[r * k + kk];
            if av != 0.0 {
                for (o, gg) in out[kk * n..(kk + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                    *o += av * gg;
                }
            }
        }
    }
    out
}

fn column_sum(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in g.chunks(n) {
        add_into(&mut out, row);
    }
    out
}
