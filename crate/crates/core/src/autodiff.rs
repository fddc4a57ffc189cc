//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`]; nodes only reference earlier
//! nodes, so the recording order is already topological and [`Tape::backward`]
//! is a single reverse sweep.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for reporting and for fault injection in gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Mul,
    Scale,
    Gelu,
    Softmax,
    LayerNorm,
    Transpose,
    SliceCols,
    ConcatCols,
    SliceRows,
    ConcatRows,
    GatherRows,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Transpose => "transpose",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 17] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Transpose,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::SliceRows,
        OpKind::ConcatRows,
        OpKind::GatherRows,
        OpKind::Sum,
        OpKind::CrossEntropy,
    ];
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) | Op::DivScalar(..) => OpKind::Scale,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Transpose(..) => OpKind::Transpose,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Sum(..) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    grad_enabled: bool,
}

/// Exact-erf GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Recorded computation. One tape per forward/backward pass; tapes are independent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` for values that do not depend on any grad-enabled leaf.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, or zeros of the right shape when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Deliberately corrupts the backward rule of one operation kind.
    /// Negative control for gradient checks; never enabled in normal use.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, grad_enabled: bool) -> Var {
        self.nodes.push(Node { value, op, grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn ge(&self, v: Var) -> bool {
        self.nodes[v.0].grad_enabled
    }

    /// A grad-enabled leaf (parameter or differentiable input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad_enabled(&self, v: Var) -> bool {
        self.ge(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2().map_err(|_| dim_err("matmul", ta, tb))?;
        let (k2, n) = tb.dims2().map_err(|_| dim_err("matmul", ta, tb))?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let ge = self.ge(a) || self.ge(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ge))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let ge = self.ge(a) || self.ge(b);
        Ok(self.push(t, Op::Add(a, b), ge))
    }

    /// Adds a bias vector `b[n]` to every row of `a[..×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = last_dim(ta);
        if tb.numel() != n {
            return Err(dim_err("add_row", ta, tb));
        }
        let bias = tb.data();
        let data = ta.data().chunks(n).flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let ge = self.ge(a) || self.ge(b);
        Ok(self.push(t, Op::AddRow(a, b), ge))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let ge = self.ge(a) || self.ge(b);
        Ok(self.push(t, Op::Mul(a, b), ge))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let ge = self.ge(a);
        self.push(t, Op::Scale(a, s), ge)
    }

    /// `a / s`, elementwise. Division rather than multiplication by `1/s`.
    pub fn div_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v / s);
        let ge = self.ge(a);
        self.push(t, Op::DivScalar(a, s), ge)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_scalar);
        let ge = self.ge(a);
        self.push(t, Op::Gelu(a), ge)
    }

    /// Row-wise softmax with max subtraction. With `causal`, row `i` of a square
    /// matrix only ranges over columns `0..=i`; masked entries are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        if causal && m != n {
            return Err(Error::Shape(format!("causal softmax needs a square matrix, got {m}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let width = if causal { i + 1 } else { n };
            let row = &ta.row(i)[..width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..i * n + width];
            let mut sum = 0.0;
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst = (v - max).exp();
                sum += *dst;
            }
            for dst in o.iter_mut() {
                *dst /= sum;
            }
        }
        let ge = self.ge(a);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Softmax(a), ge))
    }

    /// Normalizes each length-`d` vector to zero mean and unit (biased) variance,
    /// then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = last_dim(tx);
        if tg.numel() != d {
            return Err(dim_err("layer_norm", tx, tg));
        }
        if tb.numel() != d {
            return Err(dim_err("layer_norm", tx, tb));
        }
        let rows = tx.numel() / d;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let ge = self.ge(x) || self.ge(gamma) || self.ge(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ge))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let ge = self.ge(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), ge))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!("column slice {start}..{} of {m}x{n}", start + len)));
        }
        let data = (0..m).flat_map(|i| ta.row(i)[start..start + len].iter().copied()).collect();
        let ge = self.ge(a);
        Ok(self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols { x: a, start }, ge))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(dim_err("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ge = parts.iter().any(|&p| self.ge(p));
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatCols(parts.to_vec()), ge))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        if len == 0 || start + len > m {
            return Err(Error::Shape(format!("row slice {start}..{} of {m}x{n}", start + len)));
        }
        let data = ta.data()[start * n..(start + len) * n].to_vec();
        let ge = self.ge(a);
        Ok(self.push(Tensor::from_parts(vec![len, n], data), Op::SliceRows { x: a, start }, ge))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let n = last_dim(self.value(*first));
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if last_dim(t) != n {
                return Err(dim_err("concat_rows", self.value(*first), t));
            }
            rows += t.numel() / n;
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ge = parts.iter().any(|&p| self.ge(p));
        Ok(self.push(Tensor::from_parts(vec![rows, n], data), Op::ConcatRows(parts.to_vec()), ge))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, n) = tt.dims2()?;
        if ids.is_empty() {
            return Err(Error::Input("gather of zero rows".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Input(format!("index {bad} out of range for {v} rows")));
        }
        let data = ids.iter().flat_map(|&id| tt.row(id).iter().copied()).collect();
        let ge = self.ge(table);
        let op = Op::GatherRows { table, ids: ids.to_vec() };
        Ok(self.push(Tensor::from_parts(vec![ids.len(), n], data), op, ge))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ge = self.ge(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ge)
    }

    /// Mean over rows of `-log softmax(logits)[target]`, in nats.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, n) = tl.dims2()?;
        if targets.len() != m {
            return Err(Error::Input(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Input(format!("target {bad} out of range for {n} classes")));
        }
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
            for (p, &v) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let ge = self.ge(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(total / m as f64), op, ge))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        self.sweep(loss, vec![1.0])
    }

    /// Reverse sweep from any output `out`, starting from upstream gradient
    /// `seed` (same shape as `out`). Equivalent to `backward` on `sum(seed ⊙ out)`.
    pub fn backward_seeded(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if self.shape(out) != seed.shape() {
            return Err(dim_err("backward_seeded", self.value(out), seed));
        }
        self.sweep(out, seed.data().to_vec())
    }

    fn sweep(&self, loss: Var, seed: Vec<f64>) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].grad_enabled {
            grads[loss.0] = Some(seed);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad_enabled || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.ge(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        contrib(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.ge(*a) {
                    let da = matmul_a_bt(g, tb.data(), m, n, k);
                    self.accumulate(grads, *a, |s| add_into(s, &da));
                }
                if self.ge(*b) {
                    let db = matmul_at_b(ta.data(), g, m, k, n);
                    self.accumulate(grads, *b, |s| add_into(s, &db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                let n = self.value(*b).numel();
                self.accumulate(grads, *b, |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |s| {
                    for ((d, gv), bv) in s.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((d, gv), av) in s.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |s| {
                    for (d, gv) in s.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            Op::DivScalar(a, c) => {
                self.accumulate(grads, *a, |s| {
                    for (d, gv) in s.iter_mut().zip(g) {
                        *d += gv / c;
                    }
                });
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, |s| {
                    for ((d, gv), &x) in s.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * gelu_grad_scalar(x);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.shape()[1];
                self.accumulate(grads, *a, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                        for ((d, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = self.value(*gamma);
                let d = tg.numel();
                self.accumulate(grads, *x, |s| {
                    for (r, ((srow, grow), hrow)) in s.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(tg.data()).map(|(gv, gm)| gv * gm).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((dst, dhv), hv) in srow.iter_mut().zip(&dh).zip(hrow) {
                            *dst += rstd[r] * (dhv - mean_dh - hv * mean_dh_h);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |s| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((dst, gv), hv) in s.iter_mut().zip(grow).zip(hrow) {
                            *dst += gv * hv;
                        }
                    }
                });
                self.accumulate(grads, *beta, |s| {
                    for grow in g.chunks(d) {
                        add_into(s, grow);
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                self.accumulate(grads, *a, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                self.accumulate(grads, *x, |s| {
                    for (srow, grow) in s.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut srow[*start..start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.accumulate(grads, p, |s| {
                        for (srow, grow) in s.chunks_mut(w).zip(g.chunks(n)) {
                            add_into(srow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.shape()[1];
                self.accumulate(grads, *x, |s| add_into(&mut s[start * n..start * n + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let n = node.value.shape()[1];
                self.accumulate(grads, *table, |s| {
                    for (&id, grow) in ids.iter().zip(g.chunks(n)) {
                        add_into(&mut s[id * n..(id + 1) * n], grow);
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|d| *d += gv));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let m = targets.len();
                let n = probs.len() / m;
                let scale = g[0] / m as f64;
                self.accumulate(grads, *logits, |s| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[i * n + j] += scale * (probs[i * n + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let b = tape.constant(t(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &t(&[&[3.0, 4.0], &[5.0, 6.0]]));
    }

    #[test]
    fn matmul_row_times_column() {
        // 1*3 + 2*4 by the triple-loop definition
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let b = tape.constant(t(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([3, 2]));
        let b = tape.constant(t(&[&[1.5, -2.0, 7.0], &[0.25, 3.0, -1.0]]));
        let c = tape.matmul(z, b).unwrap();
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[0.0, 0.0]]));
        let s = tape.softmax_rows(a, false).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        let row = [1.0f64, 2.0, 3.0];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        let expected: Vec<f64> = row.iter().map(|v| v.exp() / denom).collect();
        assert!((expected[0] - 0.09003057).abs() < 1e-8);
        assert!((expected[1] - 0.24472847).abs() < 1e-8);
        assert!((expected[2] - 0.66524096).abs() < 1e-8);

        let mut tape = Tape::new();
        let a = tape.constant(t(&[&row]));
        let s = tape.softmax_rows(a, false).unwrap();
        for (got, want) in tape.value(s).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_softmax_masks_exactly() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[5.0, 1.0, 2.0], &[0.0, 3.0, -1.0], &[1.0, 1.0, 1.0]]));
        let s = tape.softmax_rows(a, true).unwrap();
        let v = tape.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.get2(1, 2), 0.0);
        assert!((v.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[2.5, 2.5, 2.5, 2.5]]));
        let g = tape.constant(Tensor::ones([4]));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_values() {
        // mean 2, variance 1, so (x-2)/sqrt(1+eps)
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 3.0]]));
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-10 && (v[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_beta_is_additive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.3, -1.2, 4.0], &[1.0, 1.5, -0.5]]));
        let g = tape.constant(Tensor::ones([3]));
        let z = tape.constant(Tensor::zeros([3]));
        let beta = Tensor::new([3], vec![0.5, -2.0, 1.25]).unwrap();
        let bv = tape.constant(beta.clone());
        let y0 = tape.layer_norm(x, g, z, 1e-5).unwrap();
        let y1 = tape.layer_norm(x, g, bv, 1e-5).unwrap();
        let (y0, y1) = (tape.value(y0).clone(), tape.value(y1).clone());
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(y1.get2(r, c), y0.get2(r, c) + beta.data()[c]);
            }
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        // 0.5 * (1 + erf(1/sqrt 2)) = Phi(1) = 0.8413447460685429
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn sum_gives_ones_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[&[1.0, 2.0]]));
        let b = tape.constant(t(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones([2, 2]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_leaf_accumulates() {
        // loss = sum(x*x) -> grad 2x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, -3.0]]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -6.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros([3, 8]));
        let ce = tape.cross_entropy(l, &[0, 7, 3]).unwrap();
        assert!((tape.value(ce).data()[0] - 8f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(l, &[8, 0, 0]).is_err());
    }
}
