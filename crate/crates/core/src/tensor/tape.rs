use std::sync::Arc;

use super::{counter_uniform, log_sum_exp_slice, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker for a gathered position that reads as zero (padding).
const PAD: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Reshape(usize),
    Gather(usize, Arc<[usize]>),
    Concat(Vec<usize>, usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LogSumExp(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(usize, Vec<f64>),
    Embedding(usize, Arc<[usize]>),
    CrossEntropy {
        logp: usize,
        targets: Vec<usize>,
        smoothing: f64,
    },
    Sum(usize),
    LogAddTransitions(usize, Arc<[bool]>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Embedding(a, _) => vec![*a],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::LogSumExp(a, _)
            | Op::Dropout(a, _)
            | Op::Sum(a)
            | Op::LogAddTransitions(a, _) => vec![*a],
            Op::CrossEntropy { logp, .. } => vec![*logp],
            Op::Concat(parts, _) => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in creation order; node indices are a topological order.
///
/// Gradients of leaves accumulate across calls to [`Tape::backward`] until
/// [`Tape::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `c = a·b + beta·c` with arbitrary strides, row-major `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the slice lengths are checked above and every stride pair
    // addresses an m×k (resp. k×n) window inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn zeros_like(slot: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; n])
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf sharing storage with the caller's tensor.
    pub fn param(&mut self, t: Arc<Tensor>) -> Var {
        self.push_leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Arc::new(t), requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), false)
    }

    /// Non-trainable leaf sharing storage with the caller's tensor.
    pub fn shared_constant(&mut self, t: Arc<Tensor>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn check_nan(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        if vars.iter().any(|v| self.nodes[v.0].value.has_nan()) {
            return Err(TensorError::Numeric { op });
        }
        Ok(())
    }

    fn require_rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_rank2("matmul", a)?;
        let (k2, n) = self.require_rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        self.check_nan("matmul", &[a, b])?;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0)))
    }

    /// `[m,k] · [n,k]ᵀ → [m,n]`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_rank2("matmul_bt", a)?;
        let (n, k2) = self.require_rank2("matmul_bt", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_bt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        self.check_nan("matmul_bt", &[a, b])?;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a.0, b.0)))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        self.check_nan(name, &[a, b])?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.shape(bias) != [n] {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        self.check_nan("add_row", &[a, bias])?;
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a.0, bias.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_nan("scale", &[a])?;
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a.0, c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_nan("relu", &[a])?;
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Relu(a.0)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a.0)))
    }

    /// `out.flat[i] = a.flat[index[i]]`; `None` reads as zero.
    pub fn gather(&mut self, a: Var, index: &[Option<usize>], shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(TensorError::DataLength {
                shape,
                len: index.len(),
            });
        }
        let src = self.value(a).data();
        let mut raw = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for ix in index {
            match *ix {
                Some(i) if i >= src.len() => {
                    return Err(TensorError::Index {
                        op: "gather",
                        index: i,
                        len: src.len(),
                    })
                }
                Some(i) => {
                    raw.push(i);
                    data.push(src[i]);
                }
                None => {
                    raw.push(PAD);
                    data.push(0.0);
                }
            }
        }
        self.check_nan("gather", &[a])?;
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather(a.0, raw.into())))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_rank2("transpose", a)?;
        let index: Vec<_> = (0..c)
            .flat_map(|j| (0..r).map(move |i| Some(i * c + j)))
            .collect();
        self.gather(a, &index, vec![c, r])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.require_rank2("slice_cols", a)?;
        if start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let index: Vec<_> = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| Some(i * c + j)))
            .collect();
        self.gather(a, &index, vec![r, len])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.require_rank2("slice_rows", a)?;
        if start + len > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let index: Vec<_> = (start * c..(start + len) * c).map(Some).collect();
        self.gather(a, &index, vec![len, c])
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        split_axis(&base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        self.check_nan("concat", parts)?;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(ids, axis)))
    }

    fn axis_map(
        &mut self,
        name: &'static str,
        a: Var,
        axis: usize,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> Result<Tensor> {
        self.check_nan(name, &[a])?;
        let t = self.value(a);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        let mut out = vec![0.0; t.len()];
        let mut lane = vec![0.0; n];
        let mut res = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (k, l) in lane.iter_mut().enumerate() {
                    *l = t.data()[(o * n + k) * inner + i];
                }
                f(&lane, &mut res);
                for (k, r) in res.iter().enumerate() {
                    out[(o * n + k) * inner + i] = *r;
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.axis_map("softmax", a, axis, |x, y| {
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = (xi - m).exp();
                s += *yi;
            }
            y.iter_mut().for_each(|v| *v /= s);
        })?;
        Ok(self.push(t, Op::Softmax(a.0, axis)))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.axis_map("log_softmax", a, axis, |x, y| {
            let lse = log_sum_exp_slice(x);
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = xi - lse;
            }
        })?;
        Ok(self.push(t, Op::LogSoftmax(a.0, axis)))
    }

    /// Reduces `axis` away.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_nan("log_sum_exp", &[a])?;
        let t = self.value(a);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let mut lane = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (k, l) in lane.iter_mut().enumerate() {
                    *l = t.data()[(o * n + k) * inner + i];
                }
                out[o * inner + i] = log_sum_exp_slice(&lane);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSumExp(a.0, axis)))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        self.check_nan("layer_norm", &[x, gamma, beta])?;
        let xt = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xt.len() / n.max(1);
        let mut xhat = vec![0.0; xt.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xt.len()];
        for r in 0..rows {
            let row = &xt.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = xt.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
        ))
    }

    /// Inverted dropout with a counter-based mask: element `i` is kept iff
    /// `counter_uniform(seed, i) >= p`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if p == 0.0 {
            return Ok(a);
        }
        self.check_nan("dropout", &[a])?;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|i| {
                if counter_uniform(seed, i as u64) < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout(a.0, mask)))
    }

    /// Rows of a `[V, d]` table selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.require_rank2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                len: v,
            });
        }
        self.check_nan("embedding", &[table])?;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding(table.0, ids.into()),
        ))
    }

    /// Summed label-smoothed cross-entropy of `[n, V]` log-probabilities.
    ///
    /// Each target row puts `1 - smoothing` on the gold token and spreads
    /// `smoothing` uniformly over the other `V - 1` entries.
    pub fn cross_entropy(&mut self, logp: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (n, v) = self.require_rank2("cross_entropy", logp)?;
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                len: v,
            });
        }
        if !(0.0..1.0).contains(&smoothing) || (smoothing > 0.0 && v < 2) {
            return Err(TensorError::Contract(format!(
                "label smoothing {smoothing} invalid for {v} classes"
            )));
        }
        self.check_nan("cross_entropy", &[logp])?;
        let lp = self.value(logp);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            for (j, &w) in smoothing_row(t, v, smoothing).iter().enumerate() {
                if w != 0.0 {
                    loss -= w * lp.at2(i, j);
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logp: logp.0,
                targets: targets.to_vec(),
                smoothing,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_nan("sum", &[a])?;
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.0)))
    }

    /// One lattice step of a blank-augmented label DP:
    /// `out[s] = logsumexp(prev[s], prev[s-1], prev[s-2] if skip[s])`.
    pub fn log_add_transitions(&mut self, prev: Var, skip: &[bool]) -> Result<Var> {
        let n = self.value(prev).len();
        if skip.len() != n || self.value(prev).rank() != 1 {
            return Err(TensorError::Shape {
                op: "log_add_transitions",
                lhs: self.shape(prev).to_vec(),
                rhs: vec![skip.len()],
            });
        }
        self.check_nan("log_add_transitions", &[prev])?;
        let p = self.value(prev).data();
        let out: Vec<f64> = (0..n)
            .map(|s| {
                let mut terms = [f64::NEG_INFINITY; 3];
                terms[0] = p[s];
                if s >= 1 {
                    terms[1] = p[s - 1];
                }
                if s >= 2 && skip[s] {
                    terms[2] = p[s - 2];
                }
                log_sum_exp_slice(&terms)
            })
            .collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::LogAddTransitions(prev.0, skip.into()),
        ))
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Gradient of a leaf as a tensor; zeros when nothing reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                add_into(&mut self.leaf_grads[id], &g);
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let wants = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| self.nodes[i].value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let ga = zeros_like(&mut grads[*a], m * k);
                    gemm(m, n, k, g, (n as isize, 1), val(*b).data(), (1, n as isize), 1.0, ga);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let gb = zeros_like(&mut grads[*b], k * n);
                    gemm(k, m, n, val(*a).data(), (1, k as isize), g, (n as isize, 1), 1.0, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                if wants(*a) {
                    // dA = dC · B
                    let ga = zeros_like(&mut grads[*a], m * k);
                    gemm(m, n, k, g, (n as isize, 1), val(*b).data(), (k as isize, 1), 1.0, ga);
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    let gb = zeros_like(&mut grads[*b], n * k);
                    gemm(n, m, k, g, (1, n as isize), val(*a).data(), (k as isize, 1), 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[*a], g);
                }
                if wants(*b) {
                    add_into(&mut grads[*b], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[*a], g);
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(&mut grads[*b], &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[*a], &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[*b], &d);
                }
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[*a], g);
                }
                if wants(*b) {
                    let n = val(*b).len();
                    let gb = zeros_like(&mut grads[*b], n);
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                    add_into(&mut grads[*a], &d);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_into(&mut grads[*a], &d);
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    add_into(&mut grads[*a], g);
                }
            }
            Op::Gather(a, index) => {
                if wants(*a) {
                    let ga = zeros_like(&mut grads[*a], val(*a).len());
                    for (gi, &ix) in g.iter().zip(index.iter()) {
                        if ix != PAD {
                            ga[ix] += gi;
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    if wants(p) {
                        let gp = zeros_like(&mut grads[p], val(p).len());
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                if !wants(*a) {
                    return;
                }
                let is_log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("axis");
                let ga = zeros_like(&mut grads[*a], node.value.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        if is_log {
                            let gsum: f64 = (0..n).map(|k| g[at(k)]).sum();
                            for k in 0..n {
                                ga[at(k)] += g[at(k)] - out[at(k)].exp() * gsum;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..n {
                                ga[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSumExp(a, axis) => {
                if !wants(*a) {
                    return;
                }
                let x = val(*a);
                let (outer, n, inner) = split_axis(x.shape(), *axis).expect("axis");
                let ga = zeros_like(&mut grads[*a], x.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let r = out[o * inner + i];
                        if r == f64::NEG_INFINITY {
                            continue;
                        }
                        let go = g[o * inner + i];
                        for k in 0..n {
                            let at = (o * n + k) * inner + i;
                            ga[at] += go * (x.data()[at] - r).exp();
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = val(*gamma).len();
                let gam = val(*gamma).data();
                if wants(*gamma) {
                    let gg = zeros_like(&mut grads[*gamma], n);
                    for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = zeros_like(&mut grads[*beta], n);
                    for row_g in g.chunks(n) {
                        gb.iter_mut().zip(row_g).for_each(|(d, s)| *d += s);
                    }
                }
                if wants(*x) {
                    let gx = zeros_like(&mut grads[*x], g.len());
                    for (r, (row_g, row_h)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..n {
                            let gh = row_g[j] * gam[j];
                            mean_gh += gh;
                            mean_ghx += gh * row_h[j];
                        }
                        mean_gh /= n as f64;
                        mean_ghx /= n as f64;
                        for j in 0..n {
                            let gh = row_g[j] * gam[j];
                            gx[r * n + j] += rstd[r] * (gh - mean_gh - row_h[j] * mean_ghx);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    add_into(&mut grads[*a], &d);
                }
            }
            Op::Embedding(table, ids) => {
                if wants(*table) {
                    let d = val(*table).shape()[1];
                    let gt = zeros_like(&mut grads[*table], val(*table).len());
                    for (row, &i) in g.chunks(d).zip(ids.iter()) {
                        gt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(dst, s)| *dst += s);
                    }
                }
            }
            Op::CrossEntropy {
                logp,
                targets,
                smoothing,
            } => {
                if wants(*logp) {
                    let v = val(*logp).shape()[1];
                    let gl = zeros_like(&mut grads[*logp], val(*logp).len());
                    for (i, &t) in targets.iter().enumerate() {
                        for (j, w) in smoothing_row(t, v, *smoothing).iter().enumerate() {
                            gl[i * v + j] -= g[0] * w;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let ga = zeros_like(&mut grads[*a], val(*a).len());
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::LogAddTransitions(prev, skip) => {
                if !wants(*prev) {
                    return;
                }
                let p = val(*prev).data();
                let gp = zeros_like(&mut grads[*prev], p.len());
                for s in 0..p.len() {
                    if out[s] == f64::NEG_INFINITY || g[s] == 0.0 {
                        continue;
                    }
                    let mut push = |j: usize| {
                        if p[j] != f64::NEG_INFINITY {
                            gp[j] += g[s] * (p[j] - out[s]).exp();
                        }
                    };
                    push(s);
                    if s >= 1 {
                        push(s - 1);
                    }
                    if s >= 2 && skip[s] {
                        push(s - 2);
                    }
                }
            }
        }
    }
}

fn smoothing_row(target: usize, v: usize, smoothing: f64) -> Vec<f64> {
    let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
    let mut row = vec![off; v];
    row[target] = 1.0 - smoothing;
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of every leaf entry of `build`'s scalar output.
    fn check_grads(leaves: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<_> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.backward(out).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = tape.grad_tensor(vars[li]);
            for k in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut t2 = Tape::new();
                    let vs: Vec<_> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == li {
                                t.data_mut()[k] += delta;
                            }
                            t2.leaf(t, false)
                        })
                        .collect();
                    let o = build(&mut t2, &vs);
                    t2.value(o).item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[k];
                let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.at2(i, k) * b.at2(k, j);
                }
                assert!((tape.value(c).at2(i, j) - s).abs() < 1e-14);
            }
        }
        let bt = tape.transpose(vb).unwrap();
        let c2 = tape.matmul_bt(va, bt).unwrap();
        assert!(tape.value(c2).data().iter().zip(tape.value(c).data()).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(tape.softmax(a, 2).is_err());
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, f64::NAN]));
        assert!(matches!(tape.relu(a), Err(TensorError::Numeric { .. })));
    }

    #[test]
    fn softmax_and_log_sum_exp_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = tape.log_sum_exp(x, 0).unwrap();
        assert!((tape.value(l).item() - 0.693147).abs() < 1e-6);
        let y = tape.constant(Tensor::vector(vec![2.5; 3]));
        let s = tape.softmax(y, 0).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = tape.constant(rand_tensor(&mut rng, &[4, 5]));
        let sm = tape.softmax(m, 1).unwrap();
        for r in 0..4 {
            let s: f64 = tape.value(sm).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let lsm = tape.log_softmax(m, 1).unwrap();
        let lse = tape.log_sum_exp(m, 1).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                let expect = tape.value(m).at2(r, c) - tape.value(lse).data()[r];
                assert!((tape.value(lsm).at2(r, c) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn log_sum_exp_gradient_is_softmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]), true);
        let l = tape.log_sum_exp(x, 0).unwrap();
        tape.backward(l).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        for (g, p) in tape.grad(x).unwrap().iter().zip(tape.value(s).data()) {
            assert!((g - p).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let a = tape.leaf(rand_tensor(&mut rng, &[3, 3]), true);
        let b = tape.leaf(rand_tensor(&mut rng, &[3, 3]), true);
        let c = tape.matmul(a, b).unwrap();
        let d = tape.softmax(c, 1).unwrap();
        let e = tape.mul(d, c).unwrap();
        let loss = tape.sum(e).unwrap();
        tape.backward(loss).unwrap();
        let g1 = tape.grad(a).unwrap().to_vec();
        tape.backward(loss).unwrap();
        for (g2, g1) in tape.grad(a).unwrap().iter().zip(&g1) {
            assert_eq!(*g2, 2.0 * g1);
        }
        tape.zero_grad();
        assert!(tape.grad(a).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(a), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0), true);
        let b = tape.leaf(Tensor::scalar(5.0), true);
        let c = tape.scale(a, 3.0).unwrap();
        tape.backward(c).unwrap();
        assert!(tape.grad_tensor(b).data().iter().all(|&g| g == 0.0));
        let frozen = tape.constant(Tensor::scalar(1.0));
        let d = tape.mul(a, frozen).unwrap();
        tape.backward(d).unwrap();
        assert!(tape.grad(frozen).is_none());
    }

    #[test]
    fn dropout_is_replayable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[100], 1.0));
        let a = tape.dropout(x, 0.3, 99).unwrap();
        let b = tape.dropout(x, 0.3, 99).unwrap();
        let c = tape.dropout(x, 0.3, 100).unwrap();
        assert!(tape.value(a).bit_eq(tape.value(b)));
        assert!(!tape.value(a).bit_eq(tape.value(c)));
        let kept = tape.value(a).data().iter().filter(|&&v| v > 0.0).count();
        assert!((50..90).contains(&kept));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let bias = rand_tensor(&mut rng, &[2]);
        let gamma = rand_tensor(&mut rng, &[2]);
        let beta = rand_tensor(&mut rng, &[2]);
        let worst = check_grads(vec![a, b, bias, gamma, beta], |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_row(h, v[2]).unwrap();
            let n = t.layer_norm(h, v[3], v[4], 1e-12).unwrap();
            let r = t.relu(n).unwrap();
            let ls = t.log_softmax(r, 1).unwrap();
            t.cross_entropy(ls, &[0, 1, 1], 0.1).unwrap()
        });
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let emb = rand_tensor(&mut rng, &[5, 4]);
        let worst = check_grads(vec![a, emb], |t, v| {
            let e = t.embedding(v[1], &[4, 0, 4]).unwrap();
            let c = t.concat(&[v[0], e], 0).unwrap();
            let s = t.slice_cols(c, 1, 3).unwrap();
            let tr = t.transpose(s).unwrap();
            let q = t.matmul_bt(tr, tr).unwrap();
            let sm = t.softmax(q, 0).unwrap();
            let l = t.log_sum_exp(sm, 1).unwrap();
            let d = t.dropout(l, 0.25, 1).unwrap();
            let r = t.reshape(d, vec![1, 3]).unwrap();
            let r = t.slice_rows(r, 0, 1).unwrap();
            let s2 = t.sub(r, r).unwrap();
            let m = t.mul(r, r).unwrap();
            let z = t.add(s2, m).unwrap();
            t.sum(z).unwrap()
        });
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn log_add_transitions_gradient() {
        let prev = Tensor::vector(vec![-0.5, -1.0, f64::NEG_INFINITY, -2.0, -0.1]);
        let skip = [false, false, true, false, true];
        let mut tape = Tape::new();
        let p = tape.leaf(prev.clone(), true);
        let o = tape.log_add_transitions(p, &skip).unwrap();
        let o1 = tape.log_add_transitions(o, &skip).unwrap();
        let l = tape.log_sum_exp(o1, 0).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(p).unwrap().to_vec();
        assert!(g.iter().all(|x| x.is_finite()));
        assert_eq!(g[2], 0.0);
        let eps = 1e-6;
        for k in [0, 1, 3, 4] {
            let f = |d: f64| {
                let mut t = Tape::new();
                let mut pv = prev.clone();
                pv.data_mut()[k] += d;
                let p = t.constant(pv);
                let o = t.log_add_transitions(p, &skip).unwrap();
                let o1 = t.log_add_transitions(o, &skip).unwrap();
                let l = t.log_sum_exp(o1, 0).unwrap();
                t.value(l).item()
            };
            let num = (f(eps) - f(-eps)) / (2.0 * eps);
            assert!((num - g[k]).abs() < 1e-8);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(vals));
            let s = tape.softmax(x, 0).unwrap();
            let total: f64 = tape.value(s).data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
