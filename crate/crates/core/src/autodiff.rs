//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Leaves
//! are either parameters (`requires_grad = true`) or constants; gradient
//! buffers are only computed along paths that reach a parameter. Calling
//! [`Tape::backward`] does not consume the tape, so it can be invoked more
//! than once and always returns the same buffers.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Sqrt,
    Square,
    Abs,
    Recip,
    Gelu,
    Softplus,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Elementwise(Binary, usize, usize),
    /// x[m×n] (op) v[n], broadcasting `v` across rows.
    RowBroadcast(Binary, usize, usize),
    /// x[m×n] (op) v[m], broadcasting `v` across columns.
    ColBroadcast(Binary, usize, usize),
    /// x * s where `s` is a one-element tensor.
    ScaleByVar(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(Unary, usize),
    LogClamped(usize, f64),
    SumAll(usize),
    /// Sum of a matrix over rows (axis 0), giving one value per column.
    SumAxis0(usize),
    /// Sum of a matrix over columns (axis 1), giving one value per row.
    SumAxis1(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    NormalizeRows(usize),
    Norm(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Arc<[f64]>,
        rstd: Arc<[f64]>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        seq_len: usize,
        key_mask: Option<Arc<[bool]>>,
        probs: Arc<[f64]>,
    },
    SelectRows(usize, Arc<[usize]>),
    ConcatRows(Vec<usize>),
    PickPerRow(usize, Arc<[usize]>),
    Diag(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` requires one.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a learnable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf; no gradient is ever computed for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = parents.iter().any(|&p| self.requires(p));
        self.push(value, op, rg)
    }

    /// Concatenates the rows of several matrices (rank-1 inputs count as one row).
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat_rows needs at least one input"))?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            let (r, c) = as_rows(&v);
            if c != cols {
                return Err(dim_err!(
                    "concat_rows column mismatch: {:?} vs {:?}",
                    first.shape(),
                    v.shape()
                ));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.record(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(ids.clone()),
            &ids,
        ))
    }

    /// Sums scalars; the result has shape `[1]`.
    pub fn sum_scalars<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let mut iter = parts.iter();
        let mut acc = *iter
            .next()
            .ok_or_else(|| dim_err!("sum_scalars needs at least one input"))?;
        for p in iter {
            acc = acc.add(*p)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| nodes[id].requires_grad)
                    .map(|g| Tensor::from_parts(nodes[id].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn as_rows(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => (s[0], s[1..].iter().product()),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(buf);
}

// Dense kernels over row-major slices.

/// out[m×n] += a[m×k] · b[k×n]
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += s;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[*a].value.dims2().unwrap();
            let n = nodes[*b].value.shape()[1];
            let (av, bv) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |buf| matmul_a_bt_acc(g, bv, buf, m, k, n));
            accumulate(grads, nodes, *b, |buf| matmul_at_b_acc(av, g, buf, m, k, n));
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[*a].value.dims2().unwrap();
            accumulate(grads, nodes, *a, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Elementwise(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let kind = *kind;
            accumulate(grads, nodes, *a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += match kind {
                        Binary::Add | Binary::Sub => g[i],
                        Binary::Mul => g[i] * bv[i],
                        Binary::Div => g[i] / bv[i],
                    };
                }
            });
            accumulate(grads, nodes, *b, |buf| {
                for i in 0..buf.len() {
                    buf[i] += match kind {
                        Binary::Add => g[i],
                        Binary::Sub => -g[i],
                        Binary::Mul => g[i] * av[i],
                        Binary::Div => -g[i] * out[i] / bv[i],
                    };
                }
            });
        }
        Op::RowBroadcast(kind, x, v) => {
            let (m, n) = nodes[*x].value.dims2().unwrap();
            let (xv, vv) = (val(*x), val(*v));
            let kind = *kind;
            accumulate(grads, nodes, *x, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        let idx = i * n + j;
                        buf[idx] += match kind {
                            Binary::Add | Binary::Sub => g[idx],
                            Binary::Mul => g[idx] * vv[j],
                            Binary::Div => g[idx] / vv[j],
                        };
                    }
                }
            });
            accumulate(grads, nodes, *v, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        let idx = i * n + j;
                        buf[j] += match kind {
                            Binary::Add => g[idx],
                            Binary::Sub => -g[idx],
                            Binary::Mul => g[idx] * xv[idx],
                            Binary::Div => -g[idx] * out[idx] / vv[j],
                        };
                    }
                }
            });
        }
        Op::ColBroadcast(kind, x, v) => {
            let (m, n) = nodes[*x].value.dims2().unwrap();
            let (xv, vv) = (val(*x), val(*v));
            let kind = *kind;
            accumulate(grads, nodes, *x, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        let idx = i * n + j;
                        buf[idx] += match kind {
                            Binary::Add | Binary::Sub => g[idx],
                            Binary::Mul => g[idx] * vv[i],
                            Binary::Div => g[idx] / vv[i],
                        };
                    }
                }
            });
            accumulate(grads, nodes, *v, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        let idx = i * n + j;
                        buf[i] += match kind {
                            Binary::Add => g[idx],
                            Binary::Sub => -g[idx],
                            Binary::Mul => g[idx] * xv[idx],
                            Binary::Div => -g[idx] * out[idx] / vv[i],
                        };
                    }
                }
            });
        }
        Op::ScaleByVar(x, s) => {
            let (xv, sv) = (val(*x), val(*s)[0]);
            accumulate(grads, nodes, *x, |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi * sv;
                }
            });
            accumulate(grads, nodes, *s, |buf| {
                buf[0] += g.iter().zip(xv).map(|(gi, xi)| gi * xi).sum::<f64>();
            });
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, |buf| {
            for (b, gi) in buf.iter_mut().zip(g) {
                *b += gi * c;
            }
        }),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, nodes, *x, |buf| {
            for (b, gi) in buf.iter_mut().zip(g) {
                *b += gi;
            }
        }),
        Op::Unary(kind, x) => {
            let xv = val(*x);
            let kind = *kind;
            accumulate(grads, nodes, *x, |buf| {
                for i in 0..buf.len() {
                    let d = match kind {
                        Unary::Exp => out[i],
                        Unary::Sqrt => 0.5 / out[i],
                        Unary::Square => 2.0 * xv[i],
                        Unary::Abs => {
                            if xv[i] > 0.0 {
                                1.0
                            } else if xv[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Recip => -out[i] * out[i],
                        Unary::Gelu => gelu_grad(xv[i]),
                        Unary::Softplus => sigmoid(xv[i]),
                        Unary::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    buf[i] += g[i] * d;
                }
            });
        }
        Op::LogClamped(x, floor) => {
            let xv = val(*x);
            accumulate(grads, nodes, *x, |buf| {
                for i in 0..buf.len() {
                    if xv[i] > *floor {
                        buf[i] += g[i] / xv[i];
                    }
                }
            });
        }
        Op::SumAll(x) => accumulate(grads, nodes, *x, |buf| {
            for b in buf.iter_mut() {
                *b += g[0];
            }
        }),
        Op::SumAxis0(x) => {
            let (m, n) = nodes[*x].value.dims2().unwrap();
            accumulate(grads, nodes, *x, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += g[j];
                    }
                }
            });
        }
        Op::SumAxis1(x) => {
            let (m, n) = nodes[*x].value.dims2().unwrap();
            accumulate(grads, nodes, *x, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += g[i];
                    }
                }
            });
        }
        Op::SoftmaxRows(x) => {
            let (_, n) = as_rows(&nodes[*x].value);
            accumulate(grads, nodes, *x, |buf| {
                for ((brow, grow), yrow) in buf
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(out.chunks(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        brow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(x) => {
            let (_, n) = as_rows(&nodes[*x].value);
            accumulate(grads, nodes, *x, |buf| {
                for ((brow, grow), yrow) in buf
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(out.chunks(n))
                {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..n {
                        brow[j] += grow[j] - yrow[j].exp() * gsum;
                    }
                }
            });
        }
        Op::NormalizeRows(x) => {
            let (_, n) = as_rows(&nodes[*x].value);
            let xv = val(*x);
            accumulate(grads, nodes, *x, |buf| {
                for (r, brow) in buf.chunks_mut(n).enumerate() {
                    let xrow = &xv[r * n..(r + 1) * n];
                    let yrow = &out[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        brow[j] += (grow[j] - yrow[j] * dot) / norm;
                    }
                }
            });
        }
        Op::Norm(x) => {
            let xv = val(*x);
            let norm = out[0];
            if norm > 0.0 {
                accumulate(grads, nodes, *x, |buf| {
                    for (b, xi) in buf.iter_mut().zip(xv) {
                        *b += g[0] * xi / norm;
                    }
                });
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (m, n) = nodes[*x].value.dims2().unwrap();
            let gv = val(*gamma);
            accumulate(grads, nodes, *gamma, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        buf[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
            });
            accumulate(grads, nodes, *beta, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        buf[j] += g[i * n + j];
                    }
                }
            });
            accumulate(grads, nodes, *x, |buf| {
                let nf = n as f64;
                for i in 0..m {
                    let row = i * n..(i + 1) * n;
                    let (grow, hrow) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        let d = grow[j] * gv[j];
                        mean_d += d;
                        mean_dh += d * hrow[j];
                    }
                    mean_d /= nf;
                    mean_dh /= nf;
                    for j in 0..n {
                        let d = grow[j] * gv[j];
                        buf[i * n + j] += rstd[i] * (d - mean_d - hrow[j] * mean_dh);
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            seq_len,
            key_mask,
            probs,
        } => {
            let (rows, dm) = nodes[*q].value.dims2().unwrap();
            let n = *seq_len;
            let dh = dm / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let keep = |j: usize| key_mask.as_ref().map_or(true, |m| !m[j]);
            let mut dq = vec![0.0; rows * dm];
            let mut dk = vec![0.0; rows * dm];
            let mut dv = vec![0.0; rows * dm];
            let mut da = vec![0.0; n];
            for s0 in (0..rows).step_by(n) {
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[(s0 / n * heads + h) * n * n..][..n * n];
                    for i in 0..n {
                        let qi = (s0 + i) * dm + off;
                        let gi = &g[qi..qi + dh];
                        let prow = &p[i * n..(i + 1) * n];
                        let mut dot = 0.0;
                        for j in 0..n {
                            if !keep(j) {
                                continue;
                            }
                            let vj = (s0 + j) * dm + off;
                            da[j] = gi.iter().zip(&vv[vj..vj + dh]).map(|(a, b)| a * b).sum();
                            dot += da[j] * prow[j];
                            for t in 0..dh {
                                dv[vj + t] += prow[j] * gi[t];
                            }
                        }
                        for j in 0..n {
                            if !keep(j) {
                                continue;
                            }
                            let ds = prow[j] * (da[j] - dot) * scale;
                            let kj = (s0 + j) * dm + off;
                            for t in 0..dh {
                                dq[qi + t] += ds * kv[kj + t];
                                dk[kj + t] += ds * qv[qi + t];
                            }
                        }
                    }
                }
            }
            for (id, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                accumulate(grads, nodes, id, |buf| {
                    for (b, x) in buf.iter_mut().zip(&d) {
                        *b += x;
                    }
                });
            }
        }
        Op::SelectRows(x, idx) => {
            let (_, c) = as_rows(&nodes[*x].value);
            accumulate(grads, nodes, *x, |buf| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        buf[src * c + j] += g[r * c + j];
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accumulate(grads, nodes, p, |buf| {
                    for (b, gi) in buf.iter_mut().zip(&g[offset..offset + len]) {
                        *b += gi;
                    }
                });
                offset += len;
            }
        }
        Op::PickPerRow(x, cols) => {
            let (_, n) = as_rows(&nodes[*x].value);
            accumulate(grads, nodes, *x, |buf| {
                for (i, &c) in cols.iter().enumerate() {
                    buf[i * n + c] += g[i];
                }
            });
        }
        Op::Diag(x) => {
            let (_, n) = nodes[*x].value.dims2().unwrap();
            accumulate(grads, nodes, *x, |buf| {
                for i in 0..g.len() {
                    buf[i * n + i] += g[i];
                }
            });
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Same value recorded as a constant, cutting gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    fn cols(&self) -> usize {
        as_rows(&self.tape.nodes.borrow()[self.id].value).1
    }

    fn rows(&self) -> usize {
        as_rows(&self.tape.nodes.borrow()[self.id].value).0
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'t> {
        self.tape.record(value, op, parents)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.record(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        let d = a.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.record(
            Tensor::from_parts(vec![c, r], out),
            Op::Transpose(self.id),
            &[self.id],
        ))
    }

    fn elementwise(&self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(dim_err!(
                "elementwise {kind:?} shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        Ok(self.record(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::Elementwise(kind, self.id, other.id),
            &[self.id, other.id],
        ))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, Binary::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, Binary::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, Binary::Mul)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, Binary::Div)
    }

    fn row_broadcast(&self, v: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(&v);
        let (x, vv) = (self.value(), v.value());
        let (m, n) = x.dims2()?;
        if vv.len() != n {
            return Err(dim_err!(
                "row broadcast needs a length-{n} vector, got {:?} against {:?}",
                vv.shape(),
                x.shape()
            ));
        }
        let (xd, vd) = (x.data(), vv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let (a, b) = (xd[i * n + j], vd[j]);
                out[i * n + j] = match kind {
                    Binary::Add => a + b,
                    Binary::Sub => a - b,
                    Binary::Mul => a * b,
                    Binary::Div => a / b,
                };
            }
        }
        Ok(self.record(
            Tensor::from_parts(vec![m, n], out),
            Op::RowBroadcast(kind, self.id, v.id),
            &[self.id, v.id],
        ))
    }

    /// x[m×n] + v[n] for every row.
    pub fn add_row(&self, v: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(v, Binary::Add)
    }

    pub fn sub_row(&self, v: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(v, Binary::Sub)
    }

    pub fn mul_row(&self, v: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(v, Binary::Mul)
    }

    pub fn div_row(&self, v: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(v, Binary::Div)
    }

    fn col_broadcast(&self, v: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(&v);
        let (x, vv) = (self.value(), v.value());
        let (m, n) = x.dims2()?;
        if vv.len() != m {
            return Err(dim_err!(
                "column broadcast needs a length-{m} vector, got {:?} against {:?}",
                vv.shape(),
                x.shape()
            ));
        }
        let (xd, vd) = (x.data(), vv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let (a, b) = (xd[i * n + j], vd[i]);
                out[i * n + j] = match kind {
                    Binary::Add => a + b,
                    Binary::Sub => a - b,
                    Binary::Mul => a * b,
                    Binary::Div => a / b,
                };
            }
        }
        Ok(self.record(
            Tensor::from_parts(vec![m, n], out),
            Op::ColBroadcast(kind, self.id, v.id),
            &[self.id, v.id],
        ))
    }

    /// x[m×n] − v[m] for every column.
    pub fn sub_col(&self, v: Var<'t>) -> Result<Var<'t>> {
        self.col_broadcast(v, Binary::Sub)
    }

    pub fn mul_col(&self, v: Var<'t>) -> Result<Var<'t>> {
        self.col_broadcast(v, Binary::Mul)
    }

    pub fn div_col(&self, v: Var<'t>) -> Result<Var<'t>> {
        self.col_broadcast(v, Binary::Div)
    }

    /// Multiplies every entry by the one-element variable `s`.
    pub fn scale_by(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s);
        let sv = s.value();
        if sv.len() != 1 {
            return Err(dim_err!("scale_by needs a scalar, got {:?}", sv.shape()));
        }
        let c = sv.data()[0];
        let x = self.value();
        Ok(self.record(
            x.map(|v| v * c),
            Op::ScaleByVar(self.id, s.id),
            &[self.id, s.id],
        ))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.record(self.value().map(|v| v * c), Op::Scale(self.id, c), &[self.id])
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.record(self.value().map(|v| v + c), Op::AddScalar(self.id), &[self.id])
    }

    fn unary(&self, kind: Unary) -> Var<'t> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::Abs => f64::abs,
            Unary::Recip => f64::recip,
            Unary::Gelu => gelu,
            Unary::Softplus => softplus,
            Unary::Relu => |x| x.max(0.0),
        };
        self.record(self.value().map(f), Op::Unary(kind, self.id), &[self.id])
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn recip(&self) -> Var<'t> {
        self.unary(Unary::Recip)
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    /// Natural log of max(x, floor); entries at or below the floor get no gradient.
    pub fn log_clamped(&self, floor: f64) -> Var<'t> {
        self.record(
            self.value().map(|v| v.max(floor).ln()),
            Op::LogClamped(self.id, floor),
            &[self.id],
        )
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.record(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis` of a matrix (or of a vector for axis 0).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        match (x.rank(), axis) {
            (1, 0) => Ok(self.sum()),
            (2, 0) => {
                let (m, n) = x.dims2()?;
                let mut out = vec![0.0; n];
                for row in x.data().chunks(n).take(m) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Ok(self.record(
                    Tensor::from_parts(vec![n], out),
                    Op::SumAxis0(self.id),
                    &[self.id],
                ))
            }
            (2, 1) => {
                let (_, n) = x.dims2()?;
                let out = x.data().chunks(n).map(|r| r.iter().sum()).collect();
                let m = x.shape()[0];
                Ok(self.record(
                    Tensor::from_parts(vec![m], out),
                    Op::SumAxis1(self.id),
                    &[self.id],
                ))
            }
            _ => Err(dim_err!(
                "axis {axis} invalid for shape {:?}",
                x.shape()
            )),
        }
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let count = *self
            .shape()
            .get(axis)
            .ok_or_else(|| dim_err!("axis {axis} invalid for shape {:?}", self.shape()))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / count as f64))
    }

    /// Softmax over the last axis, with max subtraction per row.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_finite() {
            return Err(Error::NumericDomain(
                "softmax input contains non-finite values".into(),
            ));
        }
        let (_, n) = as_rows(&x);
        let mut out = vec![0.0; x.len()];
        for (o, row) in out.chunks_mut(n).zip(x.data().chunks(n)) {
            softmax_row(row, o);
        }
        Ok(self.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::SoftmaxRows(self.id),
            &[self.id],
        ))
    }

    /// Softmax along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        match (self.value().rank(), axis) {
            (1, 0) | (2, 1) => self.softmax_rows(),
            (2, 0) => self.transpose()?.softmax_rows()?.transpose(),
            (r, a) => Err(dim_err!("softmax axis {a} invalid for rank {r}")),
        }
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_finite() {
            return Err(Error::NumericDomain(
                "log-softmax input contains non-finite values".into(),
            ));
        }
        let (_, n) = as_rows(&x);
        let mut out = vec![0.0; x.len()];
        for (o, row) in out.chunks_mut(n).zip(x.data().chunks(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = v - lse;
            }
        }
        Ok(self.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LogSoftmaxRows(self.id),
            &[self.id],
        ))
    }

    /// L2-normalizes each row (a vector counts as one row).
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (_, n) = as_rows(&x);
        let mut out = vec![0.0; x.len()];
        for (o, row) in out.chunks_mut(n).zip(x.data().chunks(n)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::NumericDomain(format!(
                    "cannot normalize a row with norm {norm}"
                )));
            }
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = v / norm;
            }
        }
        Ok(self.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::NormalizeRows(self.id),
            &[self.id],
        ))
    }

    /// Euclidean norm of all entries. The gradient at zero is taken as zero.
    pub fn norm(&self) -> Var<'t> {
        let n = self.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.record(Tensor::scalar(n), Op::Norm(self.id), &[self.id])
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.len() != n || bv.len() != n {
            return Err(dim_err!(
                "layer_norm affine shapes {:?}/{:?} do not match width {n}",
                gv.shape(),
                bv.shape()
            ));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.record(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: xhat.into(),
                rstd: rstd.into(),
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// The rows of `q`, `k`, `v` hold consecutive sequences of `seq_len`
    /// tokens each; tokens only attend within their own sequence.
    /// `key_mask[j] == true` removes position `j` from every query's key set.
    pub fn attention(
        &self,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
        seq_len: usize,
        key_mask: Option<Arc<[bool]>>,
    ) -> Result<Var<'t>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let (rows, dm) = qv.dims2()?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(dim_err!(
                "attention q/k/v shapes differ: {:?} {:?} {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        if heads == 0 || dm % heads != 0 {
            return Err(dim_err!("width {dm} not divisible by {heads} heads"));
        }
        let n = seq_len;
        if n == 0 || rows % n != 0 {
            return Err(dim_err!("{rows} rows do not split into sequences of {n}"));
        }
        if let Some(m) = &key_mask {
            if m.len() != n {
                return Err(dim_err!("key mask length {} for {n} tokens", m.len()));
            }
            if m.iter().all(|&x| x) {
                return Err(Error::Contract("attention mask hides every key".into()));
            }
        }
        let keep = |j: usize| key_mask.as_ref().map_or(true, |m| !m[j]);
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; rows / n * heads * n * n];
        let mut out = vec![0.0; rows * dm];
        for s0 in (0..rows).step_by(n) {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (s0 / n * heads + h) * n * n;
                for i in 0..n {
                    let qi = (s0 + i) * dm + off;
                    let qrow = &qd[qi..qi + dh];
                    let prow = &mut probs[pbase + i * n..pbase + (i + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        if !keep(j) {
                            continue;
                        }
                        let kj = (s0 + j) * dm + off;
                        let s = qrow.iter().zip(&kd[kj..kj + dh]).map(|(a, b)| a * b).sum::<f64>()
                            * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for j in 0..n {
                        if keep(j) {
                            prow[j] = (prow[j] - max).exp();
                            sum += prow[j];
                        }
                    }
                    for j in 0..n {
                        if keep(j) {
                            prow[j] /= sum;
                        }
                    }
                    let orow = &mut out[qi..qi + dh];
                    for j in 0..n {
                        if !keep(j) {
                            continue;
                        }
                        let vj = (s0 + j) * dm + off;
                        for (o, &x) in orow.iter_mut().zip(&vd[vj..vj + dh]) {
                            *o += prow[j] * x;
                        }
                    }
                }
            }
        }
        Ok(self.record(
            Tensor::from_parts(vec![rows, dm], out),
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                seq_len: n,
                key_mask,
                probs: probs.into(),
            },
            &[self.id, k.id, v.id],
        ))
    }

    /// Gathers rows by index (repeats allowed); the result is always a matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = as_rows(&x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(dim_err!("row {i} out of range for shape {:?}", x.shape()));
            }
            out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        Ok(self.record(
            Tensor::from_parts(vec![indices.len(), c], out),
            Op::SelectRows(self.id, indices.into()),
            &[self.id],
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_rows(&idx)
    }

    /// x[i, cols[i]] for every row `i`.
    pub fn pick_per_row(&self, cols: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = as_rows(&x);
        if cols.len() != r {
            return Err(dim_err!("{} picks for {r} rows", cols.len()));
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::Contract(format!(
                    "index {j} out of range for {c} columns"
                )));
            }
            out.push(x.data()[i * c + j]);
        }
        Ok(self.record(
            Tensor::from_parts(vec![r], out),
            Op::PickPerRow(self.id, cols.into()),
            &[self.id],
        ))
    }

    pub fn diag(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        if r != c {
            return Err(dim_err!("diag needs a square matrix, got {:?}", x.shape()));
        }
        let out = (0..r).map(|i| x.data()[i * c + i]).collect();
        Ok(self.record(
            Tensor::from_parts(vec![r], out),
            Op::Diag(self.id),
            &[self.id],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.record(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Number of rows when viewed as a matrix.
    pub fn num_rows(&self) -> usize {
        self.rows()
    }

    /// (mean, sqrt(population variance + eps)) along `axis`.
    pub fn moments(&self, axis: usize, eps: f64) -> Result<(Var<'t>, Var<'t>)> {
        moments(*self, axis, eps)
    }
}

/// Mean and epsilon-guarded standard deviation along `axis` of a matrix.
///
/// Uses the population variance (divides by the count).
pub fn moments<'t>(x: Var<'t>, axis: usize, eps: f64) -> Result<(Var<'t>, Var<'t>)> {
    if !(eps >= 0.0) {
        return Err(Error::Contract(format!("epsilon must be nonnegative, got {eps}")));
    }
    let shape = x.shape();
    let x2 = match shape.len() {
        1 if axis == 0 => x.reshape(&[shape[0], 1])?,
        2 if axis < 2 => x,
        _ => return Err(dim_err!("moments axis {axis} invalid for {shape:?}")),
    };
    let mean = x2.mean_axis(axis)?;
    let centered = if axis == 0 {
        x2.sub_row(mean)?
    } else {
        x2.sub_col(mean)?
    };
    let var = centered.square().mean_axis(axis)?;
    let std = var.add_scalar(eps).sqrt();
    Ok((mean, std))
}

/// Cosine similarity of two vectors.
pub fn cosine_similarity<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.value().len() != b.value().len() {
        return Err(dim_err!(
            "cosine similarity of {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let an = a.reshape(&[1, a.value().len()])?.normalize_rows()?;
    let bn = b.reshape(&[1, b.value().len()])?.normalize_rows()?;
    Ok(an.mul(bn)?.sum())
}

/// Pairwise cosine similarities between the rows of `a` [m×d] and `b` [n×d].
pub fn cosine_matrix<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.normalize_rows()?.matmul(b.normalize_rows()?.transpose()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, finite_difference_check};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let sel = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let col = tape.constant(t(&[2, 1], &[5.0, 7.0]));
        assert_eq!(sel.matmul(col).unwrap().value().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (a, b) = (pseudo(12, 1), pseudo(8, 2));
        let mut expected = [0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    expected[i * 2 + j] += a[i * 4 + p] * b[p * 2 + j];
                }
            }
        }
        let tape = Tape::new();
        let out = tape
            .constant(t(&[3, 4], &a))
            .matmul(tape.constant(t(&[4, 2], &b)))
            .unwrap()
            .value();
        for (x, y) in out.data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(&[0.0, 0.0])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape
            .constant(Tensor::vector(&[1000.0, 1000.0]))
            .softmax(0)
            .unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape.constant(Tensor::vector(&[1.0, 0.5])).softmax(0).unwrap();
        // e^1/(e^1+e^0.5) = 1/(1+e^-0.5)
        let p = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((s.value().data()[0] - p).abs() < 1e-15);
        assert!((s.value().data()[0] - 0.6225).abs() < 1e-4);
        assert!((s.value().data()[1] - 0.3775).abs() < 1e-4);
        let bad = tape.constant(Tensor::vector(&[f64::NAN, 0.0])).softmax(0);
        assert!(matches!(bad, Err(Error::NumericDomain(_))));
    }

    #[test]
    fn softmax_column_axis_sums_to_one() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &pseudo(6, 9)));
        let s = x.softmax(0).unwrap().value();
        for j in 0..2 {
            let col: f64 = (0..3).map(|i| s.data()[i * 2 + j]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_examples() {
        let tape = Tape::new();
        let eps = 1e-5;
        let c = tape.constant(Tensor::full(&[7], 3.5));
        let (m, s) = c.moments(0, eps).unwrap();
        assert_eq!(m.item(), 3.5);
        assert!((s.item() - eps.sqrt()).abs() < 1e-15);
        let (m, s) = tape
            .constant(Tensor::vector(&[0.0, 2.0]))
            .moments(0, 0.0)
            .unwrap();
        assert_eq!((m.item(), s.item()), (1.0, 1.0));
        let x = pseudo(16, 3);
        let mean = x.iter().sum::<f64>() / 16.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        let (m, s) = tape.constant(Tensor::vector(&x)).moments(0, eps).unwrap();
        assert!((m.item() - mean).abs() < 1e-12);
        assert!((s.item() - (var + eps).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0, 1.0]));
        let b = tape.constant(Tensor::vector(&[1.0, 0.0]));
        let c = tape.constant(Tensor::vector(&[0.0, 1.0]));
        assert!((cosine_similarity(a, a).unwrap().item() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(b, c).unwrap().item(), 0.0);
        assert!((cosine_similarity(a, b).unwrap().item() - 0.70710678).abs() < 1e-4);
        let z = tape.constant(Tensor::vector(&[0.0, 0.0]));
        assert!(matches!(
            cosine_similarity(a, z),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 3], &pseudo(6, 4)));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[3.0]));
        let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 2], &pseudo(4, 5)));
        let loss = x.matmul(x).unwrap().softmax_rows().unwrap().square().sum();
        let g1 = tape.backward(loss).unwrap().get(x).unwrap().clone();
        let g2 = tape.backward(loss).unwrap().get(x).unwrap().clone();
        assert!(g1.bit_eq(&g2));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        let c = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let a0 = t(&[3, 4], &pseudo(12, 11));
        let b0 = t(&[4, 4], &pseudo(16, 12));
        let v0 = Tensor::vector(&pseudo(4, 13).iter().map(|x| x + 2.0).collect::<Vec<_>>());
        let err = check_gradients(
            |_tape, p| {
                let (a, b, v) = (p[0], p[1], p[2]);
                let h = a.matmul(b)?.add_row(v)?.gelu();
                let h = h.layer_norm(v, v.scale(0.5), 1e-5)?;
                let att = h.attention(h.scale(0.7), h.square(), 2, 3, None)?;
                let n = att.normalize_rows()?;
                let s = n.softmax_rows()?.mul_row(v)?.div_row(v.square().add_scalar(1.0))?;
                let l = s.log_softmax_rows()?.pick_per_row(&[0, 3, 1])?;
                let m = s.transpose()?.matmul(s)?.diag()?;
                let (mu, sd) = a.moments(0, 1e-5)?;
                let z = a.sub_row(mu)?.div_row(sd)?.softplus().sum_axis(1)?;
                let cm = cosine_matrix(a, b.slice_rows(1, 3)?)?;
                let w = a.select_rows(&[2, 0, 2])?.exp().mean_axis(0)?;
                let k = tape_concat(&[l, z])?.abs().log_clamped(1e-12);
                Ok(l.sum()
                    .add(m.norm())?
                    .add(k.sum())?
                    .add(cm.add_scalar(3.0).recip().square().mean())?
                    .add(w.mul(v)?.sqrt().sum())?
                    .add(a.sub_col(z)?.mul_col(z)?.div_col(z.square())?.relu().sum())?
                    .add(a.scale_by(v.reshape(&[4, 1])?.slice_rows(0, 1)?.reshape(&[1])?)?.sum())?)
            },
            &[a0, b0, v0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    fn tape_concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
        parts[0].tape().concat_rows(parts)
    }

    #[test]
    fn masked_attention_matches_unmasked_subset() {
        let x = pseudo(20, 21);
        let tape = Tape::new();
        let full = tape.constant(t(&[5, 4], &x));
        let sub = tape.constant(t(&[3, 4], &x[8..]));
        let mask: Arc<[bool]> = vec![true, true, false, false, false].into();
        let a = full.attention(full, full, 2, 5, Some(mask)).unwrap().value();
        let b = sub.attention(sub, sub, 2, 3, None).unwrap().value();
        assert!(Tensor::from_parts(vec![3, 4], a.data()[8..].to_vec()).bit_eq(&b));
    }

    #[test]
    fn finite_difference_check_on_sum_is_exact() {
        let x = t(&[2, 3], &pseudo(6, 7));
        let err = finite_difference_check(|_, x| Ok(x.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
        let err = finite_difference_check(|_, x| Ok(x.mul(x)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let tape = Tape::new();
            let s = tape.constant(Tensor::vector(&v)).softmax(0).unwrap().value();
            let total: f64 = s.data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            proptest::prop_assert!(s.data().iter().all(|&p| p > 0.0));
        }

        #[test]
        fn moments_std_at_least_sqrt_eps(v in proptest::collection::vec(-5.0f64..5.0, 1..12), eps in 1e-8f64..1e-2) {
            let tape = Tape::new();
            let (_, s) = tape.constant(Tensor::vector(&v)).moments(0, eps).unwrap();
            proptest::prop_assert!(s.item() >= eps.sqrt());
        }

        #[test]
        fn ops_are_deterministic(v in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let run = || {
                let tape = Tape::new();
                let x = tape.param(Tensor::new(&[2, 3], v.clone()).unwrap());
                let y = x.matmul(x.transpose().unwrap()).unwrap().softmax_rows().unwrap().gelu().sum();
                let g = tape.backward(y).unwrap().get(x).unwrap().clone();
                (y.value(), g)
            };
            let (a, ga) = run();
            let (b, gb) = run();
            proptest::prop_assert!(a.bit_eq(&b) && ga.bit_eq(&gb));
        }
    }
}
