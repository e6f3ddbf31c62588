//! Computation tape. Every operation appends a node holding its forward value;
//! [`Graph::backward`] walks the nodes in reverse recording order.

use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::uniform_from_key;
use crate::tensor::{matmul_at_into, matmul_bt_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Concat(Vec<Var>, Axis),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Rc<[bool]>>),
    LogSumExp(Var, Axis),
    Gather(Var, Rc<[usize]>),
    Dropout(Var, Rc<[f64]>),
    CrossEntropy {
        logits: Var,
        targets: Rc<[Option<usize>]>,
        probs: Rc<[f64]>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Rc<[f64]>,
        weights: Rc<[f64]>,
        denom: f64,
    },
    Slice(Var, Axis, usize, usize),
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    PairwiseAdd(Var, Var),
    Pick(Var, Rc<[(usize, usize)]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::AddCol(..) => "add_col",
            Op::Concat(..) => "concat",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::Gather(..) => "embedding_lookup",
            Op::Dropout(..) => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Slice(..) => "slice",
            Op::Sum(_) => "sum",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::PairwiseAdd(..) => "pairwise_add",
            Op::Pick(..) => "pick",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Gradients of one backward pass, indexed by node.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl NodeGrads {
    /// Gradient of the loss with respect to `var`; zeros when unreachable.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        let n: usize = shape.iter().product();
        let data = self.grads[var.0].clone().unwrap_or_else(|| vec![0.0; n]);
        Tensor::new(shape, data).expect("gradient shape")
    }
}

/// A single-threaded recording tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

fn shape_err(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
}

fn dims(t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(shape_err(format!("expected rank-2 tensor, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise (masked) softmax over a `rows x cols` buffer.
fn softmax_rows(x: &[f64], cols: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(cols).enumerate() {
        let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let max = (0..cols)
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for c in 0..cols {
            if keep(c) {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                total += e;
            }
        }
        for v in &mut out[r * cols..(r + 1) * cols] {
            *v /= total;
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reject NaN and `+inf` forward values. Masked log-probabilities are
    /// `-inf` by definition and pass.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && value.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(AutodiffError::NonFiniteValue { op: op.name() });
        }
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        dims(self.value(v))
    }

    /// A constant leaf. Gradients still flow to it and can be read back
    /// through [`Graph::grads`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.shared_value(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// `a (r x c) + bias (1 x c)`, the bias repeated on every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if self.dims(bias)? != (1, c) {
            return Err(shape_err(format!(
                "add_row: {:?} + {:?}",
                self.shape(a),
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    /// `a (r x c) + col (r x 1)`, the column repeated across every column.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, _) = self.dims(a)?;
        if self.dims(col)? != (r, 1) {
            return Err(shape_err(format!(
                "add_col: {:?} + {:?}",
                self.shape(a),
                self.shape(col)
            )));
        }
        let b = self.value(col).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, bv) in b.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|o| *o += bv);
        }
        self.push(out, Op::AddCol(a, col))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors".into()))?;
        let (r0, c0) = self.dims(first)?;
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.dims(p)?;
                    if c != c0 {
                        return Err(shape_err(format!("concat rows: {c} vs {c0} columns")));
                    }
                    rows += r;
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.dims(p)?;
                    if r != r0 {
                        return Err(shape_err(format!("concat cols: {r} vs {r0} rows")));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
        };
        self.push(out, Op::Concat(parts.to_vec(), axis))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    fn check_mask(&self, a: Var, mask: Option<&[bool]>) -> Result<()> {
        if let Some(m) = mask {
            if m.len() != self.value(a).len() {
                return Err(shape_err(format!(
                    "mask of {} entries for tensor {:?}",
                    m.len(),
                    self.shape(a)
                )));
            }
        }
        Ok(())
    }

    /// Softmax along `axis`. Masked (`false`) positions get probability 0.
    pub fn softmax(&mut self, a: Var, axis: Axis, mask: Option<&[bool]>) -> Result<Var> {
        match axis {
            Axis::Cols => {
                self.dims(a)?;
                self.check_mask(a, mask)?;
                let cols = self.value(a).cols();
                let out = softmax_rows(self.value(a).data(), cols, mask);
                let out = Tensor::new(self.shape(a).to_vec(), out)?;
                self.push(out, Op::Softmax(a))
            }
            Axis::Rows => {
                let (r, c) = self.dims(a)?;
                let t = self.transpose(a)?;
                let tm = mask.map(|m| transpose_mask(m, r, c));
                let s = self.softmax(t, Axis::Cols, tm.as_deref())?;
                self.transpose(s)
            }
        }
    }

    /// Log-softmax along `axis`; masked positions are `-inf`.
    pub fn log_softmax(&mut self, a: Var, axis: Axis, mask: Option<&[bool]>) -> Result<Var> {
        match axis {
            Axis::Cols => {
                let (_, cols) = self.dims(a)?;
                self.check_mask(a, mask)?;
                let x = self.value(a).data();
                let mut out = vec![f64::NEG_INFINITY; x.len()];
                for (r, row) in x.chunks(cols).enumerate() {
                    let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
                    let lse = log_sum_exp((0..cols).filter(|&c| keep(c)).map(|c| row[c]));
                    for c in (0..cols).filter(|&c| keep(c)) {
                        out[r * cols + c] = row[c] - lse;
                    }
                }
                let out = Tensor::new(self.shape(a).to_vec(), out)?;
                self.push(out, Op::LogSoftmax(a, mask.map(Rc::from)))
            }
            Axis::Rows => {
                let (r, c) = self.dims(a)?;
                let t = self.transpose(a)?;
                let tm = mask.map(|m| transpose_mask(m, r, c));
                let s = self.log_softmax(t, Axis::Cols, tm.as_deref())?;
                self.transpose(s)
            }
        }
    }

    /// Reduces `axis`: `Cols` gives `r x 1`, `Rows` gives `1 x c`.
    pub fn logsumexp(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let x = self.value(a);
        let out = match axis {
            Axis::Cols => {
                let data = (0..r).map(|i| log_sum_exp(x.row(i).iter().copied())).collect();
                Tensor::matrix(r, 1, data)?
            }
            Axis::Rows => {
                let data = (0..c)
                    .map(|j| log_sum_exp((0..r).map(|i| x.get(i, j))))
                    .collect();
                Tensor::matrix(1, c, data)?
            }
        };
        self.push(out, Op::LogSumExp(a, axis))
    }

    /// Rows of `table` selected by `indices`, in order.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table)?;
        if indices.is_empty() {
            return Err(shape_err("embedding_lookup with no indices".into()));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(AutodiffError::IndexOutOfRange {
                    what: "embedding table",
                    index: i,
                    size: r,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        self.push(out, Op::Gather(table, Rc::from(indices)))
    }

    /// Inverted dropout. The keep mask is a pure function of
    /// `(seed, step, node id, element)`, so replays are bit-identical.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, seed: u64, step: u64) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(shape_err(format!("dropout probability {p} must be < 1")));
        }
        let node = self.nodes.len() as u64;
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(a).len() as u64)
            .map(|i| {
                if uniform_from_key(seed, step, node, i) < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Dropout(a, Rc::from(scale)))
    }

    /// Mean negative log-likelihood of `targets` under a row-wise (masked)
    /// softmax of `logits`. Rows with `None` targets are skipped; with no
    /// targeted rows the loss is 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (r, c) = self.dims(logits)?;
        self.check_mask(logits, mask)?;
        if targets.len() != r {
            return Err(shape_err(format!("{} targets for {r} rows", targets.len())));
        }
        let x = self.value(logits).data();
        let probs = softmax_rows(x, c, mask);
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(AutodiffError::IndexOutOfRange {
                        what: "cross_entropy target",
                        index: t,
                        size: c,
                    });
                }
                if mask.is_some_and(|m| !m[i * c + t]) {
                    return Err(shape_err(format!("target ({i}, {t}) is masked out")));
                }
                let row = &x[i * c..(i + 1) * c];
                let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
                let lse = log_sum_exp((0..c).filter(|&j| keep(j)).map(|j| row[j]));
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: Rc::from(targets),
                probs: Rc::from(probs),
                count,
            },
        )
    }

    /// Weighted mean binary cross-entropy of `sigmoid(logits)` against
    /// `targets` in `[0, 1]`. Weights act as a mask; all-zero weights give 0.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n || weights.len() != n {
            return Err(shape_err(format!(
                "bce: {n} logits, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let denom: f64 = weights.iter().sum();
        let x = self.value(logits).data();
        let loss = if denom > 0.0 {
            x.iter()
                .zip(targets)
                .zip(weights)
                .map(|((&x, &t), &w)| w * (softplus(x) - t * x))
                .sum::<f64>()
                / denom
        } else {
            0.0
        };
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: Rc::from(targets),
                weights: Rc::from(weights),
                denom,
            },
        )
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let limit = if axis == Axis::Rows { r } else { c };
        if len == 0 || start + len > limit {
            return Err(shape_err(format!(
                "slice {start}..{} of axis with {limit} entries",
                start + len
            )));
        }
        let x = self.value(a);
        let out = match axis {
            Axis::Rows => Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&x.row(i)[start..start + len]);
                }
                Tensor::matrix(r, len, data)?
            }
        };
        self.push(out, Op::Slice(a, axis, start, len))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims(a)?;
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = Tensor::new(shape, self.value(a).data().to_vec())?;
        self.push(out, Op::Reshape(a))
    }

    /// `a (p x m)` and `b (q x m)` to `(p*q) x m` with row `i*q + j` equal
    /// to `a[i] + b[j]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, m) = self.dims(a)?;
        let (q, m2) = self.dims(b)?;
        if m != m2 {
            return Err(shape_err(format!("pairwise_add: {m} vs {m2} columns")));
        }
        let (x, y) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(p * q * m);
        for i in 0..p {
            let xi = x.row(i);
            for j in 0..q {
                data.extend(xi.iter().zip(y.row(j)).map(|(u, v)| u + v));
            }
        }
        let out = Tensor::matrix(p * q, m, data)?;
        self.push(out, Op::PairwiseAdd(a, b))
    }

    /// The listed `(row, col)` cells as a `1 x k` row.
    pub fn pick(&mut self, a: Var, cells: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if cells.is_empty() {
            return Err(shape_err("pick with no cells".into()));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(cells.len());
        for &(i, j) in cells {
            if i >= r || j >= c {
                return Err(AutodiffError::IndexOutOfRange {
                    what: "pick cell",
                    index: i * c + j,
                    size: r * c,
                });
            }
            data.push(x.get(i, j));
        }
        let out = Tensor::row_vector(data);
        self.push(out, Op::Pick(a, Rc::from(cells)))
    }

    /// Gradients of `loss` for every node of the tape.
    pub fn grads(&self, loss: Var) -> Result<NodeGrads> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(NodeGrads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Accumulate `d loss / d param` into `store` for every parameter leaf.
    /// Calling it twice without zeroing doubles the stored gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.grads(loss)?;
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads.grads[id]) {
                store.accumulate(*pid, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (r, k, c) = (x.rows(), x.cols(), y.cols());
                acc(*a, &mut |buf| matmul_bt_into(g, y.data(), buf, r, c, k));
                acc(*b, &mut |buf| matmul_at_into(x.data(), g, buf, r, k, c));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| {
                    for ((o, d), yv) in buf.iter_mut().zip(g).zip(y) {
                        *o += d * yv;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, d), xv) in buf.iter_mut().zip(g).zip(x) {
                        *o += d * xv;
                    }
                });
            }
            Op::Scale(a, f) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += d * f));
            }
            Op::AddRow(a, bias) => {
                let c = out.cols();
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*bias, &mut |buf| {
                    for row in g.chunks(c) {
                        add_into(buf, row);
                    }
                });
            }
            Op::AddCol(a, col) => {
                let c = out.cols();
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*col, &mut |buf| {
                    for (o, row) in buf.iter_mut().zip(g.chunks(c)) {
                        *o += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let total_cols = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = (self.value(p).rows(), self.value(p).cols());
                    match axis {
                        Axis::Rows => {
                            let span = &g[offset * total_cols..(offset + r) * total_cols];
                            acc(p, &mut |buf| add_into(buf, span));
                            offset += r;
                        }
                        Axis::Cols => {
                            acc(p, &mut |buf| {
                                for i in 0..r {
                                    let src = &g[i * total_cols + offset..i * total_cols + offset + c];
                                    add_into(&mut buf[i * c..(i + 1) * c], src);
                                }
                            });
                            offset += c;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                acc(*a, &mut |buf| {
                    for ((o, d), y) in buf.iter_mut().zip(g).zip(out.data()) {
                        *o += d * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |buf| {
                    for ((o, d), y) in buf.iter_mut().zip(g).zip(out.data()) {
                        *o += d * y * (1.0 - y);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                acc(*a, &mut |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for ((o, d), y) in brow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (d - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a, mask) => {
                let c = out.cols();
                acc(*a, &mut |buf| {
                    for (r, ((brow, grow), yrow)) in buf
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(out.data().chunks(c))
                        .enumerate()
                    {
                        let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
                        let gsum: f64 = (0..c).filter(|&j| keep(j)).map(|j| grow[j]).sum();
                        for j in (0..c).filter(|&j| keep(j)) {
                            brow[j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LogSumExp(a, axis) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            let (lse, d) = match axis {
                                Axis::Cols => (out.data()[i], g[i]),
                                Axis::Rows => (out.data()[j], g[j]),
                            };
                            if lse != f64::NEG_INFINITY {
                                buf[i * c + j] += d * (x.get(i, j) - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::Gather(table, indices) => {
                let c = out.cols();
                acc(*table, &mut |buf| {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut buf[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Dropout(a, scale) => {
                acc(*a, &mut |buf| {
                    for ((o, d), s) in buf.iter_mut().zip(g).zip(scale.iter()) {
                        *o += d * s;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let c = self.value(*logits).cols();
                let w = g[0] / *count as f64;
                acc(*logits, &mut |buf| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..c {
                                buf[i * c + j] += w * probs[i * c + j];
                            }
                            buf[i * c + t] -= w;
                        }
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
                denom,
            } => {
                if *denom <= 0.0 {
                    return;
                }
                let x = self.value(*logits).data();
                let scale = g[0] / denom;
                acc(*logits, &mut |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += scale * weights[i] * (sigmoid(x[i]) - targets[i]);
                    }
                });
            }
            Op::Slice(a, axis, start, len) => {
                let c = self.value(*a).cols();
                acc(*a, &mut |buf| match axis {
                    Axis::Rows => add_into(&mut buf[start * c..(start + len) * c], g),
                    Axis::Cols => {
                        for (i, grow) in g.chunks(*len).enumerate() {
                            add_into(&mut buf[i * c + start..i * c + start + len], grow);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |buf| add_into(buf, g)),
            Op::PairwiseAdd(a, b) => {
                let (p, m) = (self.value(*a).rows(), self.value(*a).cols());
                let q = self.value(*b).rows();
                acc(*a, &mut |buf| {
                    for i in 0..p {
                        for j in 0..q {
                            let row = &g[(i * q + j) * m..(i * q + j + 1) * m];
                            add_into(&mut buf[i * m..(i + 1) * m], row);
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..p {
                        for j in 0..q {
                            let row = &g[(i * q + j) * m..(i * q + j + 1) * m];
                            add_into(&mut buf[j * m..(j + 1) * m], row);
                        }
                    }
                });
            }
            Op::Pick(a, cells) => {
                let c = self.value(*a).cols();
                acc(*a, &mut |buf| {
                    for (k, &(i, j)) in cells.iter().enumerate() {
                        buf[i * c + j] += g[k];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, d)| *o += d);
}

fn transpose_mask(mask: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = mask[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(1, 3));
        let s = g.softmax(x, Axis::Cols, None).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_cells() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 3, vec![5.0, 1.0, 2.0]).unwrap());
        let s = g.softmax(x, Axis::Cols, Some(&[false, true, true])).unwrap();
        let v = g.value(s).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_of_single_value_is_identity() {
        for a in [-3.5, 0.0, 1e-3, 42.0] {
            let mut g = Graph::new();
            let x = g.input(Tensor::scalar(a));
            let l = g.logsumexp(x, Axis::Cols).unwrap();
            assert_eq!(g.value(l).item(), a);
        }
    }

    #[test]
    fn sum_loss_gives_ones_and_zero_scale_gives_zeros() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::matrix(2, 2, vec![1., -2., 3., 0.5]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let s = g.sum(x).unwrap();
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0; 4]);

        store.zero_grads();
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let z = g.scale(x, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[0.0; 4]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row_vector(vec![2.0, 3.0])).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s, &mut store).unwrap();
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[8.0, 12.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(2, 2));
        assert!(matches!(
            g.backward(x, &mut store),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn finite_checks_flag_nan() {
        let mut g = Graph::new().with_finite_checks(true);
        let x = g.input(Tensor::scalar(f64::NAN));
        assert!(matches!(
            g.tanh(x),
            Err(AutodiffError::NonFiniteValue { op: "tanh" })
        ));
    }

    #[test]
    fn dropout_is_identity_when_disabled_and_replayable_when_on() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(4, 4, 1.0));
        assert_eq!(g.dropout(x, 0.5, false, 1, 1).unwrap(), x);
        let a = g.dropout(x, 0.5, true, 1, 1).unwrap();
        let mut h = Graph::new();
        let y = h.input(Tensor::full(4, 4, 1.0));
        let b = h.dropout(y, 0.5, true, 1, 1).unwrap();
        assert_eq!(g.value(a), h.value(b));
        assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn cross_entropy_without_targets_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(2, 3));
        let l = g.cross_entropy(x, &[None, None], None).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
