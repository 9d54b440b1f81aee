//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every primitive appends one node holding its forward value. Nodes are
//! appended after their inputs, so walking the tape backwards visits each node
//! once in reverse topological order. Parameters enter the tape through
//! [`Tape::param`]; [`Tape::backward`] accumulates their gradients into the
//! owning [`ParamStore`] and clears the tape.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::topk::topk_rows;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// Reduction axis, named by the dimension that disappears.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows: `R×C -> 1×C`.
    Rows,
    /// Collapse columns: `R×C -> R×1`.
    Cols,
    /// `R×C -> 1×1`.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    ScalarMul,
    AddScalar,
    Mul,
    RowSoftmax,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Square,
    Sqrt,
    Clamp,
    LayerNorm,
    Linear,
    ConcatCols,
    SliceCols,
    ReduceMean,
    ReduceSum,
    SqL2NormRows,
    Transpose,
    BroadcastRows,
    GatherRows,
    TopKMeanRows,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::Param => "param",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::ScalarMul => "scalar_mul",
            Primitive::AddScalar => "add_scalar",
            Primitive::Mul => "elementwise_mul",
            Primitive::RowSoftmax => "row_softmax",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Clamp => "clamp",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Linear => "linear",
            Primitive::ConcatCols => "concat_last_dim",
            Primitive::SliceCols => "slice_cols",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::ReduceSum => "reduce_sum",
            Primitive::SqL2NormRows => "sq_l2_norm_rows",
            Primitive::Transpose => "transpose",
            Primitive::BroadcastRows => "broadcast_row",
            Primitive::GatherRows => "gather_rows",
            Primitive::TopKMeanRows => "topk_mean_rows",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    RowSoftmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Reduce {
        x: Var,
        axis: Axis,
        mean: bool,
    },
    SqL2NormRows(Var),
    Transpose(Var),
    BroadcastRows(Var),
    GatherRows(Var, Vec<usize>),
    TopKMeanRows(Var, usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a 1×1 node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, kind: Primitive, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn out(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).expect("primitive produced consistent shape")
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        let value = Self::out(r, c, t.into_data());
        self.push(Primitive::Leaf, Op::Leaf, value, &[])
    }

    /// Records a parameter; it participates in backward iff it is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        let (r, c) = t.dims2()?;
        if !t.is_finite() {
            return Err(Error::NumericFault {
                op: Primitive::Param.name(),
            });
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Self::out(r, c, t.data().to_vec()),
            requires_grad: t.requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, kind: Primitive, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::contract(
                kind.name(),
                format!("shape mismatch {da:?} vs {db:?}"),
            ));
        }
        Ok(da)
    }

    fn map(&mut self, kind: Primitive, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(kind, op, Self::out(r, c, data), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::contract(
                "matmul",
                format!("inner dims differ: {m}x{k} · {k2}x{n}"),
            ));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), &mut c);
        self.push(Primitive::MatMul, Op::MatMul(a, b), Self::out(m, n, c), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(Primitive::Add, a, b)?;
        let data = zip_with(self.data(a), self.data(b), |x, y| x + y);
        self.push(Primitive::Add, Op::Add(a, b), Self::out(r, c, data), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(Primitive::Sub, a, b)?;
        let data = zip_with(self.data(a), self.data(b), |x, y| x - y);
        self.push(Primitive::Sub, Op::Sub(a, b), Self::out(r, c, data), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(Primitive::Mul, a, b)?;
        let data = zip_with(self.data(a), self.data(b), |x, y| x * y);
        self.push(Primitive::Mul, Op::Mul(a, b), Self::out(r, c, data), &[a, b])
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(Primitive::ScalarMul, Op::ScalarMul(x, s), x, |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(Primitive::AddScalar, Op::AddScalar(x), x, |v| v + s)
    }

    /// `s - x`.
    pub fn rsub_scalar(&mut self, s: f64, x: Var) -> Result<Var> {
        let neg = self.scalar_mul(x, -1.0)?;
        self.add_scalar(neg, s)
    }

    /// Softmax along each row, with the row max subtracted first.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(Primitive::RowSoftmax, Op::RowSoftmax(x), Self::out(r, c, data), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(Primitive::Sigmoid, Op::Sigmoid(x), x, sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(Primitive::Relu, Op::Relu(x), x, |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(Primitive::Exp, Op::Exp(x), x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(Primitive::Log, Op::Log(x), x, f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(Primitive::Square, Op::Square(x), x, |v| v * v)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.map(Primitive::Sqrt, Op::Sqrt(x), x, f64::sqrt)
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input was inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(Primitive::Clamp, Op::Clamp(x, lo, hi), x, |v| v.clamp(lo, hi))
    }

    /// Row-wise layer normalization with affine `gain`, `bias` (both `1×C`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::contract(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must be 1x{c}",
                    self.dims(gain),
                    self.dims(bias)
                ),
            ));
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                y[i * c + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push(Primitive::LayerNorm, op, Self::out(r, c, y), &[x, gain, bias])
    }

    /// Affine map `x·w + b` with `b` of shape `1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(x), self.dims(w));
        if k != k2 || self.dims(b) != (1, n) {
            return Err(Error::contract(
                "linear",
                format!(
                    "x {m}x{k}, w {k2}x{n}, b {:?} are incompatible",
                    self.dims(b)
                ),
            ));
        }
        let bias = self.data(b);
        let mut y: Vec<f64> = (0..m).flat_map(|_| bias.iter().copied()).collect();
        gemm_acc(m, k, n, self.data(x), (k, 1), self.data(w), (n, 1), &mut y);
        self.push(
            Primitive::Linear,
            Op::Linear { x, w, b },
            Self::out(m, n, y),
            &[x, w, b],
        )
    }

    /// Concatenates along the last (column) dimension.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ra, ca), (rb, cb)) = (self.dims(a), self.dims(b));
        if ra != rb {
            return Err(Error::contract(
                "concat_last_dim",
                format!("row counts differ: {ra} vs {rb}"),
            ));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        self.push(
            Primitive::ConcatCols,
            Op::ConcatCols(a, b),
            Self::out(ra, ca + cb, data),
            &[a, b],
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(Error::contract(
                "slice_cols",
                format!("range {start}..{end} invalid for {c} columns"),
            ));
        }
        let d = self.data(x);
        let data = (0..r)
            .flat_map(|i| d[i * c + start..i * c + end].iter().copied())
            .collect();
        self.push(
            Primitive::SliceCols,
            Op::SliceCols(x, start),
            Self::out(r, end - start, data),
            &[x],
        )
    }

    fn reduce(&mut self, x: Var, axis: Axis, mean: bool) -> Result<Var> {
        let (r, c) = self.dims(x);
        let d = self.data(x);
        let (or, oc, mut data) = match axis {
            Axis::Rows => {
                let mut s = vec![0.0; c];
                for row in d.chunks(c) {
                    s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                (1, c, s)
            }
            Axis::Cols => (r, 1, d.chunks(c).map(|row| row.iter().sum()).collect()),
            Axis::All => (1, 1, vec![d.iter().sum()]),
        };
        if mean {
            let n = match axis {
                Axis::Rows => r,
                Axis::Cols => c,
                Axis::All => r * c,
            } as f64;
            data.iter_mut().for_each(|v| *v /= n);
        }
        let kind = if mean {
            Primitive::ReduceMean
        } else {
            Primitive::ReduceSum
        };
        self.push(kind, Op::Reduce { x, axis, mean }, Self::out(or, oc, data), &[x])
    }

    pub fn reduce_mean(&mut self, x: Var, axis: Axis) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn reduce_sum(&mut self, x: Var, axis: Axis) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Squared Euclidean norm of every row, `R×C -> R×1`.
    pub fn sq_l2_norm_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data = self
            .data(x)
            .chunks(c)
            .map(|row| row.iter().map(|v| v * v).sum())
            .collect();
        self.push(
            Primitive::SqL2NormRows,
            Op::SqL2NormRows(x),
            Self::out(r, 1, data),
            &[x],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let d = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = d[i * c + j];
            }
        }
        self.push(Primitive::Transpose, Op::Transpose(x), Self::out(c, r, data), &[x])
    }

    /// Repeats a `1×C` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r != 1 || rows == 0 {
            return Err(Error::contract(
                "broadcast_row",
                format!("need a 1xC input and rows > 0, got {r}x{c} -> {rows}"),
            ));
        }
        let d = self.data(x);
        let data = (0..rows).flat_map(|_| d.iter().copied()).collect();
        self.push(
            Primitive::BroadcastRows,
            Op::BroadcastRows(x),
            Self::out(rows, c, data),
            &[x],
        )
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if indices.is_empty() || indices.iter().any(|&i| i >= r) {
            return Err(Error::contract(
                "gather_rows",
                format!("indices {indices:?} invalid for {r} rows"),
            ));
        }
        let d = self.data(x);
        let data = indices
            .iter()
            .flat_map(|&i| d[i * c..(i + 1) * c].iter().copied())
            .collect();
        self.push(
            Primitive::GatherRows,
            Op::GatherRows(x, indices.to_vec()),
            Self::out(indices.len(), c, data),
            &[x],
        )
    }

    /// Mean of the `k` largest entries of each row, `R×C -> R×1`.
    pub fn topk_mean_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        let d = self.data(x);
        let mut selected = Vec::with_capacity(r * k);
        let mut data = Vec::with_capacity(r);
        for row in d.chunks(c) {
            let (idx, mean) = topk_rows(row, k)?;
            selected.extend(idx);
            data.push(mean);
        }
        self.push(
            Primitive::TopKMeanRows,
            Op::TopKMeanRows(x, k, selected),
            Self::out(r, 1, data),
            &[x],
        )
    }

    /// Back-propagates from the scalar `loss`, accumulates gradients into the
    /// trainable parameters of `store`, then clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, has {numel} values"),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads, store)?;
        }
        self.clear();
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let (r, c) = (node.value.rows(), node.value.cols());
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(a) => a.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericFault { op: "backward" });
                }
                store.get_mut(*id).accumulate_grad(g);
            }
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.dims(*a), self.dims(*b));
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), self.data(*b), (1, n), &mut da);
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), (1, k), g, (n, 1), &mut db);
                    acc(*b, db);
                }
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
                acc(*a, zip_with(g, self.data(*b), |g, y| g * y));
                acc(*b, zip_with(g, self.data(*a), |g, x| g * x));
            }
            Op::ScalarMul(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::RowSoftmax(x) => {
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let (ys, gs) = (&y[row * c..(row + 1) * c], &g[row * c..(row + 1) * c]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Sigmoid(x) => acc(*x, zip_with(g, y, |g, s| g * s * (1.0 - s))),
            Op::Relu(x) => acc(
                *x,
                zip_with(g, self.data(*x), |g, v| if v > 0.0 { g } else { 0.0 }),
            ),
            Op::Exp(x) => acc(*x, zip_with(g, y, |g, e| g * e)),
            Op::Log(x) => acc(*x, zip_with(g, self.data(*x), |g, v| g / v)),
            Op::Square(x) => acc(*x, zip_with(g, self.data(*x), |g, v| 2.0 * g * v)),
            Op::Sqrt(x) => acc(
                *x,
                zip_with(g, y, |g, s| if s > 0.0 { g / (2.0 * s) } else { 0.0 }),
            ),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                zip_with(g, self.data(*x), |g, v| {
                    if v >= *lo && v <= *hi {
                        g
                    } else {
                        0.0
                    }
                }),
            ),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gn = self.data(*gain);
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for row in 0..r {
                    let base = row * c;
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        let gy = g[base + j];
                        let d = gy * gn[j];
                        mean_d += d;
                        mean_dh += d * xhat[base + j];
                        dg[j] += gy * xhat[base + j];
                        db[j] += gy;
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    for j in 0..c {
                        let d = g[base + j] * gn[j];
                        dx[base + j] = rstd[row] * (d - mean_d - xhat[base + j] * mean_dh);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Linear { x, w, b } => {
                let ((m, k), (_, n)) = (self.dims(*x), self.dims(*w));
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), self.data(*w), (1, n), &mut dx);
                    acc(*x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*x), (1, k), g, (n, 1), &mut dw);
                    acc(*w, dw);
                }
                let mut dbias = vec![0.0; n];
                for row in g.chunks(n) {
                    dbias.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc(*b, dbias);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.dims(*a).1, self.dims(*b).1);
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for row in g.chunks(c) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::SliceCols(x, start) => {
                let xc = self.dims(*x).1;
                let mut dx = vec![0.0; r * xc];
                for row in 0..r {
                    dx[row * xc + start..row * xc + start + c]
                        .copy_from_slice(&g[row * c..(row + 1) * c]);
                }
                acc(*x, dx);
            }
            Op::Reduce { x, axis, mean } => {
                let (xr, xc) = self.dims(*x);
                let scale = if *mean {
                    1.0 / match axis {
                        Axis::Rows => xr,
                        Axis::Cols => xc,
                        Axis::All => xr * xc,
                    } as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; xr * xc];
                for ii in 0..xr {
                    for j in 0..xc {
                        let up = match axis {
                            Axis::Rows => g[j],
                            Axis::Cols => g[ii],
                            Axis::All => g[0],
                        };
                        dx[ii * xc + j] = up * scale;
                    }
                }
                acc(*x, dx);
            }
            Op::SqL2NormRows(x) => {
                let xc = self.dims(*x).1;
                let xs = self.data(*x);
                let dx = (0..xs.len()).map(|t| 2.0 * xs[t] * g[t / xc]).collect();
                acc(*x, dx);
            }
            Op::Transpose(x) => {
                // g is c×r here in terms of the output (r = out rows = x cols).
                let mut dx = vec![0.0; r * c];
                for ii in 0..r {
                    for j in 0..c {
                        dx[j * r + ii] = g[ii * c + j];
                    }
                }
                acc(*x, dx);
            }
            Op::BroadcastRows(x) => {
                let mut dx = vec![0.0; c];
                for row in g.chunks(c) {
                    dx.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc(*x, dx);
            }
            Op::GatherRows(x, indices) => {
                let (xr, xc) = self.dims(*x);
                let mut dx = vec![0.0; xr * xc];
                for (row, &src) in indices.iter().enumerate() {
                    for j in 0..xc {
                        dx[src * xc + j] += g[row * xc + j];
                    }
                }
                acc(*x, dx);
            }
            Op::TopKMeanRows(x, k, selected) => {
                let (xr, xc) = self.dims(*x);
                let mut dx = vec![0.0; xr * xc];
                for row in 0..xr {
                    for &j in &selected[row * k..(row + 1) * k] {
                        dx[row * xc + j] += g[row] / *k as f64;
                    }
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `c = a·b` for an `m×k` by `k×n` product; strides are `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
) {
    c.iter_mut().for_each(|v| *v = 0.0);
    gemm_acc(m, k, n, a, sa, b, sb, c);
}

/// `c += a·b`, `c` row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * sa.0 + (k - 1) * sa.1 + 1);
    debug_assert!(b.len() >= (k - 1) * sb.0 + (n - 1) * sb.1 + 1);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the debug assertions above spell out the bounds every caller
    // satisfies: `a` covers an m×k view, `b` a k×n view and `c` is m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn uniform_softmax_row() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[vec![0.0; 4]]);
        let y = t.row_softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[vec![0.0]]);
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.item(y).unwrap(), 0.5);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let a_rows = vec![vec![1.0, -2.0, 3.5], vec![0.0, 4.0, 1.0], vec![7.0, 8.0, -9.0]];
        let i = t.constant(Tensor::identity(3)).unwrap();
        let a = leaf(&mut t, &a_rows);
        let y = t.matmul(i, a).unwrap();
        assert_eq!(t.value(y).data(), t.value(a).data());
    }

    #[test]
    fn layer_norm_hand_values() {
        // mean 2, variance 2/3: (x - 2) / sqrt(2/3 + 1e-5)
        let mut t = Tape::new();
        let x = leaf(&mut t, &[vec![1.0, 2.0, 3.0]]);
        let g = leaf(&mut t, &[vec![1.0; 3]]);
        let b = leaf(&mut t, &[vec![0.0; 3]]);
        let y = t.layer_norm(x, g, b).unwrap();
        let expected = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        let out = t.value(y).data();
        assert!((out[0] + expected).abs() < 1e-12);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - expected).abs() < 1e-12);
        assert!((out[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let mut t = Tape::new();
        let x = t.param(&store, id).unwrap();
        let sq = t.square(x).unwrap();
        let loss = t.reduce_sum(sq, Axis::All).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_deref(), Some(&[2.0, 4.0][..]));
        assert!(t.is_empty());
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(0.0));
        let mut t = Tape::new();
        let w = t.param(&store, id).unwrap();
        let loss = t.sigmoid(w).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_deref(), Some(&[0.25][..]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::zeros(1, 2));
        let mut t = Tape::new();
        let x = t.param(&store, id).unwrap();
        assert!(matches!(
            t.backward(x, &mut store),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[vec![0.0]]);
        match t.log(x) {
            Err(Error::NumericFault { op }) => assert_eq!(op, "log"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[vec![1.0, 2.0]]);
        let b = leaf(&mut t, &[vec![1.0], vec![2.0], vec![3.0]]);
        assert!(matches!(t.matmul(a, b), Err(Error::Contract { .. })));
        assert!(matches!(t.add(a, b), Err(Error::Contract { .. })));
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(3.0));
        store.set_trainable(id, false);
        let mut t = Tape::new();
        let x = t.param(&store, id).unwrap();
        let loss = t.square(x).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert!(store.get(id).grad.is_none());
    }
}
