//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! Every operation appends a node holding its forward value; nodes are
//! created in topological order, so the backward sweep simply walks the tape
//! from the loss towards the leaves. Values are never mutated after they are
//! recorded. Each operation checks its output for NaN/Inf.

use super::tensor::Tensor;
use super::NumericsError;

/// Rows with a Euclidean norm below this are left unchanged by
/// [`Graph::l2_normalize_rows`].
pub const NORM_GUARD: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var, Vec<usize>, Vec<usize>),
    Sub(Var, Var, Vec<usize>, Vec<usize>),
    Mul(Var, Var, Vec<usize>, Vec<usize>),
    Relu(Var),
    Tanh(Var),
    RowSoftmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    L2NormalizeRows(Var, Vec<f64>),
    PairwiseSqDists(Var, Var, Vec<bool>),
    GatherRows(Var, Vec<usize>),
    Scale(Var, f64),
    Transpose(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::RowSoftmax(_) => "row_softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::PairwiseSqDists(..) => "pairwise_sq_dists",
            Op::GatherRows(..) => "gather_rows",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A computation tape. Build a graph per forward pass, call
/// [`Graph::backward`] once, then read leaf gradients from [`Gradients`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFiniteValue { op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Rows that [`Graph::l2_normalize_rows`] left unchanged because their
    /// norm was below [`NORM_GUARD`]. Empty for other nodes.
    pub fn guarded_rows(&self, var: Var) -> Vec<usize> {
        match &self.nodes[var.0].op {
            Op::L2NormalizeRows(_, norms) => norms
                .iter()
                .enumerate()
                .filter(|(_, &n)| n < NORM_GUARD)
                .map(|(i, _)| i)
                .collect(),
            _ => Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFiniteValue { op: op.name() });
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b, ..)
            | Op::Sub(a, b, ..)
            | Op::Mul(a, b, ..)
            | Op::PairwiseSqDists(a, b, _) => vec![*a, *b],
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::RowSoftmax(a)
            | Op::LogSoftmax(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::L2NormalizeRows(a, _)
            | Op::GatherRows(a, _)
            | Op::Scale(a, _)
            | Op::Transpose(a) => vec![*a],
        }
    }

    fn dims2(&self, var: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        self.value(var).dims2().ok_or_else(|| NumericsError::ShapeMismatch {
            op,
            shapes: vec![self.shape(var).to_vec()],
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::Matmul(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (value, ma, mb) = self.broadcast_zip(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b, ma, mb), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (value, ma, mb) = self.broadcast_zip(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b, ma, mb), value)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (value, ma, mb) = self.broadcast_zip(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b, ma, mb), value)
    }

    fn broadcast_zip(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Vec<usize>, Vec<usize>), NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| NumericsError::ShapeMismatch {
            op,
            shapes: vec![sa.to_vec(), sb.to_vec()],
        })?;
        let ma = expand_index(&out_shape, sa);
        let mb = expand_index(&out_shape, sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok((Tensor::new(out_shape, data)?, ma, mb))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// Softmax over each row of an `[m, n]` tensor, computed after subtracting
    /// the row maximum.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(a, "row_softmax")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                out[i * n + j] = exps[j] / z;
            }
        }
        self.push(Op::RowSoftmax(a), Tensor::new(vec![m, n], out)?)
    }

    /// `log(row_softmax(a))` evaluated without forming the softmax, so that
    /// saturated rows stay finite.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(a, "log_softmax")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        self.push(Op::LogSoftmax(a), Tensor::new(vec![m, n], out)?)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Log(a), value)
    }

    /// Sum of all entries, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Mean of all entries, shape `[]`.
    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "mean",
                shapes: vec![t.shape().to_vec()],
            });
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Sum of an `[m, n]` tensor along `axis`: 0 gives `[n]`, 1 gives `[m]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(a, "sum_axis")?;
        let t = self.value(a);
        let value = match axis {
            0 => Tensor::vector((0..n).map(|j| (0..m).map(|i| t.at(i, j)).sum()).collect()),
            1 => Tensor::vector((0..m).map(|i| t.row(i).iter().sum()).collect()),
            _ => {
                return Err(NumericsError::ShapeMismatch {
                    op: "sum_axis",
                    shapes: vec![vec![m, n], vec![axis]],
                })
            }
        };
        self.push(Op::SumAxis(a, axis), value)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(a, "mean_axis")?;
        let count = if axis == 0 { m } else { n };
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Divides each row by its Euclidean norm. Rows with norm below
    /// [`NORM_GUARD`] pass through unchanged (see [`Graph::guarded_rows`]).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(a, "l2_normalize_rows")?;
        let t = self.value(a);
        let norms: Vec<f64> = (0..m).map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut out = t.data().to_vec();
        for i in 0..m {
            if norms[i] >= NORM_GUARD {
                for v in &mut out[i * n..(i + 1) * n] {
                    *v /= norms[i];
                }
            }
        }
        self.push(Op::L2NormalizeRows(a, norms), Tensor::new(vec![m, n], out)?)
    }

    /// Squared Euclidean distances between rows of `x: [m, d]` and
    /// `y: [n, d]`, via `|x|^2 + |y|^2 - 2 x.y` clamped at zero.
    pub fn pairwise_sq_dists(&mut self, x: Var, y: Var) -> Result<Var, NumericsError> {
        let (m, d) = self.dims2(x, "pairwise_sq_dists")?;
        let (n, d2) = self.dims2(y, "pairwise_sq_dists")?;
        if d != d2 {
            return Err(NumericsError::ShapeMismatch {
                op: "pairwise_sq_dists",
                shapes: vec![vec![m, d], vec![n, d2]],
            });
        }
        let (tx, ty) = (self.value(x), self.value(y));
        let sq = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
        let nx: Vec<f64> = (0..m).map(|i| sq(tx.row(i))).collect();
        let ny: Vec<f64> = (0..n).map(|j| sq(ty.row(j))).collect();
        let mut out = vec![0.0; m * n];
        let mut clamped = vec![false; m * n];
        for i in 0..m {
            for j in 0..n {
                let dot: f64 = tx.row(i).iter().zip(ty.row(j)).map(|(a, b)| a * b).sum();
                let v = nx[i] + ny[j] - 2.0 * dot;
                if v < 0.0 {
                    clamped[i * n + j] = true;
                } else {
                    out[i * n + j] = v;
                }
            }
        }
        self.push(Op::PairwiseSqDists(x, y, clamped), Tensor::new(vec![m, n], out)?)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_rows",
                shapes: vec![vec![m, n], vec![bad]],
            });
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        self.push(Op::GatherRows(a, rows.to_vec()), value)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).transpose()?;
        self.push(Op::Transpose(a), value)
    }

    /// Reverse-mode sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.backward_done {
            return Err(NumericsError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if !shape.is_empty() {
            return Err(NumericsError::NonScalarLoss { shape: shape.to_vec() });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (input, contribution) in self.local_grads(&node.op, &node.value, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        // keep only gradients of nodes that asked for one
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>, NumericsError> {
        let val = |v: Var| self.value(v);
        Ok(match op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) => {
                let da = g.matmul(&val(*b).transpose()?)?;
                let db = val(*a).transpose()?.matmul(g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b, ma, mb) => vec![
                (*a, reduce_to(g.data(), ma, val(*a).shape())),
                (*b, reduce_to(g.data(), mb, val(*b).shape())),
            ],
            Op::Sub(a, b, ma, mb) => {
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                vec![
                    (*a, reduce_to(g.data(), ma, val(*a).shape())),
                    (*b, reduce_to(&neg, mb, val(*b).shape())),
                ]
            }
            Op::Mul(a, b, ma, mb) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let ga: Vec<f64> = g.data().iter().zip(mb).map(|(gv, &j)| gv * db[j]).collect();
                let gb: Vec<f64> = g.data().iter().zip(ma).map(|(gv, &i)| gv * da[i]).collect();
                vec![
                    (*a, reduce_to(&ga, ma, val(*a).shape())),
                    (*b, reduce_to(&gb, mb, val(*b).shape())),
                ]
            }
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }))],
            Op::Tanh(a) => vec![(*a, g.zip_map(out, |gv, y| gv * (1.0 - y * y)))],
            Op::RowSoftmax(a) => {
                let (m, n) = out.dims2().expect("rank 2");
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let (y, gr) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dx[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(vec![m, n], dx)?)]
            }
            Op::LogSoftmax(a) => {
                let (m, n) = out.dims2().expect("rank 2");
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let (y, gr) = (out.row(i), g.row(i));
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        dx[i * n + j] = gr[j] - y[j].exp() * gsum;
                    }
                }
                vec![(*a, Tensor::new(vec![m, n], dx)?)]
            }
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |gv, x| gv / x))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let t = val(*a);
                vec![(*a, Tensor::full(t.shape(), g.item() / t.len() as f64))]
            }
            Op::SumAxis(a, axis) => {
                let (m, n) = val(*a).dims2().expect("rank 2");
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                vec![(*a, Tensor::new(vec![m, n], dx)?)]
            }
            Op::L2NormalizeRows(a, norms) => {
                let (m, n) = out.dims2().expect("rank 2");
                let mut dx = g.data().to_vec();
                for i in 0..m {
                    if norms[i] < NORM_GUARD {
                        continue;
                    }
                    let (y, gr) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - y[j] * dot) / norms[i];
                    }
                }
                vec![(*a, Tensor::new(vec![m, n], dx)?)]
            }
            Op::PairwiseSqDists(x, y, clamped) => {
                let (tx, ty) = (val(*x), val(*y));
                let (m, d) = tx.dims2().expect("rank 2");
                let n = ty.shape()[0];
                let mut dx = vec![0.0; m * d];
                let mut dy = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        if clamped[i * n + j] {
                            continue;
                        }
                        let gij = g.data()[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = 2.0 * gij * (tx.at(i, k) - ty.at(j, k));
                            dx[i * d + k] += diff;
                            dy[j * d + k] -= diff;
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(vec![m, d], dx)?),
                    (*y, Tensor::new(vec![n, d], dy)?),
                ]
            }
            Op::GatherRows(a, rows) => {
                let src = val(*a);
                let (_, n) = src.dims2().expect("rank 2");
                let mut dx = Tensor::zeros(src.shape());
                for (r, &row) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx.data_mut()[row * n + j] += g.data()[r * n + j];
                    }
                }
                vec![(*a, dx)]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|v| v * f))],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
        })
    }
}

/// Right-aligned broadcasting: each dimension pair must match or one side
/// must be 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let pad = r - s.len();
        if i < pad {
            1
        } else {
            s[i - pad]
        }
    };
    (0..r)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each flat index of `out`, the flat index of the broadcast input.
fn expand_index(out: &[usize], input: &[usize]) -> Vec<usize> {
    let r = out.len();
    let pad = r - input.len();
    let mut strides = vec![0usize; r];
    let mut acc = 1;
    for i in (0..r).rev() {
        let d = if i < pad { 1 } else { input[i - pad] };
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for k in (0..r).rev() {
            idx[k] += 1;
            if idx[k] < out[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    map
}

fn reduce_to(g: &[f64], map: &[usize], shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    for (gv, &i) in g.iter().zip(map) {
        out.data_mut()[i] += gv;
    }
    out
}
