use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{gemm, SparseMatrix, Tensor};
use super::TensorError;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    AddRow(usize, usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    SegmentSum(usize, Rc<Vec<usize>>),
    GatherRows(usize, Rc<Vec<usize>>),
    ConcatRows(Vec<usize>),
    Spmm(Rc<SparseMatrix>, usize),
    L2Norm(usize),
    Cosine(usize, usize),
    LogSumExp(usize),
    LogSumExpRows(usize),
    RowNormalize(usize),
    PairwiseL2(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of operations for one reverse pass.
///
/// Recording order is a topological order, so backward simply walks the
/// nodes in reverse. A tape can be differentiated once; a second call to
/// [`Tape::backward`] fails with [`TensorError::TapeConsumed`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> TensorError {
    TensorError::ShapeMismatch { op, left: a, right: b }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Stacks rows of several variables with equal column counts.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let nodes = self.nodes.borrow();
        let Some(first) = parts.first() else {
            return Err(mismatch("concat_rows", (0, 0), (0, 0)));
        };
        let cols = nodes[first.id].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut needs = false;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.cols() != cols {
                return Err(mismatch("concat_rows", (rows, cols), v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
            needs |= nodes[p.id].needs_grad;
        }
        drop(nodes);
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), needs))
    }

    /// Runs the reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|n| n.value.shape()).collect();
        if shapes[loss.id] != (1, 1) {
            return Err(mismatch("backward", shapes[loss.id], (1, 1)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|data| Tensor::new(n.value.rows(), n.value.cols(), data).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], target: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[target].needs_grad {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(a, k) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g));
        }
        Op::Shift(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            accumulate(nodes, grads, *a, |s| {
                gemm(m, n, k, g, (n, 1), bv.data(), (1, n), s, 1.0);
            });
            accumulate(nodes, grads, *b, |s| {
                gemm(k, m, n, av.data(), (1, k), g, (n, 1), s, 1.0);
            });
        }
        Op::Transpose(a) => {
            let (r, c) = out.shape();
            accumulate(nodes, grads, *a, |s| {
                // s is c x r, g is r x c
                for i in 0..r {
                    for j in 0..c {
                        s[j * r + i] += g[i * c + j];
                    }
                }
            });
        }
        Op::Relu(a) => {
            let av = val(*a).data();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    if av[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Exp(a) => {
            let ov = out.data();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * ov[i];
                }
            });
        }
        Op::Log(a) => {
            let av = val(*a).data();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / av[i];
                }
            });
        }
        Op::Softplus(a) => {
            let av = val(*a).data();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * sigmoid(av[i]);
                }
            });
        }
        Op::AddRow(a, row) => {
            let n = out.cols();
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *row, |s| {
                for chunk in g.chunks(n) {
                    s.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::SumAll(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::SumRows(a) => {
            let n = out.cols();
            accumulate(nodes, grads, *a, |s| {
                for chunk in s.chunks_mut(n) {
                    chunk.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::SumCols(a) => {
            let n = val(*a).cols();
            accumulate(nodes, grads, *a, |s| {
                for (r, chunk) in s.chunks_mut(n).enumerate() {
                    chunk.iter_mut().for_each(|s| *s += g[r]);
                }
            });
        }
        Op::SegmentSum(a, offsets) => {
            let d = out.cols();
            accumulate(nodes, grads, *a, |s| {
                for (seg, w) in offsets.windows(2).enumerate() {
                    let src = &g[seg * d..(seg + 1) * d];
                    for r in w[0]..w[1] {
                        s[r * d..(r + 1) * d].iter_mut().zip(src).for_each(|(s, g)| *s += g);
                    }
                }
            });
        }
        Op::GatherRows(a, idx) => {
            let d = out.cols();
            accumulate(nodes, grads, *a, |s| {
                for (k, &r) in idx.iter().enumerate() {
                    s[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[k * d..(k + 1) * d])
                        .for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).len();
                let chunk = &g[start..start + len];
                accumulate(nodes, grads, p, |s| s.iter_mut().zip(chunk).for_each(|(s, g)| *s += g));
                start += len;
            }
        }
        Op::Spmm(m, a) => {
            let d = out.cols();
            accumulate(nodes, grads, *a, |s| m.transpose_mul_into(g, d, s));
        }
        Op::L2Norm(a) => {
            let n = out.item();
            if n > 0.0 {
                let av = val(*a).data();
                accumulate(nodes, grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * av[i] / n;
                    }
                });
            }
        }
        Op::Cosine(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let (na, nb) = (norm(av), norm(bv));
            if na > 0.0 && nb > 0.0 {
                let c = out.item();
                accumulate(nodes, grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * (bv[i] / (na * nb) - c * av[i] / (na * na));
                    }
                });
                accumulate(nodes, grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
                    }
                });
            }
        }
        Op::LogSumExp(a) => {
            let av = val(*a).data();
            let y = out.item();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[0] * (av[i] - y).exp();
                }
            });
        }
        Op::LogSumExpRows(a) => {
            let av = val(*a);
            let n = av.cols();
            let ov = out.data();
            accumulate(nodes, grads, *a, |s| {
                for r in 0..av.rows() {
                    for c in 0..n {
                        s[r * n + c] += g[r] * (av.data()[r * n + c] - ov[r]).exp();
                    }
                }
            });
        }
        Op::RowNormalize(a) => {
            let av = val(*a);
            let n = av.cols();
            let ov = out.data();
            accumulate(nodes, grads, *a, |s| {
                for r in 0..av.rows() {
                    let x = &av.data()[r * n..(r + 1) * n];
                    let len = norm(x);
                    if len == 0.0 {
                        continue;
                    }
                    let y = &ov[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        s[r * n + c] += (gr[c] - y[c] * dot) / len;
                    }
                }
            });
        }
        Op::PairwiseL2(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let d = av.cols();
            let n = bv.rows();
            let dist = out.data();
            let coef = |i: usize, j: usize| {
                let dij = dist[i * n + j];
                if dij > 0.0 {
                    g[i * n + j] / dij
                } else {
                    0.0
                }
            };
            accumulate(nodes, grads, *a, |s| {
                for i in 0..av.rows() {
                    for j in 0..n {
                        let w = coef(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            s[i * d + k] += w * (av.get(i, k) - bv.get(j, k));
                        }
                    }
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for i in 0..av.rows() {
                    for j in 0..n {
                        let w = coef(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            s[j * d + k] -= w * (av.get(i, k) - bv.get(j, k));
                        }
                    }
                }
            });
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    fn needs(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        let needs = self.needs();
        self.tape.push(value, op, needs)
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        self.unary(op, |x| {
            let data = x.data().iter().map(|&v| f(v)).collect();
            Tensor::new(x.rows(), x.cols(), data).expect("same shape")
        })
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor, TensorError>,
    ) -> Result<Var<'t>, TensorError> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "{name}: vars from different tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let needs = self.needs() || other.needs();
        Ok(self.tape.push(value, op, needs))
    }

    fn zip_same(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        self.binary(other, name, op, |a, b| {
            if a.shape() != b.shape() {
                return Err(mismatch(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.rows(), a.cols(), data)
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.map(Op::Scale(self.id, k), |v| v * k)
    }

    /// Adds a constant to every element.
    pub fn shift(self, k: f64) -> Var<'t> {
        self.map(Op::Shift(self.id), |v| v + k)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "matmul", Op::Matmul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn relu(self) -> Var<'t> {
        self.map(Op::Relu(self.id), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.map(Op::Log(self.id), f64::ln)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.map(Op::Softplus(self.id), softplus)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(row, "add_row", Op::AddRow(self.id, row.id), |a, r| {
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(mismatch("add_row", a.shape(), r.shape()));
            }
            let mut out = a.clone();
            for chunk in out.data_mut().chunks_mut(a.cols().max(1)) {
                chunk.iter_mut().zip(r.data()).for_each(|(o, v)| *o += v);
            }
            Ok(out)
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |x| Tensor::scalar(x.data().iter().sum()))
    }

    /// Sums over rows: `m x n -> 1 x n`.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), |x| {
            let mut out = vec![0.0; x.cols()];
            for r in 0..x.rows() {
                out.iter_mut().zip(x.row(r)).for_each(|(o, v)| *o += v);
            }
            Tensor::row_vector(out)
        })
    }

    /// Sums within each row: `m x n -> m x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id), |x| {
            let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
            Tensor::new(x.rows(), 1, data).expect("column")
        })
    }

    /// Row sums over contiguous segments `offsets[s]..offsets[s + 1]`.
    pub fn segment_sum(self, offsets: Rc<Vec<usize>>) -> Result<Var<'t>, TensorError> {
        let (rows, cols) = self.shape();
        if offsets.first() != Some(&0) || offsets.last() != Some(&rows) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(mismatch("segment_sum", (rows, cols), (offsets.len(), 0)));
        }
        let op = Op::SegmentSum(self.id, offsets.clone());
        Ok(self.unary(op, |x| {
            let mut out = Tensor::zeros(offsets.len() - 1, cols);
            for (s, w) in offsets.windows(2).enumerate() {
                for r in w[0]..w[1] {
                    for c in 0..cols {
                        let v = out.get(s, c) + x.get(r, c);
                        out.set(s, c, v);
                    }
                }
            }
            out
        }))
    }

    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Result<Var<'t>, TensorError> {
        let (rows, cols) = self.shape();
        if idx.iter().any(|&i| i >= rows) {
            return Err(mismatch("gather_rows", (rows, cols), (idx.len(), 0)));
        }
        let op = Op::GatherRows(self.id, idx.clone());
        Ok(self.unary(op, |x| {
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(idx.len(), cols, data).expect("gather")
        }))
    }

    /// Constant sparse matrix times this variable.
    pub fn spmm(self, m: Rc<SparseMatrix>) -> Result<Var<'t>, TensorError> {
        let value = m.mul_dense(&self.tape.nodes.borrow()[self.id].value)?;
        let needs = self.needs();
        Ok(self.tape.push(value, Op::Spmm(m, self.id), needs))
    }

    /// Euclidean norm of all elements. The subgradient at zero is zero.
    pub fn l2_norm(self) -> Var<'t> {
        self.unary(Op::L2Norm(self.id), |x| Tensor::scalar(norm(x.data())))
    }

    /// Cosine similarity of two equally shaped tensors; 0 if either is zero.
    pub fn cosine(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "cosine", Op::Cosine(self.id, other.id), |a, b| {
            if a.shape() != b.shape() {
                return Err(mismatch("cosine", a.shape(), b.shape()));
            }
            let (na, nb) = (norm(a.data()), norm(b.data()));
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            let c = if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 };
            Ok(Tensor::scalar(c))
        })
    }

    pub fn logsumexp(self) -> Var<'t> {
        self.unary(Op::LogSumExp(self.id), |x| Tensor::scalar(logsumexp(x.data())))
    }

    /// Row-wise log-sum-exp: `m x n -> m x 1`.
    pub fn logsumexp_rows(self) -> Var<'t> {
        self.unary(Op::LogSumExpRows(self.id), |x| {
            let data = (0..x.rows()).map(|r| logsumexp(x.row(r))).collect();
            Tensor::new(x.rows(), 1, data).expect("column")
        })
    }

    /// Scales every row to unit length; zero rows stay zero.
    pub fn row_normalize(self) -> Var<'t> {
        self.unary(Op::RowNormalize(self.id), |x| {
            let mut out = x.clone();
            let n = x.cols();
            for r in 0..x.rows() {
                let len = norm(x.row(r));
                if len > 0.0 {
                    out.data_mut()[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= len);
                }
            }
            out
        })
    }

    /// Euclidean distances between every row of `self` (`m x d`) and every
    /// row of `other` (`n x d`), giving `m x n`.
    pub fn pairwise_l2(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "pairwise_l2", Op::PairwiseL2(self.id, other.id), |a, b| {
            if a.cols() != b.cols() {
                return Err(mismatch("pairwise_l2", a.shape(), b.shape()));
            }
            let mut out = Tensor::zeros(a.rows(), b.rows());
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    let d2: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                    out.set(i, j, d2.sqrt());
                }
            }
            Ok(out)
        })
    }
}
