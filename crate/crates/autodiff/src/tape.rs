//! Dynamic reverse-mode tape.
//!
//! Every primitive evaluates eagerly when it is recorded, so the value of any
//! [`Var`] is available immediately. [`Tape::backward`] then walks the record
//! in reverse and accumulates gradients additively into every node that
//! depends on a differentiable leaf.
//!
//! ```
//! use lama_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::row_vector(vec![1.0, -2.0, 3.0]).unwrap());
//! let y = tape.frobenius_sq(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::borrow::Cow;
use std::cell::{Ref, RefCell};

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::tensor::{dot, Axis, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Constant,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    BroadcastRows(usize),
    Hadamard(usize, usize),
    Scale(usize, F),
    Tanh(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        axis: Axis,
    },
    L2Normalize {
        x: usize,
        axis: Axis,
        norms: Vec<F>,
    },
    Concat {
        parts: Vec<usize>,
        axis: Axis,
    },
    Slice {
        x: usize,
        axis: Axis,
        start: usize,
    },
    Reshape(usize),
    GatherRows {
        x: usize,
        ids: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    MeanAxis {
        x: usize,
        axis: Axis,
    },
    FrobeniusSq(usize),
    Cosine {
        a: usize,
        b: usize,
        a_hat: Tensor<F>,
        b_hat: Tensor<F>,
        a_norms: Vec<F>,
        b_norms: Vec<F>,
    },
    Dropout {
        x: usize,
        mask: Vec<F>,
    },
    SoftmaxCrossEntropy {
        x: usize,
        labels: Vec<usize>,
        probs: Tensor<F>,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::FrobeniusSq(_) => "frobenius_sq",
            Op::Cosine { .. } => "cosine_similarity",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Hadamard(a, b)
            | Op::Cosine { a, b, .. } => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Transpose(x)
            | Op::BroadcastRows(x)
            | Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::FrobeniusSq(x)
            | Op::Softmax { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Slice { x, .. }
            | Op::GatherRows { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Dropout { x, .. }
            | Op::SoftmaxCrossEntropy { x, .. } => vec![*x],
        }
    }
}

struct Node<'a, F: Clone> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Record of one forward computation. Confined to the thread that builds it.
pub struct Tape<'a, F: Scalar> {
    nodes: RefCell<Vec<Node<'a, F>>>,
}

impl<F: Scalar> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root w.r.t. `v`; `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Iteration helpers for axis-wise kernels: `(lane count, lane length)`.
fn lanes(shape: (usize, usize), axis: Axis) -> (usize, usize) {
    match axis {
        Axis::Cols => (shape.0, shape.1),
        Axis::Rows => (shape.1, shape.0),
    }
}

#[inline]
fn lane_idx(cols: usize, axis: Axis, lane: usize, k: usize) -> usize {
    match axis {
        Axis::Cols => lane * cols + k,
        Axis::Rows => k * cols + lane,
    }
}

fn l2_rows<F: Scalar>(x: &Tensor<F>, eps: F) -> (Tensor<F>, Vec<F>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let n = (dot(row, row) + eps).sqrt();
        for v in row.iter_mut() {
            *v = *v / n;
        }
        norms.push(n);
    }
    (out, norms)
}

/// Backward of row-wise `x / sqrt(‖x‖² + eps)`: `(dy − y·⟨dy, y⟩) / n`.
fn l2_rows_backward<F: Scalar>(dy: &Tensor<F>, y: &Tensor<F>, norms: &[F]) -> Tensor<F> {
    let mut dx = dy.clone();
    for (r, &n) in norms.iter().enumerate() {
        let yr = y.row(r);
        let proj = dot(dy.row(r), yr);
        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
            *d = (*d - yv * proj) / n;
        }
    }
    dx
}

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forward value of `v`.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn item(&self, v: Var) -> F {
        self.value(v).data()[0]
    }

    fn push(&self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        self.push_cow(Cow::Owned(value), op)
    }

    fn push_cow(&self, value: Cow<'a, Tensor<F>>, op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => op.parents().iter().any(|&p| nodes[p].requires_grad),
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Differentiable input owning its value.
    pub fn leaf(&self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf).expect("leaf values must be finite")
    }

    /// Differentiable input borrowing a parameter tensor.
    pub fn leaf_ref(&self, value: &'a Tensor<F>) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf)
            .expect("leaf values must be finite")
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.push(value, Op::Constant)
            .expect("constant values must be finite")
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        self.push(out, Op::MatMul(a.0, b.0))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_bt(&self.value(b))?;
        self.push(out, Op::MatMulBt(a.0, b.0))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a.0))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a.0, b.0))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(AutodiffError::shape("add_row", sa, sb));
        }
        let mut out = self.value(a).clone();
        {
            let b = self.value(bias);
            for r in 0..sa.0 {
                for (o, &x) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o = *o + x;
                }
            }
        }
        self.push(out, Op::AddRow(a.0, bias.0))
    }

    /// Repeats a `1 × c` row `n` times.
    pub fn broadcast_rows(&self, a: Var, n: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.0 != 1 || n == 0 {
            return Err(AutodiffError::shape("broadcast_rows", s, (n, s.1)));
        }
        let out = {
            let v = self.value(a);
            Tensor::from_fn(n, s.1, |_, c| v.data()[c])
        };
        self.push(out, Op::BroadcastRows(a.0))
    }

    /// Element-wise product.
    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.push(out, Op::Hadamard(a.0, b.0))
    }

    pub fn scale(&self, a: Var, s: F) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(F::tanh);
        self.push(out, Op::Tanh(a.0))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| F::one() / (F::one() + (-x).exp()));
        self.push(out, Op::Sigmoid(a.0))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, a: Var, axis: Axis) -> Result<Var> {
        self.masked_softmax(a, axis, None)
    }

    /// Softmax along `axis` where `mask[k] == false` excludes position `k` of
    /// every lane: excluded entries come out as exactly zero.
    pub fn masked_softmax(&self, a: Var, axis: Axis, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a);
        let (n_lanes, lane_len) = lanes(shape, axis);
        if let Some(m) = mask {
            if m.len() != lane_len {
                return Err(AutodiffError::shape("softmax", shape, (1, m.len())));
            }
            if !m.iter().any(|&v| v) {
                return Err(AutodiffError::AllMasked);
            }
        }
        let valid = |k: usize| mask.is_none_or(|m| m[k]);
        let mut out = Tensor::zeros(shape.0, shape.1);
        {
            let x = self.value(a);
            let (xd, od) = (x.data(), out.data_mut());
            for lane in 0..n_lanes {
                let mut max = F::neg_infinity();
                for k in (0..lane_len).filter(|&k| valid(k)) {
                    max = max.max(xd[lane_idx(shape.1, axis, lane, k)]);
                }
                let mut total = F::zero();
                for k in (0..lane_len).filter(|&k| valid(k)) {
                    let i = lane_idx(shape.1, axis, lane, k);
                    let e = (xd[i] - max).exp();
                    od[i] = e;
                    total = total + e;
                }
                for k in (0..lane_len).filter(|&k| valid(k)) {
                    let i = lane_idx(shape.1, axis, lane, k);
                    od[i] = od[i] / total;
                }
            }
        }
        self.push(out, Op::Softmax { x: a.0, axis })
    }

    /// `x / sqrt(‖x‖² + eps)` for every lane along `axis`. Zero lanes map to zero.
    pub fn l2_normalize(&self, a: Var, axis: Axis, eps: F) -> Result<Var> {
        let shape = self.shape(a);
        let (n_lanes, lane_len) = lanes(shape, axis);
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(n_lanes);
        {
            let od = out.data_mut();
            for lane in 0..n_lanes {
                let mut sq = F::zero();
                for k in 0..lane_len {
                    let v = od[lane_idx(shape.1, axis, lane, k)];
                    sq = sq + v * v;
                }
                let n = (sq + eps).sqrt();
                for k in 0..lane_len {
                    let i = lane_idx(shape.1, axis, lane, k);
                    od[i] = od[i] / n;
                }
                norms.push(n);
            }
        }
        self.push(
            out,
            Op::L2Normalize {
                x: a.0,
                axis,
                norms,
            },
        )
    }

    /// Concatenates `parts` along `axis` (`Rows` stacks vertically).
    pub fn concat(&self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::invalid("concat", "no inputs"));
        }
        let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p)).collect();
        let first = shapes[0];
        for &s in &shapes[1..] {
            let ok = match axis {
                Axis::Rows => s.1 == first.1,
                Axis::Cols => s.0 == first.0,
            };
            if !ok {
                return Err(AutodiffError::shape("concat", first, s));
            }
        }
        let out = {
            let nodes = self.nodes.borrow();
            match axis {
                Axis::Rows => {
                    let rows = shapes.iter().map(|s| s.0).sum();
                    let mut data = Vec::with_capacity(rows * first.1);
                    for p in parts {
                        data.extend_from_slice(nodes[p.0].value.data());
                    }
                    Tensor::from_vec(rows, first.1, data)?
                }
                Axis::Cols => {
                    let cols = shapes.iter().map(|s| s.1).sum();
                    let mut data = Vec::with_capacity(first.0 * cols);
                    for r in 0..first.0 {
                        for p in parts {
                            data.extend_from_slice(nodes[p.0].value.row(r));
                        }
                    }
                    Tensor::from_vec(first.0, cols, data)?
                }
            }
        };
        self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        )
    }

    /// `len` consecutive rows (or columns) starting at `start`.
    pub fn slice(&self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        let extent = match axis {
            Axis::Rows => s.0,
            Axis::Cols => s.1,
        };
        if len == 0 || start + len > extent {
            return Err(AutodiffError::invalid(
                "slice",
                format!("range {start}..{} outside extent {extent}", start + len),
            ));
        }
        let out = {
            let x = self.value(a);
            match axis {
                Axis::Rows => {
                    Tensor::from_vec(len, s.1, x.data()[start * s.1..(start + len) * s.1].to_vec())?
                }
                Axis::Cols => Tensor::from_fn(s.0, len, |r, c| x.get(r, start + c)),
            }
        };
        self.push(
            out,
            Op::Slice {
                x: a.0,
                axis,
                start,
            },
        )
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(a);
        if rows * cols != s.0 * s.1 {
            return Err(AutodiffError::shape("reshape", s, (rows, cols)));
        }
        let out = self.value(a).reshape(rows, cols)?;
        self.push(out, Op::Reshape(a.0))
    }

    /// Selects rows `ids` of `a` (embedding lookup); gradients scatter-add back.
    pub fn gather_rows(&self, a: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if let Some(&bad) = ids.iter().find(|&&i| i >= s.0) {
            return Err(AutodiffError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {} rows", s.0),
            ));
        }
        if ids.is_empty() {
            return Err(AutodiffError::invalid("gather_rows", "no rows selected"));
        }
        let out = {
            let x = self.value(a);
            let mut data = Vec::with_capacity(ids.len() * s.1);
            for &i in ids {
                data.extend_from_slice(x.row(i));
            }
            Tensor::from_vec(ids.len(), s.1, data)?
        };
        self.push(
            out,
            Op::GatherRows {
                x: a.0,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a.0))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let out = {
            let v = self.value(a);
            Tensor::scalar(v.sum() / F::of(v.len() as f64))
        };
        self.push(out, Op::Mean(a.0))
    }

    /// Mean along `axis`: `Rows` gives a `1 × cols` row of column means.
    pub fn mean_axis(&self, a: Var, axis: Axis) -> Result<Var> {
        let s = self.shape(a);
        let out = {
            let x = self.value(a);
            match axis {
                Axis::Rows => {
                    let n = F::of(s.0 as f64);
                    Tensor::from_fn(1, s.1, |_, c| (0..s.0).map(|r| x.get(r, c)).sum::<F>() / n)
                }
                Axis::Cols => {
                    let n = F::of(s.1 as f64);
                    Tensor::from_fn(s.0, 1, |r, _| x.row(r).iter().copied().sum::<F>() / n)
                }
            }
        };
        self.push(out, Op::MeanAxis { x: a.0, axis })
    }

    /// `‖a‖²_F`.
    pub fn frobenius_sq(&self, a: Var) -> Result<Var> {
        let out = {
            let v = self.value(a);
            Tensor::scalar(dot(v.data(), v.data()))
        };
        self.push(out, Op::FrobeniusSq(a.0))
    }

    /// Pairwise cosine similarity between the rows of `a` (`n × d`) and the
    /// rows of `b` (`k × d`), giving `n × k`. Norms carry `eps` inside the root.
    pub fn cosine_similarity(&self, a: Var, b: Var, eps: F) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(AutodiffError::shape("cosine_similarity", sa, sb));
        }
        let (a_hat, a_norms) = l2_rows(&self.value(a), eps);
        let (b_hat, b_norms) = l2_rows(&self.value(b), eps);
        let out = a_hat.matmul_bt(&b_hat)?;
        self.push(
            out,
            Op::Cosine {
                a: a.0,
                b: b.0,
                a_hat,
                b_hat,
                a_norms,
                b_norms,
            },
        )
    }

    /// Train-mode inverted dropout: entries kept with probability `1 − rate`
    /// are scaled by `1 / (1 − rate)`.
    pub fn dropout<R: Rng + ?Sized>(&self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::invalid("dropout", format!("rate {rate} not in [0, 1)")));
        }
        let n = self.value(a).len();
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rate == 0.0 || rng.random::<f64>() >= rate {
                    keep
                } else {
                    F::zero()
                }
            })
            .collect();
        let out = {
            let x = self.value(a);
            let mut out = x.clone();
            for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
                *o = *o * m;
            }
            out
        };
        self.push(out, Op::Dropout { x: a.0, mask })
    }

    /// Mean over rows of `−log softmax(logits)[label]`, computed via log-sum-exp.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if labels.len() != s.0 {
            return Err(AutodiffError::shape(
                "softmax_cross_entropy",
                s,
                (labels.len(), 1),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s.1) {
            return Err(AutodiffError::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {} classes", s.1),
            ));
        }
        let (loss, probs) = {
            let x = self.value(logits);
            let mut probs = x.clone();
            let mut loss = F::zero();
            for (r, &label) in labels.iter().enumerate() {
                let row = probs.row_mut(r);
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
                loss = loss + (total.ln() + max - x.get(r, label));
            }
            (loss / F::of(s.0 as f64), probs)
        };
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                x: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape();
        if root_shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut acc = |p: usize, contrib: Tensor<F>| {
                if !nodes[p].requires_grad {
                    return;
                }
                match &mut grads[p] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            let val = |p: usize| nodes[p].value.as_ref();
            let y = node.value.as_ref();

            match &node.op {
                Op::Leaf | Op::Constant => unreachable!("leaves keep their gradient"),
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_bt(val(*b))?);
                    acc(*b, val(*a).matmul_at(&g)?);
                }
                Op::MatMulBt(a, b) => {
                    acc(*a, g.matmul(val(*b))?);
                    acc(*b, g.matmul_at(val(*a))?);
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-F::one()));
                    acc(*a, g);
                }
                Op::AddRow(a, b) => {
                    let (rows, cols) = g.shape();
                    let gb = Tensor::from_fn(1, cols, |_, c| (0..rows).map(|r| g.get(r, c)).sum());
                    acc(*b, gb);
                    acc(*a, g);
                }
                Op::BroadcastRows(a) => {
                    let (rows, cols) = g.shape();
                    acc(
                        *a,
                        Tensor::from_fn(1, cols, |_, c| (0..rows).map(|r| g.get(r, c)).sum()),
                    );
                }
                Op::Hadamard(a, b) => {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::Tanh(a) => acc(*a, g.zip_map(y, |g, y| g * (F::one() - y * y))),
                Op::Sigmoid(a) => acc(*a, g.zip_map(y, |g, y| g * y * (F::one() - y))),
                Op::Softmax { x, axis } => {
                    let shape = y.shape();
                    let (n_lanes, lane_len) = lanes(shape, *axis);
                    let mut dx = Tensor::zeros(shape.0, shape.1);
                    let (gd, yd, dd) = (g.data(), y.data(), dx.data_mut());
                    for lane in 0..n_lanes {
                        let mut inner = F::zero();
                        for k in 0..lane_len {
                            let j = lane_idx(shape.1, *axis, lane, k);
                            inner = inner + gd[j] * yd[j];
                        }
                        for k in 0..lane_len {
                            let j = lane_idx(shape.1, *axis, lane, k);
                            dd[j] = yd[j] * (gd[j] - inner);
                        }
                    }
                    acc(*x, dx);
                }
                Op::L2Normalize { x, axis, norms } => {
                    let shape = y.shape();
                    let (n_lanes, lane_len) = lanes(shape, *axis);
                    let mut dx = Tensor::zeros(shape.0, shape.1);
                    let (gd, yd, dd) = (g.data(), y.data(), dx.data_mut());
                    for (lane, &n) in norms.iter().enumerate().take(n_lanes) {
                        let mut proj = F::zero();
                        for k in 0..lane_len {
                            let j = lane_idx(shape.1, *axis, lane, k);
                            proj = proj + gd[j] * yd[j];
                        }
                        for k in 0..lane_len {
                            let j = lane_idx(shape.1, *axis, lane, k);
                            dd[j] = (gd[j] - yd[j] * proj) / n;
                        }
                    }
                    acc(*x, dx);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = nodes[p].value.shape();
                        let piece = match axis {
                            Axis::Rows => Tensor::from_vec(
                                r,
                                c,
                                g.data()[offset * c..(offset + r) * c].to_vec(),
                            )?,
                            Axis::Cols => Tensor::from_fn(r, c, |i, j| g.get(i, offset + j)),
                        };
                        offset += match axis {
                            Axis::Rows => r,
                            Axis::Cols => c,
                        };
                        acc(p, piece);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (r, c) = val(*x).shape();
                    let mut dx = Tensor::zeros(r, c);
                    let (gr, gc) = g.shape();
                    for i in 0..gr {
                        for j in 0..gc {
                            let (ti, tj) = match axis {
                                Axis::Rows => (start + i, j),
                                Axis::Cols => (i, start + j),
                            };
                            dx.set(ti, tj, g.get(i, j));
                        }
                    }
                    acc(*x, dx);
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, g.reshape(r, c)?);
                }
                Op::GatherRows { x, ids } => {
                    let (r, c) = val(*x).shape();
                    let mut dx = Tensor::zeros(r, c);
                    for (k, &id) in ids.iter().enumerate() {
                        for (d, &v) in dx.row_mut(id).iter_mut().zip(g.row(k)) {
                            *d = *d + v;
                        }
                    }
                    acc(*x, dx);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::full(r, c, g.data()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::full(r, c, g.data()[0] / F::of((r * c) as f64)));
                }
                Op::MeanAxis { x, axis } => {
                    let (r, c) = val(*x).shape();
                    let dx = match axis {
                        Axis::Rows => {
                            let n = F::of(r as f64);
                            Tensor::from_fn(r, c, |_, j| g.data()[j] / n)
                        }
                        Axis::Cols => {
                            let n = F::of(c as f64);
                            Tensor::from_fn(r, c, |i, _| g.data()[i] / n)
                        }
                    };
                    acc(*x, dx);
                }
                Op::FrobeniusSq(a) => {
                    let s = g.data()[0] * F::of(2.0);
                    acc(*a, val(*a).scale(s));
                }
                Op::Cosine {
                    a,
                    b,
                    a_hat,
                    b_hat,
                    a_norms,
                    b_norms,
                } => {
                    let da_hat = g.matmul(b_hat)?;
                    let db_hat = g.matmul_at(a_hat)?;
                    acc(*a, l2_rows_backward(&da_hat, a_hat, a_norms));
                    acc(*b, l2_rows_backward(&db_hat, b_hat, b_norms));
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                        *d = *d * m;
                    }
                    acc(*x, dx);
                }
                Op::SoftmaxCrossEntropy { x, labels, probs } => {
                    let scale = g.data()[0] / F::of(labels.len() as f64);
                    let mut dx = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        let v = dx.get(r, l);
                        dx.set(r, l, v - F::one());
                    }
                    acc(*x, dx.scale(scale));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_matmul_and_tanh_origin() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let i = tape.constant(Tensor::identity(3));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));
        let z = tape.constant(Tensor::zeros(2, 3));
        let tz = tape.tanh(z).unwrap();
        assert_eq!(*tape.value(tz), Tensor::zeros(2, 3));
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(1, 3));
        let y = tape.softmax(x, Axis::Cols).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_positions_are_exact_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(2, 3, &[1., 5., -2., 0.5, 0.1, 9.]));
        let y = tape
            .masked_softmax(x, Axis::Cols, Some(&[true, false, true]))
            .unwrap();
        let v = tape.value(y).clone();
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(1, 1), 0.0);
        assert!((v.get(0, 0) + v.get(0, 2) - 1.0).abs() < 1e-12);
        let all_masked = tape.masked_softmax(x, Axis::Cols, Some(&[false; 3]));
        assert_eq!(all_masked.unwrap_err(), AutodiffError::AllMasked);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(2, 2, &[3., -1., 0.5, 2.]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(*g.get(x).unwrap(), Tensor::ones(2, 2));
    }

    #[test]
    fn product_rule_for_hadamard() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(1, 3, &[1., 2., 3.]));
        let b = tape.leaf(t(1, 3, &[-4., 5., 0.25]));
        let h = tape.hadamard(a, b).unwrap();
        let s = tape.sum(h).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &*tape.value(b));
        assert_eq!(g.get(b).unwrap(), &*tape.value(a));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(1, 2, &[0.3, -0.7]));
        let f = tape.frobenius_sq(x).unwrap();
        let g = tape.sum(x).unwrap();
        let r = tape.add(f, g).unwrap();
        let grads = tape.backward(r).unwrap();
        let gx = grads.get(x).unwrap();
        assert!((gx.data()[0] - (0.6 + 1.0)).abs() < 1e-15);
        assert!((gx.data()[1] - (-1.4 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert_eq!(
            tape.backward(x).err().unwrap(),
            AutodiffError::NonScalarRoot((2, 2))
        );
    }

    #[test]
    fn non_finite_names_primitive() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(1, 1, 1e300));
        let err = tape.hadamard(x, x).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { op: "hadamard" });
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(3, 2));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert_eq!(msg, "add: incompatible shapes 2×3 and 3×2");
    }

    #[test]
    fn l2_zero_lane_maps_to_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(2, 2, &[0., 3., 0., 4.]));
        let y = tape.l2_normalize(x, Axis::Rows, 1e-12).unwrap();
        let v = tape.value(y).clone();
        assert_eq!(v.get(0, 0), 0.0);
        assert_eq!(v.get(1, 0), 0.0);
        assert!((v.get(0, 1) - 0.6).abs() < 1e-12);
        assert!((v.get(1, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(1, 2));
        let x = tape.leaf(Tensor::ones(1, 2));
        let h = tape.hadamard(c, x).unwrap();
        let s = tape.sum(h).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }
}
