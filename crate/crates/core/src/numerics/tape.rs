use std::cell::{Ref, RefCell};
use std::fmt;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Record of executed operations for one forward/backward pass.
///
/// Nodes are appended in execution order, so every node's inputs have
/// lower ids. [`Tape::backward`] walks that order in reverse once.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    st: RefCell<StraightThroughLog<S>>,
}

/// Inputs seen by straight-through ops, in call order. With `anchors`
/// set, the k-th op evaluates `replacement + (input − anchors[k])`.
struct StraightThroughLog<S> {
    seen: Vec<Tensor<S>>,
    anchors: Option<Vec<Tensor<S>>>,
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, S),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Ln(usize),
    Exp(usize),
    Sqrt(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Mse(usize, usize),
    SqDist(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { src: usize, start: usize },
    SliceCols { src: usize, start: usize },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Gather { src: usize, indices: Vec<usize> },
    StraightThrough { input: usize, replacement: usize },
    Conv1d { input: usize, weight: usize, bias: usize, width: usize, stride: usize },
    BceLogits { logits: usize, targets: Tensor<S> },
    /// Scalar output whose gradient w.r.t. `input` was computed during the forward pass.
    Precomputed { input: usize, grad: Tensor<S> },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | Mse(a, b)
            | SqDist(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Tanh(a) | Sigmoid(a) | Relu(a) | Ln(a) | Exp(a)
            | Sqrt(a) | Softmax(a) | LogSoftmax(a) | LogSumExp(a) | Reshape(a) | Sum(a)
            | Mean(a) | MeanRows(a) => vec![*a],
            ConcatRows(ids) | ConcatCols(ids) => ids.clone(),
            SliceRows { src, .. } | SliceCols { src, .. } | Gather { src, .. } => vec![*src],
            StraightThrough { input, replacement } => vec![*input, *replacement],
            Conv1d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            BceLogits { logits, .. } => vec![*logits],
            Precomputed { input, .. } => vec![*input],
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [r, c] = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            st: RefCell::new(StraightThroughLog {
                seen: Vec::new(),
                anchors: None,
            }),
        }
    }

    /// Tape whose straight-through ops evaluate their surrogate
    /// `replacement + (input − anchor)`, anchors taken in call order.
    ///
    /// At `input == anchor` the value is the usual one; around it the
    /// function's true derivative is what the estimator reports, which
    /// makes straight-through models finite-difference checkable.
    pub fn with_straight_through_anchors(anchors: Vec<Tensor<S>>) -> Self {
        let tape = Self::new();
        tape.st.borrow_mut().anchors = Some(anchors);
        tape
    }

    /// Input values of every straight-through op recorded so far.
    pub fn straight_through_inputs(&self) -> Vec<Tensor<S>> {
        self.st.borrow().seen.clone()
    }

    /// Differentiable input; its gradient is collected by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.insert(value, Op::Leaf, true)
    }

    /// Input treated as a constant during differentiation.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.insert(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
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

    fn push(&self, value: Tensor<S>, op: Op<S>, name: &'static str) -> Result<Var<'_, S>> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        // Ops with no differentiable input are stored as constants.
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.insert(value, op, requires_grad))
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no inputs"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].id].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.cols() != cols {
                    return Err(Error::dim(
                        "concat_rows",
                        format!("{} columns vs {}", v.cols(), cols),
                    ));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(rows, cols, data)?
        };
        self.push(
            value,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            "concat_rows",
        )
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no inputs"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows();
            let mut cols = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.rows() != rows {
                    return Err(Error::dim(
                        "concat_cols",
                        format!("{} rows vs {}", v.rows(), rows),
                    ));
                }
                cols += v.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row_slice(r));
                }
            }
            Tensor::new(rows, cols, data)?
        };
        self.push(
            value,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            "concat_cols",
        )
    }

    /// Records a scalar-valued op with an explicitly supplied gradient.
    pub(crate) fn record_scalar<'t>(
        &'t self,
        input: Var<'t, S>,
        value: S,
        grad: Tensor<S>,
        name: &'static str,
    ) -> Result<Var<'t, S>> {
        debug_assert_eq!(grad.shape(), input.shape());
        self.push(
            Tensor::scalar(value),
            Op::Precomputed {
                input: input.id,
                grad,
            },
            name,
        )
    }

    /// Propagates `d loss / d node` to every node that requires grad.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            let [r, c] = root.value.shape();
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::scalar(S::one()));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    id: usize,
    g: Tensor<S>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn propagate<S: Scalar>(
    nodes: &[Node<S>],
    id: usize,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) {
    let node = &nodes[id];
    if !node.requires_grad {
        return;
    }
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let one = S::one();
    let two = S::lit(2.0);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                let ga = g.matmul(&val(*b).transpose()).expect("shapes");
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = val(*a).transpose().matmul(g).expect("shapes");
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, zip_map(g, val(*b), |x, y| x * y));
            accumulate(nodes, grads, *b, zip_map(g, val(*a), |x, y| x * y));
        }
        Op::AddRow(a, bias) => {
            accumulate(nodes, grads, *a, g.clone());
            if nodes[*bias].requires_grad {
                let mut gb = Tensor::zeros(1, g.cols());
                for row in g.iter_rows() {
                    for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                accumulate(nodes, grads, *bias, gb);
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, grads, *a, g.map(|v| v * c));
        }
        Op::Tanh(a) => accumulate(nodes, grads, *a, zip_map(g, out, |gv, y| gv * (one - y * y))),
        Op::Sigmoid(a) => {
            accumulate(nodes, grads, *a, zip_map(g, out, |gv, y| gv * y * (one - y)))
        }
        Op::Relu(a) => accumulate(
            nodes,
            grads,
            *a,
            zip_map(g, val(*a), |gv, x| if x > S::zero() { gv } else { S::zero() }),
        ),
        Op::Ln(a) => accumulate(nodes, grads, *a, zip_map(g, val(*a), |gv, x| gv / x)),
        Op::Exp(a) => accumulate(nodes, grads, *a, zip_map(g, out, |gv, y| gv * y)),
        Op::Sqrt(a) => accumulate(
            nodes,
            grads,
            *a,
            // subgradient 0 at the origin
            zip_map(g, out, |gv, y| {
                if y > S::zero() {
                    gv / (two * y)
                } else {
                    S::zero()
                }
            }),
        ),
        Op::Softmax(a) => {
            let mut ga = Tensor::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let dot: S = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for c in 0..out.cols() {
                    ga.set(r, c, y[c] * (gr[c] - dot));
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LogSoftmax(a) => {
            let mut ga = Tensor::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let total: S = gr.iter().copied().sum();
                for c in 0..out.cols() {
                    ga.set(r, c, gr[c] - y[c].exp() * total);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LogSumExp(a) => {
            let x = val(*a);
            let mut ga = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let lse = out.get(r, 0);
                for c in 0..x.cols() {
                    ga.set(r, c, g.get(r, 0) * (x.get(r, c) - lse).exp());
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Mse(a, b) => {
            let n = S::from_usize(val(*a).len()).expect("len");
            let scale = g.item() * two / n;
            let ga = zip_map(val(*a), val(*b), |x, y| (x - y) * scale);
            accumulate(nodes, grads, *b, ga.map(|v| -v));
            accumulate(nodes, grads, *a, ga);
        }
        Op::SqDist(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let d = av.cols();
            let mut ga = Tensor::zeros(av.rows(), d);
            let mut gb = Tensor::zeros(bv.rows(), d);
            for t in 0..av.rows() {
                for k in 0..bv.rows() {
                    let w = two * g.get(t, k);
                    if w == S::zero() {
                        continue;
                    }
                    for j in 0..d {
                        let diff = av.get(t, j) - bv.get(k, j);
                        ga.set(t, j, ga.get(t, j) + w * diff);
                        gb.set(k, j, gb.get(k, j) - w * diff);
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &i in ids {
                let rows = val(i).rows();
                let part = Tensor::new(
                    rows,
                    g.cols(),
                    g.data()[offset * g.cols()..(offset + rows) * g.cols()].to_vec(),
                )
                .expect("shape");
                offset += rows;
                accumulate(nodes, grads, i, part);
            }
        }
        Op::ConcatCols(ids) => {
            let mut offset = 0;
            for &i in ids {
                let cols = val(i).cols();
                let part = Tensor::from_fn(g.rows(), cols, |r, c| g.get(r, offset + c));
                offset += cols;
                accumulate(nodes, grads, i, part);
            }
        }
        Op::SliceRows { src, start } => {
            let s = val(*src);
            let mut ga = Tensor::zeros(s.rows(), s.cols());
            let cols = s.cols();
            ga.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
            accumulate(nodes, grads, *src, ga);
        }
        Op::SliceCols { src, start } => {
            let s = val(*src);
            let mut ga = Tensor::zeros(s.rows(), s.cols());
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    ga.set(r, start + c, g.get(r, c));
                }
            }
            accumulate(nodes, grads, *src, ga);
        }
        Op::Reshape(a) => {
            let [r, c] = val(*a).shape();
            accumulate(
                nodes,
                grads,
                *a,
                Tensor::new(r, c, g.data().to_vec()).expect("shape"),
            );
        }
        Op::Sum(a) => {
            let [r, c] = val(*a).shape();
            accumulate(nodes, grads, *a, Tensor::filled(r, c, g.item()));
        }
        Op::Mean(a) => {
            let [r, c] = val(*a).shape();
            let n = S::from_usize(r * c).expect("len");
            accumulate(nodes, grads, *a, Tensor::filled(r, c, g.item() / n));
        }
        Op::MeanRows(a) => {
            let [r, c] = val(*a).shape();
            let n = S::from_usize(r).expect("len");
            accumulate(nodes, grads, *a, Tensor::from_fn(r, c, |_, j| g.get(0, j) / n));
        }
        Op::Gather { src, indices } => {
            let s = val(*src);
            let mut ga = Tensor::zeros(s.rows(), s.cols());
            for (i, &row) in indices.iter().enumerate() {
                for c in 0..s.cols() {
                    ga.set(row, c, ga.get(row, c) + g.get(i, c));
                }
            }
            accumulate(nodes, grads, *src, ga);
        }
        Op::StraightThrough { input, replacement } => {
            accumulate(nodes, grads, *input, g.clone());
            accumulate(nodes, grads, *replacement, g.clone());
        }
        Op::Conv1d {
            input,
            weight,
            bias,
            width,
            stride,
        } => {
            let (x, w) = (val(*input), val(*weight));
            let (t_in, c_in) = (x.rows(), x.cols());
            let c_out = w.cols();
            let pad = width / 2;
            let mut gx = Tensor::zeros(t_in, c_in);
            let mut gw = Tensor::zeros(w.rows(), c_out);
            let mut gb = Tensor::zeros(1, c_out);
            for t in 0..g.rows() {
                let go = g.row_slice(t);
                for (o, &gv) in go.iter().enumerate() {
                    gb.data_mut()[o] = gb.data()[o] + gv;
                }
                for j in 0..*width {
                    let src = (t * stride + j) as isize - pad as isize;
                    if src < 0 || src as usize >= t_in {
                        continue;
                    }
                    let src = src as usize;
                    for c in 0..c_in {
                        let wrow = j * c_in + c;
                        let xv = x.get(src, c);
                        let mut acc = S::zero();
                        for (o, &gv) in go.iter().enumerate() {
                            acc = acc + gv * w.get(wrow, o);
                            gw.set(wrow, o, gw.get(wrow, o) + gv * xv);
                        }
                        gx.set(src, c, gx.get(src, c) + acc);
                    }
                }
            }
            accumulate(nodes, grads, *input, gx);
            accumulate(nodes, grads, *weight, gw);
            accumulate(nodes, grads, *bias, gb);
        }
        Op::BceLogits { logits, targets } => {
            let z = val(*logits);
            let n = S::from_usize(z.len()).expect("len");
            let scale = g.item() / n;
            let gz = zip_map(z, targets, |zv, y| (sigmoid(zv) - y) * scale);
            accumulate(nodes, grads, *logits, gz);
        }
        Op::Precomputed { input, grad } => {
            accumulate(nodes, grads, *input, grad.map(|v| v * g.item()));
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn check_same_shape<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.value_ref(self.id).shape()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn item(&self) -> S {
        self.tape.value_ref(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(
        self,
        name: &'static str,
        op: impl FnOnce(usize) -> Op<S>,
        f: impl Fn(S) -> S,
    ) -> Result<Self> {
        let value = self.tape.value_ref(self.id).map(f);
        self.tape.push(value, op(self.id), name)
    }

    fn elementwise(
        self,
        other: Self,
        name: &'static str,
        op: fn(usize, usize) -> Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Self> {
        let value = {
            let (a, b) = (self.tape.value_ref(self.id), self.tape.value_ref(other.id));
            check_same_shape(name, &a, &b)?;
            zip_map(&a, &b, f)
        };
        self.tape.push(value, op(self.id, other.id), name)
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        let value = self
            .tape
            .value_ref(self.id)
            .matmul(&self.tape.value_ref(other.id))?;
        self.tape.push(value, Op::MatMul(self.id, other.id), "matmul")
    }

    pub fn transpose(self) -> Result<Self> {
        let value = self.tape.value_ref(self.id).transpose();
        self.tape.push(value, Op::Transpose(self.id), "transpose")
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.elementwise(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.elementwise(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.elementwise(other, "mul", Op::Mul, |a, b| a * b)
    }

    /// Adds a `1 × cols` bias to every row.
    pub fn add_row(self, bias: Self) -> Result<Self> {
        let value = {
            let (a, b) = (self.tape.value_ref(self.id), self.tape.value_ref(bias.id));
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(Error::dim(
                    "add_row",
                    format!("bias {:?} for matrix {:?}", b.shape(), a.shape()),
                ));
            }
            let brow = b.row_slice(0);
            Tensor::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) + brow[c])
        };
        self.tape.push(value, Op::AddRow(self.id, bias.id), "add_row")
    }

    pub fn scale(self, factor: S) -> Result<Self> {
        self.unary("scale", |a| Op::Scale(a, factor), |v| v * factor)
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-S::one())
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary("tanh", Op::Tanh, |v| v.tanh())
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary("sigmoid", Op::Sigmoid, sigmoid)
    }

    pub fn relu(self) -> Result<Self> {
        self.unary("relu", Op::Relu, |v| v.max(S::zero()))
    }

    pub fn ln(self) -> Result<Self> {
        self.unary("ln", Op::Ln, |v| v.ln())
    }

    pub fn exp(self) -> Result<Self> {
        self.unary("exp", Op::Exp, |v| v.exp())
    }

    /// Elementwise square root; the derivative at zero is taken as 0.
    pub fn sqrt(self) -> Result<Self> {
        self.unary("sqrt", Op::Sqrt, |v| v.sqrt())
    }

    pub fn softmax(self) -> Result<Self> {
        let value = {
            let x = self.tape.value_ref(self.id);
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let row = x.row_slice(r);
                let lse = super::log_sum_exp(row);
                for (c, &v) in row.iter().enumerate() {
                    out.set(r, c, (v - lse).exp());
                }
            }
            out
        };
        self.tape.push(value, Op::Softmax(self.id), "softmax")
    }

    pub fn log_softmax(self) -> Result<Self> {
        let value = {
            let x = self.tape.value_ref(self.id);
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let row = x.row_slice(r);
                let lse = super::log_sum_exp(row);
                for (c, &v) in row.iter().enumerate() {
                    out.set(r, c, v - lse);
                }
            }
            out
        };
        self.tape.push(value, Op::LogSoftmax(self.id), "log_softmax")
    }

    /// Row-wise `ln Σ exp`, giving a `rows × 1` column.
    pub fn log_sum_exp(self) -> Result<Self> {
        let value = {
            let x = self.tape.value_ref(self.id);
            let data = x.iter_rows().map(super::log_sum_exp).collect();
            Tensor::new(x.rows(), 1, data)?
        };
        self.tape.push(value, Op::LogSumExp(self.id), "log_sum_exp")
    }

    /// Mean of squared differences over all elements.
    pub fn mse(self, target: Self) -> Result<Self> {
        let value = {
            let (a, b) = (self.tape.value_ref(self.id), self.tape.value_ref(target.id));
            check_same_shape("mse", &a, &b)?;
            if a.is_empty() {
                return Err(Error::dim("mse", "empty operands"));
            }
            let n = S::from_usize(a.len()).expect("len");
            let total: S = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            Tensor::scalar(total / n)
        };
        self.tape.push(value, Op::Mse(self.id, target.id), "mse")
    }

    /// Squared Euclidean distance between every row of `self` (T×D) and
    /// every row of `other` (V×D), giving T×V.
    pub fn pairwise_sq_dist(self, other: Self) -> Result<Self> {
        let value = {
            let (a, b) = (self.tape.value_ref(self.id), self.tape.value_ref(other.id));
            if a.cols() != b.cols() {
                return Err(Error::dim(
                    "pairwise_sq_dist",
                    format!("row widths {} and {}", a.cols(), b.cols()),
                ));
            }
            Tensor::from_fn(a.rows(), b.rows(), |t, k| {
                a.row_slice(t)
                    .iter()
                    .zip(b.row_slice(k))
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum()
            })
        };
        self.tape
            .push(value, Op::SqDist(self.id, other.id), "pairwise_sq_dist")
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Self> {
        let value = {
            let x = self.tape.value_ref(self.id);
            if start + len > x.rows() {
                return Err(Error::dim(
                    "slice_rows",
                    format!("rows {}..{} of {}", start, start + len, x.rows()),
                ));
            }
            let cols = x.cols();
            Tensor::new(len, cols, x.data()[start * cols..(start + len) * cols].to_vec())?
        };
        self.tape.push(
            value,
            Op::SliceRows {
                src: self.id,
                start,
            },
            "slice_rows",
        )
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let value = {
            let x = self.tape.value_ref(self.id);
            if start + len > x.cols() {
                return Err(Error::dim(
                    "slice_cols",
                    format!("cols {}..{} of {}", start, start + len, x.cols()),
                ));
            }
            Tensor::from_fn(x.rows(), len, |r, c| x.get(r, start + c))
        };
        self.tape.push(
            value,
            Op::SliceCols {
                src: self.id,
                start,
            },
            "slice_cols",
        )
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        let value = {
            let x = self.tape.value_ref(self.id);
            Tensor::new(rows, cols, x.data().to_vec())
                .map_err(|_| Error::dim("reshape", format!("{:?} to {rows}x{cols}", x.shape())))?
        };
        self.tape.push(value, Op::Reshape(self.id), "reshape")
    }

    pub fn sum(self) -> Result<Self> {
        let value = Tensor::scalar(self.tape.value_ref(self.id).sum());
        self.tape.push(value, Op::Sum(self.id), "sum")
    }

    pub fn mean(self) -> Result<Self> {
        let value = {
            let x = self.tape.value_ref(self.id);
            if x.is_empty() {
                return Err(Error::dim("mean", "empty operand"));
            }
            Tensor::scalar(x.sum() / S::from_usize(x.len()).expect("len"))
        };
        self.tape.push(value, Op::Mean(self.id), "mean")
    }

    /// Column means over all rows, giving `1 × cols`.
    pub fn mean_rows(self) -> Result<Self> {
        let value = {
            let x = self.tape.value_ref(self.id);
            if x.rows() == 0 {
                return Err(Error::dim("mean_rows", "no rows"));
            }
            let n = S::from_usize(x.rows()).expect("len");
            let mut acc = vec![S::zero(); x.cols()];
            for row in x.iter_rows() {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            Tensor::row(acc.into_iter().map(|v| v / n).collect())
        };
        self.tape.push(value, Op::MeanRows(self.id), "mean_rows")
    }

    /// Selects rows by index (embedding lookup).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Self> {
        let value = {
            let x = self.tape.value_ref(self.id);
            if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
                return Err(Error::dim(
                    "gather_rows",
                    format!("index {bad} out of {} rows", x.rows()),
                ));
            }
            let mut data = Vec::with_capacity(indices.len() * x.cols());
            for &i in indices {
                data.extend_from_slice(x.row_slice(i));
            }
            Tensor::new(indices.len(), x.cols(), data)?
        };
        self.tape.push(
            value,
            Op::Gather {
                src: self.id,
                indices: indices.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Identical value, no gradient flow.
    pub fn stop_gradient(self) -> Self {
        let value = self.value();
        self.tape.constant(value)
    }

    /// `self + replacement - stop_gradient(self)`: forward value is exactly
    /// `replacement`, while the upstream gradient goes unchanged to both.
    pub fn straight_through(self, replacement: Self) -> Result<Self> {
        let value = {
            let (a, b) = (
                self.tape.value_ref(self.id),
                self.tape.value_ref(replacement.id),
            );
            check_same_shape("straight_through", &a, &b)?;
            let mut log = self.tape.st.borrow_mut();
            let k = log.seen.len();
            log.seen.push(a.clone());
            match &log.anchors {
                None => b.clone(),
                Some(anchors) => {
                    let anchor = anchors.get(k).ok_or(Error::Usage(format!(
                        "straight-through op {k} has no anchor"
                    )))?;
                    check_same_shape("straight_through", &a, anchor)?;
                    Tensor::from_fn(b.rows(), b.cols(), |i, j| {
                        b.get(i, j) + (a.get(i, j) - anchor.get(i, j))
                    })
                }
            }
        };
        self.tape.push(
            value,
            Op::StraightThrough {
                input: self.id,
                replacement: replacement.id,
            },
            "straight_through",
        )
    }

    /// 1-D convolution over rows (time) with zero padding of `width / 2`.
    ///
    /// `self` is T×C_in, `weight` is (width·C_in)×C_out laid out tap-major,
    /// `bias` is 1×C_out. Output has `ceil(T / stride)` rows for odd widths.
    pub fn conv1d(self, weight: Self, bias: Self, width: usize, stride: usize) -> Result<Self> {
        let value = {
            let (x, w, b) = (
                self.tape.value_ref(self.id),
                self.tape.value_ref(weight.id),
                self.tape.value_ref(bias.id),
            );
            let (t_in, c_in) = (x.rows(), x.cols());
            if width == 0 || stride == 0 {
                return Err(Error::dim("conv1d", "zero width or stride"));
            }
            if w.rows() != width * c_in {
                return Err(Error::dim(
                    "conv1d",
                    format!("weight has {} rows, expected {}", w.rows(), width * c_in),
                ));
            }
            let c_out = w.cols();
            if b.shape() != [1, c_out] {
                return Err(Error::dim("conv1d", format!("bias shape {:?}", b.shape())));
            }
            let pad = width / 2;
            if t_in + 2 * pad < width {
                return Err(Error::dim("conv1d", format!("input of {t_in} frames too short")));
            }
            let t_out = (t_in + 2 * pad - width) / stride + 1;
            let mut out = Tensor::zeros(t_out, c_out);
            for t in 0..t_out {
                let orow = &mut out.data_mut()[t * c_out..(t + 1) * c_out];
                orow.copy_from_slice(b.row_slice(0));
                for j in 0..width {
                    let src = (t * stride + j) as isize - pad as isize;
                    if src < 0 || src as usize >= t_in {
                        continue;
                    }
                    let xrow = x.row_slice(src as usize);
                    for (c, &xv) in xrow.iter().enumerate() {
                        if xv == S::zero() {
                            continue;
                        }
                        let wrow = w.row_slice(j * c_in + c);
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o = *o + xv * wv;
                        }
                    }
                }
            }
            out
        };
        self.tape.push(
            value,
            Op::Conv1d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                width,
                stride,
            },
            "conv1d",
        )
    }

    /// Mean binary cross-entropy of logits against constant targets in [0, 1].
    pub fn bce_with_logits(self, targets: &Tensor<S>) -> Result<Self> {
        let value = {
            let z = self.tape.value_ref(self.id);
            check_same_shape("bce_with_logits", &z, targets)?;
            if z.is_empty() {
                return Err(Error::dim("bce_with_logits", "empty operand"));
            }
            let n = S::from_usize(z.len()).expect("len");
            let total: S = z
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&zv, &y)| zv.max(S::zero()) - zv * y + (-zv.abs()).exp().ln_1p())
                .sum();
            Tensor::scalar(total / n)
        };
        self.tape.push(
            value,
            Op::BceLogits {
                logits: self.id,
                targets: targets.clone(),
            },
            "bce_with_logits",
        )
    }
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when the variable does not influence the loss.
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, var: Var<'_, S>) -> Tensor<S> {
        self.get(var).cloned().unwrap_or_else(|| {
            let [r, c] = var.shape();
            Tensor::zeros(r, c)
        })
    }
}
