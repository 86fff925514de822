//! Dense rank ≤ 2 tensors recorded on a thread-local reverse-mode tape.
//!
//! A tensor created with [`Tensor::param`] is a leaf that requires a
//! gradient. Any operation with at least one tracked operand is recorded on
//! the current thread's tape; operations on constants only are evaluated
//! eagerly and leave the tape untouched. [`reset_tape`] starts a new
//! generation; tensors tracked in an older generation are rejected.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

#[derive(Default)]
struct Tape {
    generation: u64,
    nodes: Vec<Node>,
}

struct Node {
    op: Op,
    numel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NodeRef {
    generation: u64,
    index: usize,
}

/// Operand captured for backward: tape index (if tracked), value, 2-d view.
struct Operand {
    node: Option<usize>,
    value: Rc<Vec<f64>>,
    dims: [usize; 2],
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Exp,
    Log,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Neg,
    Square,
}

enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Operand, b: Operand, out: [usize; 2] },
    MatMul { a: Operand, b: Operand, n: usize, k: usize, m: usize },
    Unary { kind: UnaryKind, input: usize, x: Rc<Vec<f64>>, y: Rc<Vec<f64>> },
    Clamp { input: usize, x: Rc<Vec<f64>>, lo: f64, hi: f64 },
    Sum { input: usize },
    SumAxis { input: usize, dims: [usize; 2], axis: usize },
    Broadcast { input: usize, from: [usize; 2], to: [usize; 2] },
    Concat { parts: Vec<(Option<usize>, [usize; 2])>, axis: usize },
    Slice { input: usize, dims: [usize; 2], axis: usize, start: usize, end: usize },
    Reshape { input: usize },
    LogSumExp { input: usize, x: Rc<Vec<f64>>, y: Rc<Vec<f64>>, dims: [usize; 2] },
}

/// Clear the current thread's tape. Tensors tracked before the reset become stale.
pub fn reset_tape() {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.generation += 1;
        t.nodes.clear();
    });
}

/// Number of nodes recorded on the current thread's tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}

fn current_generation() -> u64 {
    TAPE.with(|t| t.borrow().generation)
}

fn record(op: Op, numel: usize) -> NodeRef {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.nodes.push(Node { op, numel });
        NodeRef { generation: t.generation, index: t.nodes.len() - 1 }
    })
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.node.is_some())
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.len() > 2 {
        return Err(Error::shape("tensor", format!("rank {} > 2 is not supported", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape("tensor", format!("shape {shape:?} needs {numel} values, got {len}")));
    }
    Ok(())
}

fn dims2(shape: &[usize]) -> [usize; 2] {
    match shape {
        [] => [1, 1],
        [c] => [1, *c],
        [r, c] => [*r, *c],
        _ => unreachable!("rank checked at construction"),
    }
}

impl Tensor {
    /// Untracked constant.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Tensor { shape: shape.to_vec(), data: Rc::new(data), node: None })
    }

    /// Leaf that requires a gradient on the current tape.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let mut t = Tensor::new(data, shape)?;
        t.node = Some(record(Op::Leaf, t.numel()));
        Ok(t)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: Rc::new(vec![v]), node: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        assert!(n > 0, "empty vector tensor");
        Tensor { shape: vec![n], data: Rc::new(data), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::new(vec![0.0; shape.iter().product()], shape)
    }

    pub fn full(v: f64, shape: &[usize]) -> Result<Self> {
        Tensor::new(vec![v; shape.iter().product()], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of the 2-d view (1 for rank 0 and 1).
    pub fn rows(&self) -> usize {
        dims2(&self.shape)[0]
    }

    /// Columns of the 2-d view (the last dimension).
    pub fn cols(&self) -> usize {
        dims2(&self.shape)[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Copy without tape history.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Rc::clone(&self.data), node: None }
    }

    fn tracked(&self) -> Result<Option<usize>> {
        match self.node {
            None => Ok(None),
            Some(r) if r.generation == current_generation() => Ok(Some(r.index)),
            Some(_) => Err(Error::contract("tensor belongs to a previous tape generation")),
        }
    }

    fn operand(&self) -> Result<Operand> {
        Ok(Operand { node: self.tracked()?, value: Rc::clone(&self.data), dims: dims2(&self.shape) })
    }

    fn wrap(data: Vec<f64>, shape: Vec<usize>, op: Option<Op>) -> Tensor {
        let numel = data.len();
        let node = op.map(|op| record(op, numel));
        Tensor { shape, data: Rc::new(data), node }
    }

    // ---- elementwise binary ----------------------------------------------

    fn binary(&self, other: &Tensor, kind: BinaryKind, name: &'static str) -> Result<Tensor> {
        let a = self.operand()?;
        let b = other.operand()?;
        let [ar, ac] = a.dims;
        let [br, bc] = b.dims;
        let rows = broadcast_dim(ar, br).ok_or_else(|| {
            Error::shape(name, format!("{:?} vs {:?}", self.shape, other.shape))
        })?;
        let cols = broadcast_dim(ac, bc).ok_or_else(|| {
            Error::shape(name, format!("{:?} vs {:?}", self.shape, other.shape))
        })?;
        let out_shape = if rows > 1 || self.rank() == 2 || other.rank() == 2 {
            vec![rows, cols]
        } else if self.rank() == 1 || other.rank() == 1 {
            vec![cols]
        } else {
            vec![]
        };
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (av, bv) = (&a.value, &b.value);
        let mut out = Vec::with_capacity(rows * cols);
        if a.dims == b.dims {
            out.extend(av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..rows {
                for j in 0..cols {
                    out.push(f(av[bidx(a.dims, i, j)], bv[bidx(b.dims, i, j)]));
                }
            }
        }
        if let BinaryKind::Div = kind {
            if let Some(idx) = bv.iter().position(|&y| y == 0.0) {
                return Err(Error::Domain { op: "div", index: idx, value: 0.0 });
            }
        }
        let op = (a.node.is_some() || b.node.is_some())
            .then(|| Op::Binary { kind, a, b, out: [rows, cols] });
        Ok(Tensor::wrap(out, out_shape, op))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.add(&Tensor::scalar(c))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.mul(&Tensor::scalar(c))
    }

    // ---- matmul ------------------------------------------------------------

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let a = self.operand()?;
        let b = other.operand()?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = a.value[i * k + p];
                let brow = &b.value[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let op = (a.node.is_some() || b.node.is_some()).then(|| Op::MatMul { a, b, n, k, m });
        Ok(Tensor::wrap(out, vec![n, m], op))
    }

    // ---- elementwise unary ---------------------------------------------------

    fn unary(&self, kind: UnaryKind) -> Result<Tensor> {
        let x = &self.data;
        let y: Vec<f64> = match kind {
            UnaryKind::Exp => {
                let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                if let Some(i) = y.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Domain { op: "exp", index: i, value: x[i] });
                }
                y
            }
            UnaryKind::Log => {
                if let Some(i) = x.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::Domain { op: "log", index: i, value: x[i] });
                }
                x.iter().map(|v| v.ln()).collect()
            }
            UnaryKind::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            UnaryKind::Softplus => x.iter().map(|&v| softplus(v)).collect(),
            UnaryKind::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::Tanh => x.iter().map(|v| v.tanh()).collect(),
            UnaryKind::Neg => x.iter().map(|v| -v).collect(),
            UnaryKind::Square => x.iter().map(|v| v * v).collect(),
        };
        match self.tracked()? {
            Some(input) => {
                let y = Rc::new(y);
                let numel = y.len();
                let op = Op::Unary { kind, input, x: Rc::clone(&self.data), y: Rc::clone(&y) };
                Ok(Tensor { shape: self.shape.clone(), data: y, node: Some(record(op, numel)) })
            }
            None => Ok(Tensor::wrap(y, self.shape.clone(), None)),
        }
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Log)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Relu)
    }

    /// `ln(1 + e^x)` evaluated as `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Neg)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Square)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        let y: Vec<f64> = self.data.iter().map(|v| v.clamp(lo, hi)).collect();
        let op = self
            .tracked()?
            .map(|input| Op::Clamp { input, x: Rc::clone(&self.data), lo, hi });
        Ok(Tensor::wrap(y, self.shape.clone(), op))
    }

    // ---- reductions ------------------------------------------------------------

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        let op = self.tracked()?.map(|input| Op::Sum { input });
        Ok(Tensor::wrap(vec![s], vec![], op))
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// Sum over `axis` of the actual shape. For rank 2, axis 0 sums rows
    /// together (`[r, c] → [c]`) and axis 1 sums within rows (`[r, c] → [r]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let axis2 = self.axis2(axis, "sum_axis")?;
        let dims = dims2(&self.shape);
        let [r, c] = dims;
        let (out, shape) = if axis2 == 1 {
            let out: Vec<f64> = (0..r).map(|i| self.data[i * c..(i + 1) * c].iter().sum()).collect();
            let shape = if self.rank() == 2 { vec![r] } else { vec![] };
            (out, shape)
        } else {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            (out, vec![c])
        };
        let op = self.tracked()?.map(|input| Op::SumAxis { input, dims, axis: axis2 });
        Ok(Tensor::wrap(out, shape, op))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let summed = self.sum_axis(axis)?;
        let n = self.numel() / summed.numel();
        summed.scale(1.0 / n as f64)
    }

    /// Log-sum-exp over the last axis: `[r, c] → [r]`, `[c] → []`.
    pub fn logsumexp(&self) -> Result<Tensor> {
        let dims = dims2(&self.shape);
        let [r, c] = dims;
        let out: Vec<f64> = (0..r)
            .map(|i| {
                let row = &self.data[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return m;
                }
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let shape = if self.rank() == 2 { vec![r] } else { vec![] };
        match self.tracked()? {
            Some(input) => {
                let y = Rc::new(out);
                let op = Op::LogSumExp { input, x: Rc::clone(&self.data), y: Rc::clone(&y), dims };
                let numel = y.len();
                Ok(Tensor { shape, data: y, node: Some(record(op, numel)) })
            }
            None => Ok(Tensor::wrap(out, shape, None)),
        }
    }

    // ---- structural ------------------------------------------------------------

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, shape.iter().product())?;
        let from = dims2(&self.shape);
        let to = dims2(shape);
        let ok = (from[0] == to[0] || from[0] == 1) && (from[1] == to[1] || from[1] == 1);
        if !ok || shape.len() < self.rank() {
            return Err(Error::shape("broadcast", format!("{:?} -> {:?}", self.shape, shape)));
        }
        let mut out = Vec::with_capacity(to[0] * to[1]);
        for i in 0..to[0] {
            for j in 0..to[1] {
                out.push(self.data[bidx(from, i, j)]);
            }
        }
        let op = self.tracked()?.map(|input| Op::Broadcast { input, from, to });
        Ok(Tensor::wrap(out, shape.to_vec(), op))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.numel())?;
        let op = self.tracked()?.map(|input| Op::Reshape { input });
        let node = op.map(|op| record(op, self.numel()));
        Ok(Tensor { shape: shape.to_vec(), data: Rc::clone(&self.data), node })
    }

    /// Concatenate along `axis`. All parts must share rank and the other dimension.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.rank();
        if rank == 0 || parts.iter().any(|p| p.rank() != rank) {
            return Err(Error::shape("concat", "inputs must share a rank of 1 or 2"));
        }
        let axis2 = first.axis2(axis, "concat")?;
        let dims: Vec<[usize; 2]> = parts.iter().map(|p| dims2(&p.shape)).collect();
        let fixed = 1 - axis2;
        if dims.iter().any(|d| d[fixed] != dims[0][fixed]) {
            let shapes: Vec<_> = parts.iter().map(|p| p.shape.clone()).collect();
            return Err(Error::shape("concat", format!("incompatible shapes {shapes:?}")));
        }
        let total: usize = dims.iter().map(|d| d[axis2]).sum();
        let out_dims = if axis2 == 0 { [total, dims[0][1]] } else { [dims[0][0], total] };
        let mut out = Vec::with_capacity(out_dims[0] * out_dims[1]);
        if axis2 == 0 {
            for p in parts {
                out.extend_from_slice(&p.data);
            }
        } else {
            for i in 0..out_dims[0] {
                for (p, d) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&p.data[i * d[1]..(i + 1) * d[1]]);
                }
            }
        }
        let mut tracked = Vec::with_capacity(parts.len());
        for (p, d) in parts.iter().zip(&dims) {
            tracked.push((p.tracked()?, *d));
        }
        let shape = if rank == 2 { out_dims.to_vec() } else { vec![out_dims[1]] };
        let op = tracked
            .iter()
            .any(|(n, _)| n.is_some())
            .then_some(Op::Concat { parts: tracked, axis: axis2 });
        Ok(Tensor::wrap(out, shape, op))
    }

    /// Stack equal-length rank ≤ 1 tensors as the columns of an `[n, k]` matrix.
    pub fn stack_cols(parts: &[Tensor]) -> Result<Tensor> {
        let cols: Vec<Tensor> = parts
            .iter()
            .map(|p| {
                if p.rank() > 1 {
                    return Err(Error::shape("stack_cols", format!("rank-{} input", p.rank())));
                }
                p.reshape(&[p.numel(), 1])
            })
            .collect::<Result<_>>()?;
        Tensor::concat(&cols, 1)
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let axis2 = self.axis2(axis, "slice")?;
        let dims = dims2(&self.shape);
        if start >= end || end > dims[axis2] {
            return Err(Error::shape("slice", format!("range {start}..{end} on {:?}", self.shape)));
        }
        let [r, c] = dims;
        let (out, shape) = if axis2 == 0 {
            (self.data[start * c..end * c].to_vec(), vec![end - start, c])
        } else {
            let mut out = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                out.extend_from_slice(&self.data[i * c + start..i * c + end]);
            }
            let shape = if self.rank() == 2 { vec![r, end - start] } else { vec![end - start] };
            (out, shape)
        };
        let op = self.tracked()?.map(|input| Op::Slice { input, dims, axis: axis2, start, end });
        Ok(Tensor::wrap(out, shape, op))
    }

    fn axis2(&self, axis: usize, op: &'static str) -> Result<usize> {
        match (self.rank(), axis) {
            (1, 0) => Ok(1),
            (2, a) if a < 2 => Ok(a),
            _ => Err(Error::shape(op, format!("axis {axis} on shape {:?}", self.shape))),
        }
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b || b == 1 {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else {
        None
    }
}

#[inline]
fn bidx(dims: [usize; 2], i: usize, j: usize) -> usize {
    let r = if dims[0] == 1 { 0 } else { i };
    let c = if dims[1] == 1 { 0 } else { j };
    r * dims[1] + c
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

/// Gradients of one backward pass, keyed by leaf tensor.
pub struct Gradients {
    generation: u64,
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// d(loss)/d(leaf); zeros for leaves that did not participate.
    pub fn get(&self, t: &Tensor) -> Vec<f64> {
        match t.node {
            Some(r) if r.generation == self.generation => self
                .grads
                .get(r.index)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; t.numel()]),
            _ => vec![0.0; t.numel()],
        }
    }

    /// Nodes processed by the reverse sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], numel: &[usize], idx: usize) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; numel[idx]])
}

/// Reverse sweep from a single-element `loss` over the current tape.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", loss.shape)));
    }
    let root = loss
        .tracked()?
        .ok_or_else(|| Error::contract("loss is not connected to the active tape"))?;
    TAPE.with(|t| {
        let tape = t.borrow();
        let numel: Vec<usize> = tape.nodes[..=root].iter().map(|n| n.numel).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            propagate(&tape.nodes[i].op, &g, &mut grads, &numel);
            if let Op::Leaf = tape.nodes[i].op {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { generation: tape.generation, grads, visited })
    })
}

fn propagate(op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>], numel: &[usize]) {
    match op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, out } => {
            let [rows, cols] = *out;
            for (side, this, other) in [(0, a, b), (1, b, a)] {
                let Some(idx) = this.node else { continue };
                let ga = accumulate(grads, numel, idx);
                for i in 0..rows {
                    for j in 0..cols {
                        let gij = g[i * cols + j];
                        let ti = bidx(this.dims, i, j);
                        let oi = bidx(other.dims, i, j);
                        let d = match (kind, side) {
                            (BinaryKind::Add, _) => 1.0,
                            (BinaryKind::Sub, 0) => 1.0,
                            (BinaryKind::Sub, _) => -1.0,
                            (BinaryKind::Mul, _) => other.value[oi],
                            (BinaryKind::Div, 0) => 1.0 / other.value[oi],
                            (BinaryKind::Div, _) => -other.value[oi] / (this.value[ti] * this.value[ti]),
                        };
                        ga[ti] += gij * d;
                    }
                }
            }
        }
        Op::MatMul { a, b, n, k, m } => {
            let (n, k, m) = (*n, *k, *m);
            if let Some(idx) = a.node {
                let ga = accumulate(grads, numel, idx);
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &b.value[p * m..(p + 1) * m];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(idx) = b.node {
                let gb = accumulate(grads, numel, idx);
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = a.value[i * k + p];
                        for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *o += aip * gv;
                        }
                    }
                }
            }
        }
        Op::Unary { kind, input, x, y } => {
            let gi = accumulate(grads, numel, *input);
            for (j, o) in gi.iter_mut().enumerate() {
                let d = match kind {
                    UnaryKind::Exp => y[j],
                    UnaryKind::Log => 1.0 / x[j],
                    UnaryKind::Relu => {
                        if x[j] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    UnaryKind::Softplus => sigmoid(x[j]),
                    UnaryKind::Sigmoid => y[j] * (1.0 - y[j]),
                    UnaryKind::Tanh => 1.0 - y[j] * y[j],
                    UnaryKind::Neg => -1.0,
                    UnaryKind::Square => 2.0 * x[j],
                };
                *o += g[j] * d;
            }
        }
        Op::Clamp { input, x, lo, hi } => {
            let gi = accumulate(grads, numel, *input);
            for (j, o) in gi.iter_mut().enumerate() {
                if x[j] >= *lo && x[j] <= *hi {
                    *o += g[j];
                }
            }
        }
        Op::Sum { input } => {
            let gi = accumulate(grads, numel, *input);
            for o in gi.iter_mut() {
                *o += g[0];
            }
        }
        Op::SumAxis { input, dims, axis } => {
            let [r, c] = *dims;
            let gi = accumulate(grads, numel, *input);
            for i in 0..r {
                for j in 0..c {
                    gi[i * c + j] += if *axis == 1 { g[i] } else { g[j] };
                }
            }
        }
        Op::Broadcast { input, from, to } => {
            let gi = accumulate(grads, numel, *input);
            for i in 0..to[0] {
                for j in 0..to[1] {
                    gi[bidx(*from, i, j)] += g[i * to[1] + j];
                }
            }
        }
        Op::Concat { parts, axis } => {
            let out_cols: usize = if *axis == 1 { parts.iter().map(|(_, d)| d[1]).sum() } else { parts[0].1[1] };
            let mut offset = 0;
            for (node, d) in parts {
                if let Some(idx) = node {
                    let gi = accumulate(grads, numel, *idx);
                    for i in 0..d[0] {
                        for j in 0..d[1] {
                            let src = if *axis == 0 {
                                (offset + i) * out_cols + j
                            } else {
                                i * out_cols + offset + j
                            };
                            gi[i * d[1] + j] += g[src];
                        }
                    }
                }
                offset += d[*axis];
            }
        }
        Op::Slice { input, dims, axis, start, end } => {
            let [r, c] = *dims;
            let gi = accumulate(grads, numel, *input);
            if *axis == 0 {
                for (o, gv) in gi[start * c..end * c].iter_mut().zip(g) {
                    *o += gv;
                }
            } else {
                let w = end - start;
                for i in 0..r {
                    for j in 0..w {
                        gi[i * c + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::Reshape { input } => {
            let gi = accumulate(grads, numel, *input);
            for (o, gv) in gi.iter_mut().zip(g) {
                *o += gv;
            }
        }
        Op::LogSumExp { input, x, y, dims } => {
            let [r, c] = *dims;
            let gi = accumulate(grads, numel, *input);
            for i in 0..r {
                if y[i] == f64::NEG_INFINITY {
                    continue;
                }
                for j in 0..c {
                    gi[i * c + j] += g[i] * (x[i * c + j] - y[i]).exp();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let i2 = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let a = t(&[1.5, -2.0, 3.25, 4.0], &[2, 2]);
        assert_eq!(i2.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn relu_and_softplus_values() {
        assert_eq!(Tensor::scalar(-1.0).relu().unwrap().item(), 0.0);
        let sp = Tensor::scalar(0.0).softplus().unwrap().item();
        assert!((sp - std::f64::consts::LN_2).abs() < 1e-15);
        // large inputs neither overflow nor lose the linear regime
        assert_eq!(Tensor::scalar(1000.0).softplus().unwrap().item(), 1000.0);
        assert!(Tensor::scalar(-1000.0).softplus().unwrap().item() >= 0.0);
    }

    #[test]
    fn shape_and_domain_errors() {
        let a = t(&[1.0, 2.0, 3.0], &[3]);
        let b = t(&[1.0, 2.0], &[2]);
        assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
        assert!(matches!(t(&[1.0, 2.0], &[1, 2]).matmul(&b.reshape(&[1, 2]).unwrap()), Err(Error::Shape { .. })));
        match t(&[1.0, -2.0, 3.0], &[3]).log() {
            Err(Error::Domain { op: "log", index: 1, .. }) => {}
            other => panic!("expected domain error, got {other:?}"),
        }
        assert!(matches!(Tensor::scalar(800.0).exp(), Err(Error::Domain { op: "exp", index: 0, .. })));
        assert!(Tensor::new(vec![1.0; 3], &[2, 2]).is_err());
    }

    #[test]
    fn product_rule() {
        reset_tape();
        let x = Tensor::param(vec![3.0], &[]).unwrap();
        let y = Tensor::param(vec![4.0], &[]).unwrap();
        let loss = x.mul(&y).unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(&x), vec![4.0]);
        assert_eq!(g.get(&y), vec![3.0]);
    }

    #[test]
    fn power_rule_and_unused_leaf() {
        reset_tape();
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let unused = Tensor::param(vec![5.0, 5.0, 5.0], &[3]).unwrap();
        let loss = x.square().unwrap().sum().unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(&x), vec![2.0, 4.0]);
        assert_eq!(g.get(&unused), vec![0.0; 3]);
    }

    #[test]
    fn sum_and_mean_gradients_are_constant_fields() {
        reset_tape();
        let x = Tensor::param(vec![-3.0, 0.5, 7.0, 100.0], &[2, 2]).unwrap();
        let gs = backward(&x.sum().unwrap()).unwrap();
        assert_eq!(gs.get(&x), vec![1.0; 4]);
        let gm = backward(&x.mean().unwrap()).unwrap();
        assert_eq!(gm.get(&x), vec![0.25; 4]);
    }

    #[test]
    fn reused_node_accumulates_and_each_node_visited_once() {
        reset_tape();
        let x = Tensor::param(vec![2.0], &[]).unwrap();
        let y = x.mul(&x).unwrap(); // node 1
        let z = y.add(&x).unwrap(); // node 2
        let g = backward(&z).unwrap();
        assert_eq!(g.get(&x), vec![5.0]);
        assert_eq!(g.visited(), tape_len());
    }

    #[test]
    fn non_scalar_loss_and_detached_loss_rejected() {
        reset_tape();
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(backward(&x), Err(Error::Contract(_))));
        assert!(matches!(backward(&x.sum().unwrap().detach()), Err(Error::Contract(_))));
    }

    #[test]
    fn stale_tensor_rejected() {
        reset_tape();
        let x = Tensor::param(vec![1.0], &[]).unwrap();
        reset_tape();
        assert!(matches!(x.exp(), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_do_not_touch_tape() {
        reset_tape();
        let a = t(&[1.0, 2.0], &[2]);
        let _ = a.exp().unwrap().add(&a).unwrap().sum().unwrap();
        assert_eq!(tape_len(), 0);
    }

    #[test]
    fn broadcasting_rows_and_columns() {
        let m = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let row = t(&[10.0, 20.0, 30.0], &[3]);
        let col = t(&[100.0, 200.0], &[2, 1]);
        assert_eq!(m.add(&row).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        assert_eq!(m.add(&col).unwrap().data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
        assert_eq!(m.sum_axis(0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(m.sum_axis(1).unwrap().data(), &[6.0, 15.0]);
        let s = m.slice(1, 1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 5.0, 6.0]);
        let c = Tensor::concat(&[s.clone(), m.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(&c.data()[..5], &[2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn logsumexp_is_stable() {
        let x = t(&[1000.0, 1000.0], &[2]);
        let y = x.logsumexp().unwrap().item();
        assert!((y - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
    }
}
