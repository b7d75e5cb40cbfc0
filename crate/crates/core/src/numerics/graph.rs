//! Tape-based reverse-mode automatic differentiation over [`NdArray`] values.
//!
//! A [`Graph`] records every primitive applied to its [`Tensor`]s in
//! construction order, which is already a topological order. [`Tensor::backward`]
//! walks that order in reverse exactly once and returns the gradients of all
//! leaves that the loss depends on.
//!
//! The primitive set is closed: matmul, broadcasting add/sub/mul/div, exp,
//! log, tanh, sigmoid, relu, abs, clamp, softmax, concat, slice, reshape,
//! sum/mean reductions and row gather. Everything else (convolution,
//! bilinear sampling, transposes, layer norm) is composed from these.

use std::cell::RefCell;
use std::rc::Rc;

use super::array::{numel, permute_index, NdArray};
use crate::error::{contract, Result};

/// Marker in a gather index for a zero (padding) row.
pub const PAD: u32 = u32::MAX;

type TapeRef = Rc<RefCell<Tape>>;

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    stops: Stops,
}

/// Stop-gradient values, recorded on one graph and replayed on others so a
/// finite-difference oracle sees them as constants.
#[derive(Default)]
enum Stops {
    #[default]
    Live,
    Record(Vec<NdArray>),
    Replay(Rc<Vec<NdArray>>, usize),
}

struct Node {
    op: Op,
    value: Rc<NdArray>,
    needs_grad: bool,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Sum { x: usize, axis: Option<usize> },
    Mean { x: usize, axis: Option<usize> },
    Gather { x: usize, index: Rc<Vec<u32>>, width: usize },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Softmax(x)
            | Op::Reshape(x) => vec![*x],
            Op::Clamp { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

/// An autodiff graph. Cheap to clone; clones share the same tape.
#[derive(Clone)]
pub struct Graph {
    tape: TapeRef,
    seed: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(0)
    }
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Self { tape: Rc::new(RefCell::new(Tape::default())), seed }
    }

    /// A graph that remembers every [`Tensor::detach`] value in order.
    pub fn recording_stops(seed: u64) -> Self {
        let g = Self::new(seed);
        g.tape.borrow_mut().stops = Stops::Record(Vec::new());
        g
    }

    /// Values recorded so far by a [`Graph::recording_stops`] graph.
    pub fn recorded_stops(&self) -> Vec<NdArray> {
        match &self.tape.borrow().stops {
            Stops::Record(v) => v.clone(),
            _ => Vec::new(),
        }
    }

    /// A graph whose detach calls return `values` in order instead of the
    /// live value, while shapes agree.
    pub fn replaying_stops(seed: u64, values: Rc<Vec<NdArray>>) -> Self {
        let g = Self::new(seed);
        g.tape.borrow_mut().stops = Stops::Replay(values, 0);
        g
    }

    /// Seed reserved for stochastic work performed while building this graph.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: NdArray) -> Tensor {
        push(&self.tape, Op::Leaf, value, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: NdArray) -> Tensor {
        push(&self.tape, Op::Constant, value, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.constant(NdArray::scalar(value))
    }

    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !Rc::ptr_eq(&self.tape, &loss.tape) {
            return contract("loss belongs to a different graph");
        }
        loss.backward()
    }
}

fn push(tape: &TapeRef, op: Op, value: NdArray, leaf: bool) -> Tensor {
    let value = Rc::new(value);
    let mut t = tape.borrow_mut();
    let needs_grad = leaf || op.parents().iter().any(|&p| t.nodes[p].needs_grad);
    let id = t.nodes.len();
    t.nodes.push(Node { op, value: value.clone(), needs_grad });
    Tensor { tape: tape.clone(), id, value }
}

/// A node of a [`Graph`] together with its forward value.
#[derive(Clone)]
pub struct Tensor {
    tape: TapeRef,
    id: usize,
    value: Rc<NdArray>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor#{}({:?})", self.id, self.value)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of a broadcast.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    if inner == 0 {
        return;
    }
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer = numel(out) / inner;
    let mut counter = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * inner;
        for j in 0..inner {
            f(base + j, oa + j * ia, ob + j * ib);
        }
        for d in (0..nd - 1).rev() {
            counter[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if counter[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

struct MatMulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return contract(format!("matmul needs rank >= 2, got {a:?} x {b:?}"));
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return contract(format!("matmul inner dims differ: {a:?} x {b:?}"));
    }
    let (batch_shape, a_batched, b_batched) = if ab == bb {
        (ab, !ab.is_empty(), !bb.is_empty())
    } else if bb.is_empty() {
        (ab, true, false)
    } else if ab.is_empty() {
        (bb, false, true)
    } else {
        return contract(format!("matmul batch dims differ: {a:?} x {b:?}"));
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend([am[0], bm[1]]);
    Ok(MatMulDims {
        batch: numel(batch_shape),
        a_batched,
        b_batched,
        m: am[0],
        k: am[1],
        n: bm[1],
        out_shape,
    })
}

/// `c = a · b + c` with arbitrary strides for `a` and `b`; `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every offset dgemm reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &NdArray {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// The graph this tensor lives in.
    pub fn graph(&self) -> Graph {
        Graph { tape: self.tape.clone(), seed: 0 }
    }

    /// Whether any leaf influences this tensor.
    pub fn requires_grad(&self) -> bool {
        self.tape.borrow().nodes[self.id].needs_grad
    }

    fn unary(&self, op: Op, value: NdArray) -> Tensor {
        push(&self.tape, op, value, false)
    }

    fn same_graph(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            contract("operands belong to different graphs")
        }
    }

    /// A constant in the same graph.
    pub fn constant_like(&self, value: NdArray) -> Tensor {
        push(&self.tape, Op::Constant, value, false)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        let value = {
            let mut tape = self.tape.borrow_mut();
            match &mut tape.stops {
                Stops::Live => (*self.value).clone(),
                Stops::Record(v) => {
                    v.push((*self.value).clone());
                    (*self.value).clone()
                }
                Stops::Replay(v, i) => {
                    let hit = v.get(*i).filter(|r| r.shape() == self.value.shape()).cloned();
                    *i += 1;
                    hit.unwrap_or_else(|| (*self.value).clone())
                }
            }
        };
        self.constant_like(value)
    }

    fn binary(&self, other: &Tensor, op: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_graph(other)?;
        let (a, b) = (&*self.value, &*other.value);
        let value = if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            NdArray::new(a.shape().to_vec(), data)?
        } else {
            let Some(out) = broadcast_shape(a.shape(), b.shape()) else {
                return contract(format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
            };
            let sa = broadcast_strides(a.shape(), &out);
            let sb = broadcast_strides(b.shape(), &out);
            let mut data = vec![0.0; numel(&out)];
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
            NdArray::new(out, data)?
        };
        Ok(self.unary(op(self.id, other.id), value))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.mul(&self.constant_like(NdArray::scalar(factor)))
    }

    pub fn add_scalar(&self, v: f64) -> Result<Tensor> {
        self.add(&self.constant_like(NdArray::scalar(v)))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// Batched matrix product over the last two axes. A rank-2 operand is
    /// shared across the other operand's batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_graph(other)?;
        let d = matmul_dims(self.shape(), other.shape())?;
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; numel(&d.out_shape)];
        for t in 0..d.batch {
            let ao = if d.a_batched { t * d.m * d.k } else { 0 };
            let bo = if d.b_batched { t * d.k * d.n } else { 0 };
            let co = t * d.m * d.n;
            gemm_acc(d.m, d.k, d.n, &a[ao..], d.k, 1, &b[bo..], d.n, 1, &mut out[co..]);
        }
        let value = NdArray::new(d.out_shape, out)?;
        Ok(self.unary(Op::MatMul(self.id, other.id), value))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp(self.id), self.value.map(f64::exp))
    }

    pub fn log(&self) -> Tensor {
        self.unary(Op::Log(self.id), self.value.map(f64::ln))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh(self.id), self.value.map(f64::tanh))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid(self.id), self.value.map(sigmoid))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu(self.id), self.value.map(|v| v.max(0.0)))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs(self.id), self.value.map(f64::abs))
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Op::Clamp { x: self.id, lo, hi }, self.value.map(|v| v.clamp(lo, hi)))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let w = match self.shape().last() {
            Some(&w) if w > 0 => w,
            _ => return contract(format!("softmax over empty last axis {:?}", self.shape())),
        };
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(w) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = NdArray::new(self.shape().to_vec(), out)?;
        Ok(self.unary(Op::Softmax(self.id), value))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return contract("concat of zero tensors");
        };
        let nd = first.shape().len();
        if axis >= nd {
            return contract(format!("concat axis {axis} out of range for rank {nd}"));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            first.same_graph(p)?;
            let s = p.shape();
            if s.len() != nd || (0..nd).any(|d| d != axis && s[d] != first.shape()[d]) {
                return contract(format!("concat shape mismatch {:?} vs {:?}", first.shape(), s));
            }
            shape[axis] += s[axis];
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = NdArray::new(shape, out)?;
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(first.unary(Op::Concat { inputs, axis }, value))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return contract(format!("slice {axis}:{start}+{len} out of range for {shape:?}"));
        }
        let (outer, inner) = outer_inner(shape, axis);
        let full = shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let value = NdArray::new(new_shape, out)?;
        Ok(self.unary(Op::Slice { x: self.id, axis, start }, value))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let value = NdArray::new(shape.to_vec(), self.data().to_vec())?;
        Ok(self.unary(Op::Reshape(self.id), value))
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let shape = self.shape();
        let value = match axis {
            None => {
                let n = self.numel().max(1) as f64;
                let s = self.value.sum();
                NdArray::scalar(if mean { s / n } else { s })
            }
            Some(axis) => {
                if axis >= shape.len() {
                    return contract(format!("reduce axis {axis} out of range for {shape:?}"));
                }
                let (outer, inner) = outer_inner(shape, axis);
                let size = shape[axis];
                let mut out = vec![0.0; outer * inner];
                let x = self.data();
                for o in 0..outer {
                    for s in 0..size {
                        let src = &x[(o * size + s) * inner..(o * size + s + 1) * inner];
                        for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                if mean && size > 0 {
                    out.iter_mut().for_each(|v| *v /= size as f64);
                }
                let mut new_shape = shape.to_vec();
                new_shape[axis] = 1;
                NdArray::new(new_shape, out)?
            }
        };
        let op = if mean { Op::Mean { x: self.id, axis } } else { Op::Sum { x: self.id, axis } };
        Ok(self.unary(op, value))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        self.reduce(None, false).expect("full reduction cannot fail")
    }

    pub fn mean(&self) -> Tensor {
        self.reduce(None, true).expect("full reduction cannot fail")
    }

    /// Sum over one axis, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(Some(axis), false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(Some(axis), true)
    }

    /// Views the tensor as rows of `width` values and returns the rows named by
    /// `index` as a `[index.len(), width]` tensor. [`PAD`] yields a zero row.
    pub fn gather(&self, index: Rc<Vec<u32>>, width: usize) -> Result<Tensor> {
        if width == 0 || self.numel() % width != 0 {
            return contract(format!("gather width {width} does not divide {:?}", self.shape()));
        }
        let rows = self.numel() / width;
        let x = self.data();
        let mut out = vec![0.0; index.len() * width];
        for (dst, &i) in out.chunks_mut(width).zip(index.iter()) {
            if i == PAD {
                continue;
            }
            let i = i as usize;
            if i >= rows {
                return contract(format!("gather row {i} out of range ({rows} rows)"));
            }
            dst.copy_from_slice(&x[i * width..(i + 1) * width]);
        }
        let value = NdArray::new([index.len(), width], out)?;
        Ok(self.unary(Op::Gather { x: self.id, index, width }, value))
    }

    /// Axis permutation, built on [`Tensor::gather`].
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let index = permute_index(self.shape(), axes)?;
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        self.gather(Rc::new(index), 1)?.reshape(&shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd < 2 {
            return contract("transpose needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// Reverse pass from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return contract(format!("backward needs a scalar loss, got shape {:?}", self.shape()));
        }
        let tape = self.tape.borrow();
        let nodes = &tape.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaves[id] = Some(g),
                Op::Constant => {}
                op => backprop(op, node, &g, nodes, &mut grads)?,
            }
        }
        Ok(Gradients { leaves })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot => *slot = Some(contrib),
    }
}

/// Sums `g` (shaped `out`) down to `shape` along broadcast axes, scaled per element by `f`.
fn reduce_broadcast(
    g: &[f64],
    out: &[usize],
    shape: &[usize],
    other: Option<(&NdArray, &[usize])>,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let s = broadcast_strides(shape, out);
    let mut acc = vec![0.0; numel(shape)];
    match other {
        Some((o, os)) => {
            let od = o.data();
            for_each_broadcast(out, &s, os, |i, ia, ib| acc[ia] += f(g[i], od[ib]));
        }
        None => for_each_broadcast(out, &s, &s, |i, ia, _| acc[ia] += f(g[i], 0.0)),
    }
    acc
}

fn backprop(op: &Op, node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let out = node.value.shape();
    let val = |id: usize| -> &NdArray { &nodes[id].value };
    match *op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if nodes[a].needs_grad {
                let ga = if val(a).shape() == out {
                    g.to_vec()
                } else {
                    reduce_broadcast(g, out, val(a).shape(), None, |g, _| g)
                };
                accumulate(grads, nodes, a, ga);
            }
            if nodes[b].needs_grad {
                let gb = reduce_broadcast(g, out, val(b).shape(), None, |g, _| sign * g);
                accumulate(grads, nodes, b, gb);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (va, vb) = (val(a), val(b));
            let sa = broadcast_strides(va.shape(), out);
            let sb = broadcast_strides(vb.shape(), out);
            let is_div = matches!(op, Op::Div(..));
            if nodes[a].needs_grad {
                let gb = reduce_broadcast(g, out, va.shape(), Some((vb, &sb)), |g, y| {
                    if is_div {
                        g / y
                    } else {
                        g * y
                    }
                });
                accumulate(grads, nodes, a, gb);
            }
            if nodes[b].needs_grad {
                let mut acc = vec![0.0; vb.len()];
                let (ad, bd) = (va.data(), vb.data());
                for_each_broadcast(out, &sa, &sb, |i, ia, ib| {
                    acc[ib] += if is_div { -g[i] * ad[ia] / (bd[ib] * bd[ib]) } else { g[i] * ad[ia] };
                });
                accumulate(grads, nodes, b, acc);
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let d = matmul_dims(va.shape(), vb.shape())?;
            let (m, k, n) = (d.m, d.k, d.n);
            if nodes[a].needs_grad {
                let mut ga = vec![0.0; va.len()];
                for t in 0..d.batch {
                    let ao = if d.a_batched { t * m * k } else { 0 };
                    let bo = if d.b_batched { t * k * n } else { 0 };
                    // dA += dC · Bᵀ
                    gemm_acc(m, n, k, &g[t * m * n..], n, 1, &vb.data()[bo..], 1, n, &mut ga[ao..]);
                }
                accumulate(grads, nodes, a, ga);
            }
            if nodes[b].needs_grad {
                let mut gb = vec![0.0; vb.len()];
                for t in 0..d.batch {
                    let ao = if d.a_batched { t * m * k } else { 0 };
                    let bo = if d.b_batched { t * k * n } else { 0 };
                    // dB += Aᵀ · dC
                    gemm_acc(k, m, n, &va.data()[ao..], 1, k, &g[t * m * n..], n, 1, &mut gb[bo..]);
                }
                accumulate(grads, nodes, b, gb);
            }
        }
        Op::Exp(x) => {
            let y = node.value.data();
            accumulate(grads, nodes, x, g.iter().zip(y).map(|(g, y)| g * y).collect());
        }
        Op::Log(x) => {
            let xv = val(x).data();
            accumulate(grads, nodes, x, g.iter().zip(xv).map(|(g, x)| g / x).collect());
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            accumulate(grads, nodes, x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            accumulate(grads, nodes, x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
        }
        Op::Relu(x) => {
            let xv = val(x).data();
            let gx = g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(grads, nodes, x, gx);
        }
        Op::Abs(x) => {
            let xv = val(x).data();
            let gx = g.iter().zip(xv).map(|(g, &x)| if x == 0.0 { 0.0 } else { g * x.signum() }).collect();
            accumulate(grads, nodes, x, gx);
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(x).data();
            let gx = g.iter().zip(xv).map(|(g, &x)| if x > lo && x < hi { *g } else { 0.0 }).collect();
            accumulate(grads, nodes, x, gx);
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let w = *out.last().unwrap_or(&1);
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), dr) in g.chunks(w).zip(y.chunks(w)).zip(gx.chunks_mut(w)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot);
                }
            }
            accumulate(grads, nodes, x, gx);
        }
        Op::Concat { ref inputs, axis } => {
            let (outer, inner) = outer_inner(out, axis);
            let total = out[axis] * inner;
            let mut offset = 0;
            for &p in inputs {
                let chunk = val(p).shape()[axis] * inner;
                if nodes[p].needs_grad {
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    accumulate(grads, nodes, p, gp);
                }
                offset += chunk;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = val(x).shape();
            let (outer, inner) = outer_inner(in_shape, axis);
            let full = in_shape[axis] * inner;
            let part = out[axis] * inner;
            let mut gx = vec![0.0; val(x).len()];
            for o in 0..outer {
                let base = o * full + start * inner;
                gx[base..base + part].copy_from_slice(&g[o * part..(o + 1) * part]);
            }
            accumulate(grads, nodes, x, gx);
        }
        Op::Reshape(x) => accumulate(grads, nodes, x, g.to_vec()),
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let in_shape = val(x).shape();
            let mean = matches!(op, Op::Mean { .. });
            let gx = match axis {
                None => {
                    let n = numel(in_shape).max(1) as f64;
                    vec![if mean { g[0] / n } else { g[0] }; numel(in_shape)]
                }
                Some(axis) => {
                    let (outer, inner) = outer_inner(in_shape, axis);
                    let size = in_shape[axis];
                    let f = if mean { 1.0 / size as f64 } else { 1.0 };
                    let mut gx = vec![0.0; numel(in_shape)];
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for s in 0..size {
                            let dst = &mut gx[(o * size + s) * inner..(o * size + s + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, v)| *d = v * f);
                        }
                    }
                    gx
                }
            };
            accumulate(grads, nodes, x, gx);
        }
        Op::Gather { x, ref index, width } => {
            let mut gx = vec![0.0; val(x).len()];
            for (src, &i) in g.chunks(width).zip(index.iter()) {
                if i == PAD {
                    continue;
                }
                let i = i as usize;
                gx[i * width..(i + 1) * width].iter_mut().zip(src).for_each(|(d, v)| *d += v);
            }
            accumulate(grads, nodes, x, gx);
        }
    }
    Ok(())
}

/// Gradients of one backward pass, keyed by leaf tensor.
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `t`; zeros when `t` did not influence the loss.
    pub fn get(&self, t: &Tensor) -> NdArray {
        match self.leaves.get(t.id).and_then(|g| g.as_ref()) {
            Some(g) => NdArray::new(t.shape().to_vec(), g.clone()).expect("gradient shape"),
            None => NdArray::zeros(t.shape().to_vec()),
        }
    }

    /// Whether the backward pass reached `t` at all.
    pub fn reached(&self, t: &Tensor) -> bool {
        self.leaves.get(t.id).is_some_and(|g| g.is_some())
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.leaves.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> NdArray {
        NdArray::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new(0);
        let x = g.leaf(arr(&[3], &[1.0, -2.0, 5.0]));
        let grads = x.sum().backward().unwrap();
        assert_eq!(grads.get(&x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new(0);
        let x = g.leaf(NdArray::scalar(2.0));
        let y = x.mul(&x).unwrap();
        assert_eq!(y.backward().unwrap().get(&x).item().unwrap(), 4.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new(0);
        let x = g.leaf(arr(&[2], &[1.0, 2.0]));
        assert!(matches!(x.backward(), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let g = Graph::new(0);
        let x = g.leaf(arr(&[2], &[1.0, 2.0]));
        let unused = g.leaf(arr(&[2], &[3.0, 4.0]));
        let grads = x.sum().backward().unwrap();
        assert!(!grads.reached(&unused));
        assert_eq!(grads.get(&unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let g = Graph::new(0);
        let a = g.leaf(arr(&[2, 3], &[0.0; 6]));
        let b = g.leaf(arr(&[3], &[1.0, 2.0, 3.0]));
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let grads = c.sum().backward().unwrap();
        assert_eq!(grads.get(&b).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(&a).data(), &[1.0; 6]);
    }

    #[test]
    fn matmul_shared_rhs() {
        let g = Graph::new(0);
        let a = g.leaf(arr(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(arr(&[2, 1], &[10.0, 1.0]));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[12.0, 34.0]);
        let grads = c.sum().backward().unwrap();
        assert_eq!(grads.get(&b).data(), &[4.0, 6.0]);
        assert_eq!(grads.get(&a).data(), &[10.0, 1.0, 10.0, 1.0]);
    }

    #[test]
    fn softmax_rows_and_errors() {
        let g = Graph::new(0);
        let x = g.constant(arr(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, 0.0]));
        let y = x.softmax().unwrap();
        for v in &y.data()[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y.data()[3] - 1.0).abs() < 1e-15 && y.data()[4] < 1e-300);
        let empty = g.constant(NdArray::zeros([2, 0]));
        assert!(empty.softmax().is_err());
    }

    #[test]
    fn gather_pads_and_scatters() {
        let g = Graph::new(0);
        let x = g.leaf(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.gather(Rc::new(vec![1, PAD, 1]), 2).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        let grads = y.sum().backward().unwrap();
        assert_eq!(grads.get(&x).data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let g = Graph::new(0);
        let x = g.leaf(arr(&[4], &[0.3, -1.2, 2.0, 0.7]));
        let y = x.tanh().mul(&x.sigmoid()).unwrap().softmax().unwrap();
        let loss = y.mul(&x).unwrap().sum();
        let a = loss.backward().unwrap().get(&x);
        let b = loss.backward().unwrap().get(&x);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mixing_graphs_is_an_error() {
        let a = Graph::new(0).leaf(NdArray::scalar(1.0));
        let b = Graph::new(0).leaf(NdArray::scalar(1.0));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn replayed_stops_are_frozen() {
        let f = |x: &Tensor| x.mul(&x.detach()).unwrap().sum();
        let g = Graph::recording_stops(0);
        let x = g.leaf(arr(&[2], &[1.0, 3.0]));
        let loss = f(&x);
        assert_eq!(loss.backward().unwrap().get(&x).data(), &[1.0, 3.0]);
        let stops = Rc::new(g.recorded_stops());
        assert_eq!(stops.len(), 1);
        let h = Graph::replaying_stops(0, stops);
        let y = f(&h.constant(arr(&[2], &[2.0, 3.0])));
        // 2 * 1 + 3 * 3 with the stop held at its recorded value.
        assert_eq!(y.value().item().unwrap(), 11.0);
        assert_eq!(f(&Graph::new(0).constant(arr(&[2], &[2.0, 3.0]))).value().item().unwrap(), 13.0);
    }
}
