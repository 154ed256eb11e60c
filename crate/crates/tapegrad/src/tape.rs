//! Append-only op arena. Parents always precede children, so the arena
//! order doubles as a topological order and backward is one reverse sweep.
//!
//! Pullbacks are built from the same recorded ops, so the result of
//! `grad_as_graph` is an ordinary tape node and can be differentiated
//! again (double backward needs no second mechanism).

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::value::{broadcast_shape, Value};

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    // the additive constant is baked into the forward value; only the
    // slope survives into the pullback
    Affine { x: usize, mul: f64 },
    Exp(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sin(usize),
    Cos(usize),
    Abs { x: usize, sign: Arc<Vec<f64>> },
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    BroadcastTo(usize),
    SumTo(usize),
    SumAxis { x: usize, axis: usize },
    MaxAxis { x: usize, axis: usize, mask: Arc<Vec<f64>> },
    SumAll(usize),
    Concat { parts: Arc<Vec<usize>>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize, len: usize },
    PadZero { x: usize, axis: usize, before: usize },
    GatherRows { x: usize, idx: Arc<Vec<usize>> },
    ScatterAddRows { base: usize, src: usize, idx: Arc<Vec<usize>> },
    SegmentMax { x: usize, seg: Arc<Vec<usize>>, mask: Arc<Vec<f64>> },
    NormRows(usize),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
}

/// Handle to a shared op arena. Clones refer to the same arena; one tape
/// per training thread, never shared across threads.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    /// Differentiable leaf. Faults immediately on non-finite input.
    pub fn var(&self, value: Value) -> Result<Tensor> {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf: participates in ops, receives no gradient.
    pub fn constant(&self, value: Value) -> Tensor {
        self.leaf(value, false).expect("constants are not finiteness-checked")
    }

    fn leaf(&self, value: Value, needs_grad: bool) -> Result<Tensor> {
        if needs_grad && !value.all_finite() {
            return Err(Error::NonFinite { op: "var" });
        }
        Ok(self.push(value, Op::Leaf, needs_grad))
    }

    pub fn scalar_const(&self, x: f64) -> Tensor {
        self.constant(Value::scalar(x))
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, value: Value, op: Op, needs_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: value.clone(),
            op,
            needs_grad,
        });
        Tensor {
            tape: self.clone(),
            id,
            value,
        }
    }

    fn handle(&self, id: usize) -> Tensor {
        let value = self.inner.borrow().nodes[id].value.clone();
        Tensor {
            tape: self.clone(),
            id,
            value,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    fn op_of(&self, id: usize) -> Op {
        self.inner.borrow().nodes[id].op.clone()
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// A value recorded on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    value: Value,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.value.shape())
    }
}

fn shape_with_one_at(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.insert(axis, 1);
    s
}

impl Tensor {
    pub fn value(&self) -> &Value {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn check_same_tape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.tape.same(&other.tape) {
            Ok(())
        } else {
            Err(Error::TapeMismatch { op })
        }
    }

    fn unary(
        &self,
        op_name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let value = Value::from_parts(self.shape().to_vec(), data);
        Ok(self.tape.push(value, op(self.id), self.tape.needs(self.id)))
    }

    fn binary_same_shape(
        &self,
        rhs: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        debug_assert_eq!(self.shape(), rhs.shape());
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let value = Value::from_parts(self.shape().to_vec(), data);
        let needs = self.tape.needs(self.id) || self.tape.needs(rhs.id);
        Ok(self.tape.push(value, op(self.id, rhs.id), needs))
    }

    fn binary_broadcast(
        &self,
        rhs: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.check_same_tape(rhs, op_name)?;
        if self.shape() == rhs.shape() {
            return self.binary_same_shape(rhs, op_name, f, op);
        }
        let target = broadcast_shape(self.shape(), rhs.shape()).ok_or(Error::ShapeMismatch {
            op: op_name,
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })?;
        let a = self.broadcast_to(&target)?;
        let b = rhs.broadcast_to(&target)?;
        a.binary_same_shape(&b, op_name, f, op)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "div", |a, b| a / b, Op::Div)
    }

    /// x * mul + add, elementwise with compile-time constants.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Tensor> {
        self.unary("affine", |x| x * mul + add, |x| Op::Affine { x, mul })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.affine(-1.0, 0.0)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.affine(1.0, s)
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Tensor> {
        self.affine(s, 0.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary("sqrt", f64::sqrt, Op::Sqrt)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary("tanh", f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", kernels::sigmoid, Op::Sigmoid)
    }

    pub fn sin(&self) -> Result<Tensor> {
        self.unary("sin", f64::sin, Op::Sin)
    }

    pub fn cos(&self) -> Result<Tensor> {
        self.unary("cos", f64::cos, Op::Cos)
    }

    /// |x|; subgradient 0 at x == 0.
    pub fn abs(&self) -> Result<Tensor> {
        let sign: Arc<Vec<f64>> = Arc::new(
            self.data()
                .iter()
                .map(|&x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        let data: Vec<f64> = self.data().iter().map(|x| x.abs()).collect();
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "abs" });
        }
        let value = Value::from_parts(self.shape().to_vec(), data);
        let needs = self.tape.needs(self.id);
        Ok(self.tape.push(value, Op::Abs { x: self.id, sign }, needs))
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub fn silu(&self) -> Result<Tensor> {
        self.mul(&self.sigmoid()?)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_tape(rhs, "matmul")?;
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let data = kernels::matmul(self.data(), rhs.data(), m, k, n);
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "matmul" });
        }
        let value = Value::from_parts(vec![m, n], data);
        let needs = self.tape.needs(self.id) || self.tape.needs(rhs.id);
        Ok(self.tape.push(value, Op::Matmul(self.id, rhs.id), needs))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose2",
                shape: s.to_vec(),
                msg: "rank-2 tensor required".into(),
            });
        }
        let data = kernels::transpose(self.data(), s[0], s[1]);
        let value = Value::from_parts(vec![s[1], s[0]], data);
        Ok(self
            .tape
            .push(value, Op::Transpose(self.id), self.tape.needs(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.value.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("incompatible with {:?}", self.shape()),
            });
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let value = Value::from_parts(shape.to_vec(), self.data().to_vec());
        Ok(self
            .tape
            .push(value, Op::Reshape(self.id), self.tape.needs(self.id)))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let data =
            kernels::broadcast_to(self.data(), self.shape(), shape).ok_or(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            })?;
        let value = Value::from_parts(shape.to_vec(), data);
        Ok(self
            .tape
            .push(value, Op::BroadcastTo(self.id), self.tape.needs(self.id)))
    }

    /// Sum-reduce down to a broadcast-compatible smaller shape.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let data =
            kernels::sum_to(self.data(), self.shape(), shape).ok_or(Error::ShapeMismatch {
                op: "sum_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            })?;
        let value = Value::from_parts(shape.to_vec(), data);
        Ok(self
            .tape
            .push(value, Op::SumTo(self.id), self.tape.needs(self.id)))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.value.rank() {
            return Err(Error::InvalidShape {
                op,
                shape: self.shape().to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        Ok(())
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("sum_axis", axis)?;
        let data = kernels::sum_axis(self.data(), self.shape(), axis);
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "sum_axis" });
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let value = Value::from_parts(shape, data);
        Ok(self.tape.push(
            value,
            Op::SumAxis { x: self.id, axis },
            self.tape.needs(self.id),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("mean_axis", axis)?;
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis)?.affine(1.0 / n, 0.0)
    }

    /// Max along `axis`; ties route the gradient to the first index.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("max_axis", axis)?;
        if self.shape()[axis] == 0 {
            return Err(Error::InvalidShape {
                op: "max_axis",
                shape: self.shape().to_vec(),
                msg: "cannot reduce an empty axis".into(),
            });
        }
        let (data, mask) = kernels::max_axis(self.data(), self.shape(), axis);
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "max_axis" });
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let value = Value::from_parts(shape, data);
        Ok(self.tape.push(
            value,
            Op::MaxAxis {
                x: self.id,
                axis,
                mask: Arc::new(mask),
            },
            self.tape.needs(self.id),
        ))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        if self.value.is_scalar() {
            return Ok(self.clone());
        }
        let total: f64 = self.data().iter().sum();
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "sum_all" });
        }
        let value = Value::scalar(total);
        Ok(self
            .tape
            .push(value, Op::SumAll(self.id), self.tape.needs(self.id)))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.value.numel() as f64;
        self.sum_all()?.affine(1.0 / n, 0.0)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: vec![],
                msg: "needs at least one part".into(),
            });
        }
        let tape = parts[0].tape.clone();
        let rank = parts[0].value.rank();
        for p in parts.iter() {
            parts[0].check_same_tape(p, "concat")?;
            if p.value.rank() != rank || axis >= rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for ax in 0..rank {
                if ax != axis && p.shape()[ax] != parts[0].shape()[ax] {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: parts[0].shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
        }
        let blocks: Vec<(&[f64], &[usize])> =
            parts.iter().map(|p| (p.data(), p.shape())).collect();
        let (shape, data) = kernels::concat(&blocks, axis);
        let value = Value::from_parts(shape, data);
        let needs = parts.iter().any(|p| tape.needs(p.id));
        let ids = Arc::new(parts.iter().map(|p| p.id).collect::<Vec<_>>());
        Ok(tape.push(value, Op::Concat { parts: ids, axis }, needs))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis("narrow", axis)?;
        let n = self.shape()[axis];
        if start + len > n {
            return Err(Error::InvalidShape {
                op: "narrow",
                shape: self.shape().to_vec(),
                msg: format!("range {start}..{} exceeds axis size {n}", start + len),
            });
        }
        let data = kernels::narrow(self.data(), self.shape(), axis, start, len);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let value = Value::from_parts(shape, data);
        Ok(self.tape.push(
            value,
            Op::Narrow {
                x: self.id,
                axis,
                start,
                len,
            },
            self.tape.needs(self.id),
        ))
    }

    pub fn pad_zero(&self, axis: usize, before: usize, after: usize) -> Result<Tensor> {
        self.check_axis("pad_zero", axis)?;
        let data = kernels::pad_zero(self.data(), self.shape(), axis, before, after);
        let mut shape = self.shape().to_vec();
        shape[axis] += before + after;
        let value = Value::from_parts(shape, data);
        Ok(self.tape.push(
            value,
            Op::PadZero {
                x: self.id,
                axis,
                before,
            },
            self.tape.needs(self.id),
        ))
    }

    /// Rows of a rank-2 tensor selected by index, duplicates allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: s.to_vec(),
                msg: "rank-2 tensor required".into(),
            });
        }
        for &i in idx {
            if i >= s[0] {
                return Err(Error::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    len: s[0],
                });
            }
        }
        let data = kernels::gather_rows(self.data(), s[0], s[1], idx);
        let value = Value::from_parts(vec![idx.len(), s[1]], data);
        Ok(self.tape.push(
            value,
            Op::GatherRows {
                x: self.id,
                idx: Arc::new(idx.to_vec()),
            },
            self.tape.needs(self.id),
        ))
    }

    /// self + src rows accumulated at idx; duplicates add in source order.
    pub fn scatter_add_rows(&self, idx: &[usize], src: &Tensor) -> Result<Tensor> {
        self.check_same_tape(src, "scatter_add_rows")?;
        let (bs, ss) = (self.shape(), src.shape());
        if bs.len() != 2 || ss.len() != 2 || bs[1] != ss[1] || ss[0] != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: bs.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        for &i in idx {
            if i >= bs[0] {
                return Err(Error::IndexOutOfBounds {
                    op: "scatter_add_rows",
                    index: i,
                    len: bs[0],
                });
            }
        }
        let data = kernels::scatter_add_rows(self.data(), bs[1], idx, src.data());
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                op: "scatter_add_rows",
            });
        }
        let value = Value::from_parts(bs.to_vec(), data);
        let needs = self.tape.needs(self.id) || self.tape.needs(src.id);
        Ok(self.tape.push(
            value,
            Op::ScatterAddRows {
                base: self.id,
                src: src.id,
                idx: Arc::new(idx.to_vec()),
            },
            needs,
        ))
    }

    /// Per-segment row sum: [n, d] rows binned by seg into [nseg, d].
    pub fn segment_sum(&self, seg: &[usize], nseg: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || seg.len() != s[0] {
            return Err(Error::InvalidShape {
                op: "segment_sum",
                shape: s.to_vec(),
                msg: format!("rank-2 with {} segment ids required", seg.len()),
            });
        }
        let zeros = self.tape.constant(Value::zeros(&[nseg, s[1]]));
        zeros.scatter_add_rows(seg, self)
    }

    /// Per-segment column-wise max; every segment must be non-empty.
    pub fn segment_max(&self, seg: &[usize], nseg: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || seg.len() != s[0] {
            return Err(Error::InvalidShape {
                op: "segment_max",
                shape: s.to_vec(),
                msg: format!("rank-2 with {} segment ids required", seg.len()),
            });
        }
        let mut seen = vec![false; nseg];
        for &g in seg {
            if g >= nseg {
                return Err(Error::IndexOutOfBounds {
                    op: "segment_max",
                    index: g,
                    len: nseg,
                });
            }
            seen[g] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidShape {
                op: "segment_max",
                shape: s.to_vec(),
                msg: format!("segment {empty} is empty"),
            });
        }
        let (data, mask) = kernels::segment_max(self.data(), s[1], seg, nseg);
        let value = Value::from_parts(vec![nseg, s[1]], data);
        Ok(self.tape.push(
            value,
            Op::SegmentMax {
                x: self.id,
                seg: Arc::new(seg.to_vec()),
                mask: Arc::new(mask),
            },
            self.tape.needs(self.id),
        ))
    }

    /// Euclidean norm of each row of a rank-2 tensor.
    pub fn norm_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "norm_rows",
                shape: s.to_vec(),
                msg: "rank-2 tensor required".into(),
            });
        }
        let data = kernels::norm_rows(self.data(), s[0], s[1]);
        let value = Value::from_parts(vec![s[0]], data);
        Ok(self
            .tape
            .push(value, Op::NormRows(self.id), self.tape.needs(self.id)))
    }

    /// Reverse sweep from a scalar root; returns adjoints for every node.
    pub fn backward(&self) -> Result<Gradients> {
        if !self.value.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.shape().to_vec(),
            });
        }
        let adjoints = vjp_walk(&self.tape, self.id)?;
        Ok(Gradients {
            tape: self.tape.clone(),
            adjoints,
        })
    }

    /// Adjoint of `wrt` as a live tape node, differentiable again.
    /// Roots independent of `wrt` yield a zero tensor, not an error.
    pub fn grad_as_graph(&self, wrt: &Tensor) -> Result<Tensor> {
        self.check_same_tape(wrt, "grad_as_graph")?;
        if !self.value.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.shape().to_vec(),
            });
        }
        let mut adjoints = vjp_walk(&self.tape, self.id)?;
        Ok(match adjoints.get_mut(wrt.id).and_then(Option::take) {
            Some(t) => t,
            None => self.tape.constant(Value::zeros(wrt.shape())),
        })
    }
}

/// Adjoints from one backward sweep, indexed by tape node.
pub struct Gradients {
    tape: Tape,
    adjoints: Vec<Option<Tensor>>,
}

impl std::fmt::Debug for Gradients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let touched = self.adjoints.iter().filter(|a| a.is_some()).count();
        write!(f, "Gradients({touched} touched nodes)")
    }
}

impl Gradients {
    /// Gradient of the root with respect to `t`; zero if independent.
    pub fn get(&self, t: &Tensor) -> Result<Value> {
        if !self.tape.same(&t.tape) {
            return Err(Error::TapeMismatch { op: "Gradients::get" });
        }
        Ok(match self.adjoints.get(t.id).and_then(|o| o.as_ref()) {
            Some(adj) => adj.value().clone(),
            None => Value::zeros(t.shape()),
        })
    }
}

fn vjp_walk(tape: &Tape, root: usize) -> Result<Vec<Option<Tensor>>> {
    let mut adjoints: Vec<Option<Tensor>> = Vec::new();
    adjoints.resize_with(root + 1, || None);
    adjoints[root] = Some(tape.scalar_const(1.0));
    for id in (0..=root).rev() {
        if adjoints[id].is_none() || !tape.needs(id) {
            continue;
        }
        let g = adjoints[id].clone().expect("checked above");
        let op = tape.op_of(id);
        let contribs = op_vjp(tape, id, &op, &g)?;
        for (pid, c) in contribs {
            if !tape.needs(pid) {
                continue;
            }
            adjoints[pid] = Some(match adjoints[pid].take() {
                None => c,
                Some(prev) => prev.add(&c)?,
            });
        }
    }
    Ok(adjoints)
}

fn op_vjp(tape: &Tape, id: usize, op: &Op, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let out = tape.handle(id);
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.neg()?)],
        Op::Mul(a, b) => {
            let (ta, tb) = (tape.handle(*a), tape.handle(*b));
            vec![(*a, g.mul(&tb)?), (*b, g.mul(&ta)?)]
        }
        Op::Div(a, b) => {
            let (ta, tb) = (tape.handle(*a), tape.handle(*b));
            let ga = g.div(&tb)?;
            let gb = ga.mul(&ta.div(&tb)?)?.neg()?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Affine { x, mul } => vec![(*x, g.affine(*mul, 0.0)?)],
        Op::Exp(x) => vec![(*x, g.mul(&out)?)],
        Op::Sqrt(x) => vec![(*x, g.div(&out)?.affine(0.5, 0.0)?)],
        Op::Tanh(x) => vec![(*x, out.mul(&out)?.affine(-1.0, 1.0)?.mul(g)?)],
        Op::Sigmoid(x) => vec![(*x, out.affine(-1.0, 1.0)?.mul(&out)?.mul(g)?)],
        Op::Sin(x) => {
            let tx = tape.handle(*x);
            vec![(*x, g.mul(&tx.cos()?)?)]
        }
        Op::Cos(x) => {
            let tx = tape.handle(*x);
            vec![(*x, g.mul(&tx.sin()?)?.neg()?)]
        }
        Op::Abs { x, sign } => {
            let tx = tape.handle(*x);
            let sign_t = tape.constant(Value::from_parts(tx.shape().to_vec(), sign.to_vec()));
            vec![(*x, g.mul(&sign_t)?)]
        }
        Op::Matmul(a, b) => {
            let (ta, tb) = (tape.handle(*a), tape.handle(*b));
            let ga = g.matmul(&tb.transpose2()?)?;
            let gb = ta.transpose2()?.matmul(g)?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose(x) => vec![(*x, g.transpose2()?)],
        Op::Reshape(x) => {
            let tx = tape.handle(*x);
            vec![(*x, g.reshape(tx.shape())?)]
        }
        Op::BroadcastTo(x) => {
            let tx = tape.handle(*x);
            vec![(*x, g.sum_to(tx.shape())?)]
        }
        Op::SumTo(x) => {
            let tx = tape.handle(*x);
            vec![(*x, g.broadcast_to(tx.shape())?)]
        }
        Op::SumAxis { x, axis } => {
            let tx = tape.handle(*x);
            let expanded = g.reshape(&shape_with_one_at(g.shape(), *axis))?;
            vec![(*x, expanded.broadcast_to(tx.shape())?)]
        }
        Op::MaxAxis { x, axis, mask } => {
            let tx = tape.handle(*x);
            let mask_t = tape.constant(Value::from_parts(tx.shape().to_vec(), mask.to_vec()));
            let expanded = g
                .reshape(&shape_with_one_at(g.shape(), *axis))?
                .broadcast_to(tx.shape())?;
            vec![(*x, expanded.mul(&mask_t)?)]
        }
        Op::SumAll(x) => {
            let tx = tape.handle(*x);
            vec![(*x, g.broadcast_to(tx.shape())?)]
        }
        Op::Concat { parts, axis } => {
            let mut out_v = Vec::with_capacity(parts.len());
            let mut offset = 0usize;
            for &pid in parts.iter() {
                let len = tape.handle(pid).shape()[*axis];
                out_v.push((pid, g.narrow(*axis, offset, len)?));
                offset += len;
            }
            out_v
        }
        Op::Narrow { x, axis, start, len } => {
            let tx = tape.handle(*x);
            let n = tx.shape()[*axis];
            vec![(*x, g.pad_zero(*axis, *start, n - start - len)?)]
        }
        Op::PadZero { x, axis, before } => {
            let tx = tape.handle(*x);
            let n = tx.shape()[*axis];
            vec![(*x, g.narrow(*axis, *before, n)?)]
        }
        Op::GatherRows { x, idx } => {
            let tx = tape.handle(*x);
            let zeros = tape.constant(Value::zeros(tx.shape()));
            vec![(*x, zeros.scatter_add_rows(idx, g)?)]
        }
        Op::ScatterAddRows { base, src, idx } => {
            vec![(*base, g.clone()), (*src, g.gather_rows(idx)?)]
        }
        Op::SegmentMax { x, seg, mask } => {
            let tx = tape.handle(*x);
            let mask_t = tape.constant(Value::from_parts(tx.shape().to_vec(), mask.to_vec()));
            vec![(*x, g.gather_rows(seg)?.mul(&mask_t)?)]
        }
        Op::NormRows(x) => {
            let tx = tape.handle(*x);
            let n = tx.shape()[0];
            // Zero-norm rows take the zero subgradient; the division is
            // masked there instead of producing 0/0. Nonzero rows are
            // untouched: g*1/(y+0) is bit-identical to g/y.
            let mut mask = vec![1.0; n];
            let mut bump = vec![0.0; n];
            for (r, &y) in out.data().iter().enumerate() {
                if y == 0.0 {
                    mask[r] = 0.0;
                    bump[r] = 1.0;
                }
            }
            let mask = tape.constant(Value::vector(mask));
            let bump = tape.constant(Value::vector(bump));
            let scale = g.mul(&mask)?.div(&out.add(&bump)?)?.reshape(&[n, 1])?;
            vec![(*x, tx.mul(&scale)?)]
        }
    })
}
