//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive op applied to its [`Var`] handles. The
//! backward pass is itself written in terms of tape ops, so with
//! `create_graph = true` the produced gradients are ordinary differentiable
//! nodes and can be differentiated again (needed for second-order MAML).
//!
//! Every op checks its output for NaN/Inf and fails with the op name and the
//! operand shapes instead of letting non-finite values propagate.

mod backward;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{numel, Padding, Tensor};

pub use backward::Gradients;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    BroadcastTo(usize),
    SumTo(usize),
    SumAxis(usize, usize),
    ExpandAxis(usize, usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Select(usize, Rc<[usize]>),
    Scatter(usize, Rc<[usize]>),
    Concat(Vec<usize>, usize),
    Slice { x: usize, axis: usize, start: usize },
    Pad { x: usize, axis: usize, before: usize },
    Conv { x: usize, k: usize, geom: ConvGeom },
    ConvInputGrad { g: usize, k: usize, geom: ConvGeom },
    ConvKernelGrad { x: usize, g: usize, geom: ConvGeom },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Tanh(a) | Sigmoid(a) | Relu(a) | Transpose(a)
            | Reshape(a) | BroadcastTo(a) | SumTo(a) | SumAxis(a, _) | ExpandAxis(a, _)
            | Softmax(a, _) | LogSoftmax(a, _) | Select(a, _) | Scatter(a, _) => vec![*a],
            Concat(parts, _) => parts.clone(),
            Slice { x, .. } | Pad { x, .. } => vec![*x],
            Conv { x, k, .. } => vec![*x, *k],
            ConvInputGrad { g, k, .. } => vec![*g, *k],
            ConvKernelGrad { x, g, .. } => vec![*x, *g],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Single-threaded operation recorder. Dropping the tape frees every node.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.insert(Rc::new(value), Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.insert(value, Op::Leaf, false)
    }

    /// Runs `f` with recording disabled; every op inside yields a constant.
    pub fn no_grad<T>(&self, f: impl FnOnce() -> T) -> T {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    fn insert(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
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

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn op(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        let inputs = op.inputs();
        if !value.is_finite() {
            let shapes = inputs
                .iter()
                .map(|&i| self.value(i).shape().to_vec())
                .collect();
            return Err(Error::NonFinite { op: name, shapes });
        }
        let requires_grad =
            self.recording.get() && inputs.iter().any(|&i| self.requires_grad(i));
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.insert(Rc::new(value), op, requires_grad))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?
            .value();
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} for rank {rank}")));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for v in &values {
            let ok = v.rank() == rank
                && (0..rank).all(|d| d == axis || v.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", v.shape(), first.shape()),
                ));
            }
            total += v.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat(ids, axis))
    }

    /// Reverse pass from a scalar `loss`. See [`Gradients`].
    pub fn backward<'t>(&'t self, loss: Var<'t>, create_graph: bool) -> Result<Gradients<'t>> {
        backward::run(self, loss, create_graph)
    }

    /// Gradients of `loss` with respect to each of `wrt`, zero where unreachable.
    pub fn grad<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        let grads = self.backward(loss, create_graph)?;
        Ok(wrt.iter().map(|&v| grads.wrt(v)).collect())
    }
}

/// Handle to a node on a [`Tape`].
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

fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    })
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_rc(self.value())
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f32) -> f32,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.push(name, v, op(self.id))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = binary_shape(name, &a, &b)?;
        let data = kernels::zip_broadcast(a.data(), b.data(), numel(&shape), f);
        self.tape
            .push(name, Tensor::from_parts(shape, data), op(self.id, other.id))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, c: f32) -> Result<Var<'t>> {
        self.unary("scale", |v| v * c, |a| Op::Scale(a, c))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f32) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + c, Op::AddScalar)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", f32::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        self.tape.push(
            "matmul",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(self.id, other.id),
        )
    }

    /// Matrix transpose of a rank-2 value.
    pub fn t(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank {}", a.rank())));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let data = kernels::transpose(a.data(), r, c);
        self.tape
            .push("transpose", Tensor::from_parts(vec![c, r], data), Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(*self);
        }
        let v = a.reshape(shape)?;
        self.tape.push("reshape", v, Op::Reshape(self.id))
    }

    /// Broadcasts to `shape` (scalar or trailing-suffix source only).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(*self);
        }
        if a.numel() == numel(shape) {
            return self.reshape(shape);
        }
        if kernels::broadcast_shape(a.shape(), shape).as_deref() != Some(shape) {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} -> {shape:?}", a.shape()),
            ));
        }
        let data = kernels::broadcast_to(a.data(), numel(shape));
        self.tape.push(
            "broadcast_to",
            Tensor::from_parts(shape.to_vec(), data),
            Op::BroadcastTo(self.id),
        )
    }

    /// Sums leading repeats away so the result has `shape`; adjoint of [`Var::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(*self);
        }
        if a.numel() == numel(shape) {
            return self.reshape(shape);
        }
        if kernels::broadcast_shape(a.shape(), shape).as_deref() != Some(a.shape()) {
            return Err(Error::shape("sum_to", format!("{:?} -> {shape:?}", a.shape())));
        }
        let data = kernels::sum_to(a.data(), numel(shape));
        self.tape
            .push("sum_to", Tensor::from_parts(shape.to_vec(), data), Op::SumTo(self.id))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f32)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Rc<Tensor>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::shape(op, format!("axis {axis} for shape {:?}", a.shape())));
        }
        Ok(a)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.check_axis("sum_axis", axis)?;
        let data = kernels::sum_axis(a.data(), a.shape(), axis);
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        self.tape
            .push("sum_axis", Tensor::from_parts(shape, data), Op::SumAxis(self.id, axis))
    }

    /// Inserts a new axis of extent `n` at `axis`, repeating the value along it.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis > a.rank() || n == 0 {
            return Err(Error::shape(
                "expand_axis",
                format!("axis {axis} extent {n} for shape {:?}", a.shape()),
            ));
        }
        let outer = a.shape()[..axis].iter().product();
        let inner = a.shape()[axis..].iter().product();
        let data = kernels::expand_axis(a.data(), outer, n, inner);
        let mut shape = a.shape().to_vec();
        shape.insert(axis, n);
        self.tape.push(
            "expand_axis",
            Tensor::from_parts(shape, data),
            Op::ExpandAxis(self.id, axis),
        )
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.check_axis("softmax", axis)?;
        let data = kernels::softmax_axis(a.data(), a.shape(), axis, false);
        self.tape.push(
            "softmax",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Softmax(self.id, axis),
        )
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.check_axis("log_softmax", axis)?;
        let data = kernels::softmax_axis(a.data(), a.shape(), axis, true);
        self.tape.push(
            "log_softmax",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::LogSoftmax(self.id, axis),
        )
    }

    /// Gathers flat elements: `out.flat[i] = self.flat[indices[i]]`.
    pub fn select(&self, indices: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if numel(shape) != indices.len() {
            return Err(Error::shape(
                "select",
                format!("{} indices for shape {shape:?}", indices.len()),
            ));
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            let v = *a.data().get(i).ok_or(Error::Index {
                op: "select",
                index: i,
                extent: a.numel(),
            })?;
            data.push(v);
        }
        self.tape.push(
            "select",
            Tensor::from_parts(shape.to_vec(), data),
            Op::Select(self.id, indices.into()),
        )
    }

    /// Adjoint of [`Var::select`]: accumulates into a zero tensor of `shape`.
    pub fn scatter(&self, indices: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let n = numel(shape);
        if a.numel() != indices.len() {
            return Err(Error::shape(
                "scatter",
                format!("{} values for {} indices", a.numel(), indices.len()),
            ));
        }
        let mut acc = vec![0f64; n];
        for (&i, &v) in indices.iter().zip(a.data()) {
            if i >= n {
                return Err(Error::Index {
                    op: "scatter",
                    index: i,
                    extent: n,
                });
            }
            acc[i] += v as f64;
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        self.tape.push(
            "scatter",
            Tensor::from_parts(shape.to_vec(), data),
            Op::Scatter(self.id, indices.into()),
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.check_axis("slice", axis)?;
        if len == 0 || start + len > a.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape()),
            ));
        }
        let data = kernels::slice_axis(a.data(), a.shape(), axis, start, len);
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.tape.push(
            "slice",
            Tensor::from_parts(shape, data),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        )
    }

    /// Zero-pads along `axis` to extent `total`, placing the input at offset `before`.
    pub fn pad(&self, axis: usize, before: usize, total: usize) -> Result<Var<'t>> {
        let a = self.check_axis("pad", axis)?;
        if before + a.shape()[axis] > total {
            return Err(Error::shape(
                "pad",
                format!("offset {before} + {} > {total}", a.shape()[axis]),
            ));
        }
        let data = kernels::pad_axis(a.data(), a.shape(), axis, before, total);
        let mut shape = a.shape().to_vec();
        shape[axis] = total;
        self.tape.push(
            "pad",
            Tensor::from_parts(shape, data),
            Op::Pad {
                x: self.id,
                axis,
                before,
            },
        )
    }

    fn conv_geom(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
        if x.rank() != 3 || k.rank() != 4 || k.shape()[1] != x.shape()[0] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} kernels {:?}", x.shape(), k.shape()),
            ));
        }
        let geom = ConvGeom {
            c_in: x.shape()[0],
            c_out: k.shape()[0],
            h: x.shape()[1],
            w: x.shape()[2],
            kh: k.shape()[2],
            kw: k.shape()[3],
            stride,
            pad,
        };
        if geom.out_hw().is_none() {
            return Err(Error::shape(
                "conv2d",
                format!("degenerate output for input {:?} kernels {:?}", x.shape(), k.shape()),
            ));
        }
        Ok(geom)
    }

    /// 2-D cross-correlation of `self[c_in,H,W]` with `kernels[c_out,c_in,kh,kw]`.
    pub fn conv2d(&self, kernels: &Var<'t>, stride: usize, padding: Padding) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernels.value());
        let pad = if k.rank() == 4 { padding.amount(k.shape()[2]) } else { 0 };
        let geom = Self::conv_geom(&x, &k, stride, pad)?;
        self.conv_with(kernels, geom)
    }

    pub(crate) fn conv_with(&self, kernels: &Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernels.value());
        let (ho, wo) = geom.out_hw().expect("checked");
        let data = kernels::conv2d(x.data(), k.data(), &geom);
        self.tape.push(
            "conv2d",
            Tensor::from_parts(vec![geom.c_out, ho, wo], data),
            Op::Conv {
                x: self.id,
                k: kernels.id,
                geom,
            },
        )
    }

    pub(crate) fn conv_input_grad(&self, kernels: &Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let (g, k) = (self.value(), kernels.value());
        let data = kernels::conv2d_input_grad(g.data(), k.data(), &geom);
        self.tape.push(
            "conv2d_input_grad",
            Tensor::from_parts(vec![geom.c_in, geom.h, geom.w], data),
            Op::ConvInputGrad {
                g: self.id,
                k: kernels.id,
                geom,
            },
        )
    }

    pub(crate) fn conv_kernel_grad(&self, gout: &Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let (x, g) = (self.value(), gout.value());
        let data = kernels::conv2d_kernel_grad(x.data(), g.data(), &geom);
        self.tape.push(
            "conv2d_kernel_grad",
            Tensor::from_parts(vec![geom.c_out, geom.c_in, geom.kh, geom.kw], data),
            Op::ConvKernelGrad {
                x: self.id,
                g: gout.id,
                geom,
            },
        )
    }

    /// 2x2 max pooling with stride 2 over `self[c,H,W]`.
    pub fn max_pool2x2(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 || x.shape()[1] < 2 || x.shape()[2] < 2 {
            return Err(Error::shape("max_pool2x2", format!("input {:?}", x.shape())));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let idx = kernels::max_pool2x2_indices(x.data(), c, h, w);
        self.select(&idx, &[c, h / 2, w / 2])
    }

    /// Row `index` of a rank-2 table.
    pub fn embed_lookup(&self, index: usize) -> Result<Var<'t>> {
        self.embed_rows(&[index])?.reshape(&[self.shape()[1]])
    }

    /// Rows of a rank-2 table, stacked into `[indices.len(), d]`.
    pub fn embed_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("embed_lookup", format!("table shape {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        let mut flat = Vec::with_capacity(indices.len() * d);
        for &r in indices {
            if r >= rows {
                return Err(Error::Index {
                    op: "embed_lookup",
                    index: r,
                    extent: rows,
                });
            }
            flat.extend(r * d..(r + 1) * d);
        }
        self.select(&flat, &[indices.len(), d])
    }

    /// `-log softmax(self)[target]` for a logit vector.
    pub fn cross_entropy(&self, target: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(Error::shape("cross_entropy", format!("logits {shape:?}")));
        }
        if target >= shape[0] {
            return Err(Error::Index {
                op: "cross_entropy",
                index: target,
                extent: shape[0],
            });
        }
        self.log_softmax(0)?.select(&[target], &[])?.neg()
    }
}
