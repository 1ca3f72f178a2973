use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of a reverse pass: one optional gradient node per tape node.
pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<usize>>,
}

impl<'t> Gradients<'t> {
    pub fn get(&self, v: Var<'t>) -> Option<Var<'t>> {
        self.grads
            .get(v.id)
            .copied()
            .flatten()
            .map(|id| Var { tape: self.tape, id })
    }

    /// Gradient for `v`, or a zero constant when `loss` does not depend on it.
    pub fn wrt(&self, v: Var<'t>) -> Var<'t> {
        self.get(v)
            .unwrap_or_else(|| self.tape.constant(Tensor::zeros(v.value().shape())))
    }
}

struct RecordingGuard<'a> {
    tape: &'a Tape,
    prev: bool,
}

impl Drop for RecordingGuard<'_> {
    fn drop(&mut self) {
        self.tape.recording.set(self.prev);
    }
}

pub(super) fn run<'t>(tape: &'t Tape, loss: Var<'t>, create_graph: bool) -> Result<Gradients<'t>> {
    let lv = loss.value();
    if lv.numel() != 1 {
        return Err(Error::NonScalarLoss(lv.shape().to_vec()));
    }
    if !loss.requires_grad() {
        return Err(Error::DetachedGraph);
    }
    let _guard = RecordingGuard {
        tape,
        prev: tape.recording.replace(create_graph),
    };

    let mut grads: Vec<Option<usize>> = vec![None; loss.id + 1];
    grads[loss.id] = Some(tape.constant(Tensor::ones(lv.shape())).id);

    for id in (0..=loss.id).rev() {
        let Some(g) = grads[id] else { continue };
        if !tape.requires_grad(id) {
            continue;
        }
        let g = Var { tape, id: g };
        for (input, gi) in vjp(tape, id, g)? {
            if !tape.requires_grad(input) {
                continue;
            }
            grads[input] = Some(match grads[input] {
                Some(prev) => Var { tape, id: prev }.add(&gi)?.id,
                None => gi.id,
            });
        }
    }
    Ok(Gradients { tape, grads })
}

/// Vector-Jacobian products of node `id` for upstream gradient `g`, built from tape ops.
fn vjp<'t>(tape: &'t Tape, id: usize, g: Var<'t>) -> Result<Vec<(usize, Var<'t>)>> {
    let var = |i: usize| Var { tape, id: i };
    let shape_of = |i: usize| tape.value(i).shape().to_vec();
    let out = var(id);
    Ok(match tape.op(id) {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(a, g.sum_to(&shape_of(a))?), (b, g.sum_to(&shape_of(b))?)],
        Op::Sub(a, b) => vec![
            (a, g.sum_to(&shape_of(a))?),
            (b, g.neg()?.sum_to(&shape_of(b))?),
        ],
        Op::Mul(a, b) => vec![
            (a, g.mul(&var(b))?.sum_to(&shape_of(a))?),
            (b, g.mul(&var(a))?.sum_to(&shape_of(b))?),
        ],
        Op::Scale(a, c) => vec![(a, g.scale(c)?)],
        Op::AddScalar(a) => vec![(a, g)],
        Op::Tanh(a) => {
            let slope = out.mul(&out)?.neg()?.add_scalar(1.0)?;
            vec![(a, g.mul(&slope)?)]
        }
        Op::Sigmoid(a) => {
            let slope = out.mul(&out.neg()?.add_scalar(1.0)?)?;
            vec![(a, g.mul(&slope)?)]
        }
        Op::Relu(a) => {
            let mask = tape.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            vec![(a, g.mul(&tape.constant(mask))?)]
        }
        Op::MatMul(a, b) => vec![
            (a, g.matmul(&var(b).t()?)?),
            (b, var(a).t()?.matmul(&g)?),
        ],
        Op::Transpose(a) => vec![(a, g.t()?)],
        Op::Reshape(a) => vec![(a, g.reshape(&shape_of(a))?)],
        Op::BroadcastTo(a) => vec![(a, g.sum_to(&shape_of(a))?)],
        Op::SumTo(a) => vec![(a, g.broadcast_to(&shape_of(a))?)],
        Op::SumAxis(a, axis) => vec![(a, g.expand_axis(axis, shape_of(a)[axis])?)],
        Op::ExpandAxis(a, axis) => vec![(a, g.sum_axis(axis)?)],
        Op::Softmax(a, axis) => {
            let n = shape_of(a)[axis];
            let dot = g.mul(&out)?.sum_axis(axis)?.expand_axis(axis, n)?;
            vec![(a, out.mul(&g.sub(&dot)?)?)]
        }
        Op::LogSoftmax(a, axis) => {
            let n = shape_of(a)[axis];
            let p = var(a).softmax(axis)?;
            let total = g.sum_axis(axis)?.expand_axis(axis, n)?;
            vec![(a, g.sub(&p.mul(&total)?)?)]
        }
        Op::Select(a, idx) => vec![(a, g.scatter(&idx, &shape_of(a))?)],
        Op::Scatter(a, idx) => vec![(a, g.select(&idx, &shape_of(a))?)],
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            let mut out = Vec::with_capacity(parts.len());
            for p in parts {
                let len = shape_of(p)[axis];
                out.push((p, g.slice(axis, offset, len)?));
                offset += len;
            }
            out
        }
        Op::Slice { x, axis, start } => vec![(x, g.pad(axis, start, shape_of(x)[axis])?)],
        Op::Pad { x, axis, before } => vec![(x, g.slice(axis, before, shape_of(x)[axis])?)],
        Op::Conv { x, k, geom } => vec![
            (x, g.conv_input_grad(&var(k), geom)?),
            (k, var(x).conv_kernel_grad(&g, geom)?),
        ],
        Op::ConvInputGrad { g: g0, k, geom } => vec![
            (g0, g.conv_with(&var(k), geom)?),
            (k, g.conv_kernel_grad(&var(g0), geom)?),
        ],
        Op::ConvKernelGrad { x, g: g0, geom } => vec![
            (x, var(g0).conv_input_grad(&g, geom)?),
            (g0, var(x).conv_with(&g, geom)?),
        ],
    })
}
