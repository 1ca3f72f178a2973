//! Layer helpers shared by the encoders and the decoder.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init_weight, Bound, Params};
use crate::tensor::Tensor;

/// `x · Wᵀ + b` for `x[B, in]`, `W[out, in]`, `b[out]`.
pub fn linear<'t>(x: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    x.matmul(&w.t()?)?.add(b)
}

pub fn linear_named<'t>(x: &Var<'t>, p: &Bound<'t>, prefix: &str) -> Result<Var<'t>> {
    linear(x, &p.get(&format!("{prefix}.w"))?, &p.get(&format!("{prefix}.b"))?)
}

pub fn init_linear<R: Rng + ?Sized>(
    params: &mut Params,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) {
    params.insert(format!("{prefix}.w"), init_weight(&[d_out, d_in], d_in, rng));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]));
}

/// LSTM weights: `w_ih[4H, in]`, `w_hh[4H, H]`, `b[4H]`, gate order (i, f, g, o).
pub fn init_lstm<R: Rng + ?Sized>(
    params: &mut Params,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    rng: &mut R,
) {
    params.insert(
        format!("{prefix}.w_ih"),
        init_weight(&[4 * hidden, d_in], hidden, rng),
    );
    params.insert(
        format!("{prefix}.w_hh"),
        init_weight(&[4 * hidden, hidden], hidden, rng),
    );
    let mut b = Tensor::zeros(&[4 * hidden]);
    // forget-gate bias starts at 1
    b.data_mut()[hidden..2 * hidden].fill(1.0);
    params.insert(format!("{prefix}.b"), b);
}

/// Recurrent state `(h, c)`, each `[B, H]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl<'t> LstmState<'t> {
    pub fn zeros(tape: &'t Tape, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, hidden])),
            c: tape.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

/// One standard LSTM cell update on input `x[B, in]`.
pub fn lstm_step<'t>(
    x: &Var<'t>,
    state: &LstmState<'t>,
    p: &Bound<'t>,
    prefix: &str,
) -> Result<LstmState<'t>> {
    let w_ih = p.get(&format!("{prefix}.w_ih"))?;
    let w_hh = p.get(&format!("{prefix}.w_hh"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let hidden = state.h.shape()[1];
    if w_ih.shape()[0] != 4 * hidden || w_ih.shape()[1] != x.shape()[1] {
        return Err(Error::shape(
            "lstm_step",
            format!(
                "w_ih {:?} for input {:?} and hidden {hidden}",
                w_ih.shape(),
                x.shape()
            ),
        ));
    }
    let gates = x
        .matmul(&w_ih.t()?)?
        .add(&state.h.matmul(&w_hh.t()?)?)?
        .add(&b)?;
    let i = gates.slice(1, 0, hidden)?.sigmoid()?;
    let f = gates.slice(1, hidden, hidden)?.sigmoid()?;
    let g = gates.slice(1, 2 * hidden, hidden)?.tanh()?;
    let o = gates.slice(1, 3 * hidden, hidden)?.sigmoid()?;
    let c = f.mul(&state.c)?.add(&i.mul(&g)?)?;
    let h = o.mul(&c.tanh()?)?;
    Ok(LstmState { h, c })
}
