//! Attention LSTM question decoder.
//!
//! At step `t` the previous hidden state scores every spatial location of the
//! conditioned map `G`:
//!
//! ```text
//! A(x,y) = θ_hᵀ tanh(W_h h_{t-1} + U G(x,y) + b_h) + b
//! α      = softmax over all (x,y) of A
//! φ      = Σ α(x,y) G(x,y)
//! ```
//!
//! The LSTM consumes `[φ, E(z_{t-1})]` (plus the side embedding when features
//! are not scale-shifted) and the next-word logits are
//! `Θ_p tanh(W_p [h_t, φ, E(z_{t-1})] + b_p) + d`, where `Θ_p` holds one row
//! per vocabulary word.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, LstmState};
use crate::params::{init_weight, Bound, Params};
use crate::tensor::Tensor;
use crate::text::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    pub vocab: usize,
    pub channels: usize,
    pub d_h: usize,
    pub d_att: usize,
    pub d_p: usize,
    pub d_w: usize,
    /// Side-embedding width routed into the LSTM and output head; 0 when unused.
    pub d_side: usize,
}

impl DecoderDims {
    pub fn lstm_input(&self) -> usize {
        self.channels + self.d_w + self.d_side
    }

    pub fn head_input(&self) -> usize {
        self.d_h + self.channels + self.d_w + self.d_side
    }
}

pub fn init_decoder<R: Rng + ?Sized>(params: &mut Params, d: &DecoderDims, rng: &mut R) {
    params.insert("embed.words", init_weight(&[d.vocab, d.d_w], 1, rng));
    params.insert("att.theta", init_weight(&[d.d_att], d.d_att, rng));
    params.insert("att.w_h", init_weight(&[d.d_att, d.d_h], d.d_h, rng));
    params.insert("att.u", init_weight(&[d.d_att, d.channels], d.channels, rng));
    params.insert("att.b_h", Tensor::zeros(&[d.d_att]));
    params.insert("att.b", Tensor::scalar(0.0));
    nn::init_lstm(params, "dec.lstm", d.lstm_input(), d.d_h, rng);
    params.insert("out.theta", init_weight(&[d.vocab, d.d_p], d.d_p, rng));
    params.insert("out.w_p", init_weight(&[d.d_p, d.head_input()], d.head_input(), rng));
    params.insert("out.b_p", Tensor::zeros(&[d.d_p]));
    params.insert("out.d", Tensor::zeros(&[d.vocab]));
}

/// `G[B, hw, c]` with its step-independent projection `U·G[B, hw, d_att]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionKeys<'t> {
    pub g: Var<'t>,
    ug: Var<'t>,
}

pub fn attention_keys<'t>(g: &Var<'t>, p: &Bound<'t>) -> Result<AttentionKeys<'t>> {
    let s = g.shape();
    let u = p.get("att.u")?;
    if s.len() != 3 || u.shape()[1] != s[2] {
        return Err(Error::shape(
            "attention",
            format!("features {s:?} with U {:?}", u.shape()),
        ));
    }
    let (b, hw, c) = (s[0], s[1], s[2]);
    let d_att = u.shape()[0];
    let ug = g
        .reshape(&[b * hw, c])?
        .matmul(&u.t()?)?
        .reshape(&[b, hw, d_att])?;
    Ok(AttentionKeys { g: *g, ug })
}

/// Spatial attention weights `alpha[B, hw]`; each row is a distribution.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap<'t> {
    pub alpha: Var<'t>,
}

/// Attention weights and context vector `φ[B, c]` for hidden state `h_prev[B, d_h]`.
pub fn attention<'t>(
    keys: &AttentionKeys<'t>,
    h_prev: &Var<'t>,
    p: &Bound<'t>,
) -> Result<(AttentionMap<'t>, Var<'t>)> {
    let s = keys.ug.shape();
    let (b, hw, d_att) = (s[0], s[1], s[2]);
    let c = keys.g.shape()[2];
    let query = nn::linear(h_prev, &p.get("att.w_h")?, &p.get("att.b_h")?)?;
    let hidden = keys.ug.add(&query.expand_axis(1, hw)?)?.tanh()?;
    let theta = p.get("att.theta")?.reshape(&[d_att, 1])?;
    let scores = hidden
        .reshape(&[b * hw, d_att])?
        .matmul(&theta)?
        .reshape(&[b, hw])?
        .add(&p.get("att.b")?)?;
    let alpha = scores.softmax(1)?;
    let context = alpha.expand_axis(2, c)?.mul(&keys.g)?.sum_axis(1)?;
    Ok((AttentionMap { alpha }, context))
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState<'t> {
    pub lstm: LstmState<'t>,
    pub t: usize,
}

impl<'t> DecoderState<'t> {
    pub fn initial(tape: &'t Tape, batch: usize, d_h: usize) -> Self {
        DecoderState {
            lstm: LstmState::zeros(tape, batch, d_h),
            t: 0,
        }
    }
}

fn decoder_input<'t>(
    context: &Var<'t>,
    prev_emb: &Var<'t>,
    side: Option<&Var<'t>>,
) -> Result<Var<'t>> {
    let mut parts = vec![*context, *prev_emb];
    parts.extend(side.copied());
    context.tape().concat(&parts, 1)
}

/// One LSTM update on `[φ, E(z_{t-1}) (, side)]`.
pub fn step<'t>(
    state: &DecoderState<'t>,
    context: &Var<'t>,
    prev_emb: &Var<'t>,
    side: Option<&Var<'t>>,
    p: &Bound<'t>,
    max_len: usize,
) -> Result<DecoderState<'t>> {
    if state.t >= max_len {
        return Err(Error::Data(format!(
            "decoder step {} exceeds max_len {max_len}",
            state.t
        )));
    }
    let x = decoder_input(context, prev_emb, side)?;
    Ok(DecoderState {
        lstm: nn::lstm_step(&x, &state.lstm, p, "dec.lstm")?,
        t: state.t + 1,
    })
}

/// Pre-softmax next-word scores `[B, V]`.
pub fn word_logits<'t>(
    h: &Var<'t>,
    context: &Var<'t>,
    prev_emb: &Var<'t>,
    side: Option<&Var<'t>>,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let mut parts = vec![*h, *context, *prev_emb];
    parts.extend(side.copied());
    let x = h.tape().concat(&parts, 1)?;
    let w_p = p.get("out.w_p")?;
    if w_p.shape()[1] != x.shape()[1] {
        return Err(Error::shape(
            "word_distribution",
            format!("W_p {:?} for head input {:?}", w_p.shape(), x.shape()),
        ));
    }
    let hidden = nn::linear(&x, &w_p, &p.get("out.b_p")?)?.tanh()?;
    hidden.matmul(&p.get("out.theta")?.t()?)?.add(&p.get("out.d")?)
}

/// Next-word probabilities `[B, V]`.
pub fn word_distribution<'t>(
    h: &Var<'t>,
    context: &Var<'t>,
    prev_emb: &Var<'t>,
    side: Option<&Var<'t>>,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    word_logits(h, context, prev_emb, side, p)?.softmax(1)
}

/// Mean over the batch of each sequence's mean per-step cross-entropy, feeding
/// the gold previous word at every step.
pub fn teacher_forced_loss<'t>(
    tape: &'t Tape,
    p: &Bound<'t>,
    g: &Var<'t>,
    side: Option<&Var<'t>>,
    gold: &[Vec<usize>],
    max_len: usize,
) -> Result<Var<'t>> {
    let batch = gold.len();
    if batch == 0 || g.shape()[0] != batch {
        return Err(Error::shape(
            "teacher_forced_loss",
            format!("{batch} sequences for features {:?}", g.shape()),
        ));
    }
    let table = p.get("embed.words")?;
    let vocab = table.shape()[0];
    for seq in gold {
        if seq.len() < 2 || seq[0] != BOS || seq[seq.len() - 1] != EOS {
            return Err(Error::Data(
                "gold sequence must start with <bos> and end with <eos>".into(),
            ));
        }
        if seq.len() - 1 > max_len {
            return Err(Error::Data(format!(
                "gold sequence of {} steps exceeds max_len {max_len}",
                seq.len() - 1
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                op: "teacher_forced_loss",
                index: bad,
                extent: vocab,
            });
        }
    }
    let d_h = p.get("dec.lstm.w_hh")?.shape()[1];
    let keys = attention_keys(g, p)?;
    let steps = gold.iter().map(|s| s.len() - 1).max().unwrap_or(0);
    let mut state = DecoderState::initial(tape, batch, d_h);
    let mut total: Option<Var<'t>> = None;
    for t in 1..=steps {
        let prev: Vec<usize> = gold
            .iter()
            .map(|s| s.get(t - 1).copied().unwrap_or(EOS))
            .collect();
        let emb = table.embed_rows(&prev)?;
        let (_, context) = attention(&keys, &state.lstm.h, p)?;
        state = step(&state, &context, &emb, side, p, max_len)?;
        let logp = word_logits(&state.lstm.h, &context, &emb, side, p)?.log_softmax(1)?;

        let mut picks = Vec::new();
        let mut weights = Vec::new();
        for (b, seq) in gold.iter().enumerate() {
            if t < seq.len() {
                picks.push(b * vocab + seq[t]);
                weights.push(1.0 / ((seq.len() - 1) * batch) as f32);
            }
        }
        let n = picks.len();
        let term = logp
            .select(&picks, &[n])?
            .mul(&tape.constant(Tensor::vector(weights)))?
            .sum()?;
        total = Some(match total {
            Some(acc) => acc.sub(&term)?,
            None => term.neg()?,
        });
    }
    Ok(total.expect("at least one step"))
}

/// Argmax decoding from `<bos>` until `<eos>` or `max_len` tokens; the
/// returned ids exclude both markers.
pub fn decode_greedy(
    params: &Params,
    g: &Tensor,
    side: Option<&Tensor>,
    max_len: usize,
) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let g = tape.constant(g.clone());
    let side = side.map(|s| tape.constant(s.clone()));
    let table = p.get("embed.words")?;
    let d_h = p.get("dec.lstm.w_hh")?.shape()[1];
    let keys = attention_keys(&g, &p)?;
    let mut state = DecoderState::initial(&tape, 1, d_h);
    let mut prev = BOS;
    let mut out = Vec::new();
    while state.t < max_len {
        let emb = table.embed_rows(&[prev])?;
        let (_, context) = attention(&keys, &state.lstm.h, &p)?;
        state = step(&state, &context, &emb, side.as_ref(), &p, max_len)?;
        let logits = word_logits(&state.lstm.h, &context, &emb, side.as_ref(), &p)?;
        let next = logits.value().argmax();
        if next == EOS {
            break;
        }
        out.push(next);
        prev = next;
    }
    Ok(out)
}
