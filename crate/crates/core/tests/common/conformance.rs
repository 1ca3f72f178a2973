//! Conditioning, attention and output-distribution invariants.

use metaquill::conditioning::{apply_film, compute_gamma_beta, init_film};
use metaquill::decoder::{attention, attention_keys, init_decoder, word_distribution, DecoderDims};
use metaquill::{Params, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NORM_TOL: f64 = 1e-6;
const DRAWS: u64 = 50;

#[derive(Debug, Default)]
pub struct Conformance {
    /// Zero FiLM heads reproduce the features bit for bit.
    pub film_identity_exact: bool,
    /// gamma = 0 leaves exactly beta at every location.
    pub film_zero_exact: bool,
    pub attention_sum_err: f64,
    pub attention_uniform_err: f64,
    pub word_sum_err: f64,
    pub word_uniform_err: f64,
}

impl Conformance {
    pub fn passed(&self) -> bool {
        self.film_identity_exact
            && self.film_zero_exact
            && self.attention_sum_err <= NORM_TOL
            && self.attention_uniform_err <= NORM_TOL
            && self.word_sum_err <= NORM_TOL
            && self.word_uniform_err <= NORM_TOL
    }
}

fn zero(p: &mut Params, name: &str) {
    let t = p.get_mut(name).unwrap();
    *t = Tensor::zeros(t.shape());
}

fn row_sum_err(t: &Tensor) -> f64 {
    let s = t.shape();
    (0..s[0])
        .map(|b| {
            let total: f64 = (0..s[1]).map(|j| t.get(&[b, j]) as f64).sum();
            (total - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

fn uniform_err(t: &Tensor) -> f64 {
    let n = t.shape()[1] as f64;
    t.data().iter().map(|&v| (v as f64 - 1.0 / n).abs()).fold(0.0, f64::max)
}

pub fn check_conformance() -> Conformance {
    let mut out = Conformance {
        film_identity_exact: true,
        film_zero_exact: true,
        ..Default::default()
    };
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, hw, c, d_side) = (rng.gen_range(1..4), rng.gen_range(1..10), rng.gen_range(1..6), 4);
        let features = Tensor::uniform(&[b, hw, c], 3.0, &mut rng);
        let side = Tensor::uniform(&[b, d_side], 1.0, &mut rng);

        let mut film = Params::new();
        init_film(&mut film, d_side, 5, c, &mut rng);
        for n in ["film.gamma.w", "film.gamma.b", "film.beta.w", "film.beta.b"] {
            zero(&mut film, n);
        }
        let tape = Tape::new();
        let p = film.bind(&tape, false);
        let f = tape.constant(features.clone());
        let ss = compute_gamma_beta(&tape.constant(side.clone()), &p).unwrap();
        out.film_identity_exact &= *apply_film(&f, &ss).unwrap().value() == features;

        // gamma = tanh(.)·0 + (-1) + 1 = 0, beta random
        *film.get_mut("film.gamma.b").unwrap() = Tensor::full(&[c], -1.0);
        *film.get_mut("film.beta.b").unwrap() = Tensor::uniform(&[c], 1.0, &mut rng);
        let tape = Tape::new();
        let p = film.bind(&tape, false);
        let ss = compute_gamma_beta(&tape.constant(side.clone()), &p).unwrap();
        let g = apply_film(&tape.constant(features.clone()), &ss).unwrap().value();
        let beta = film.get("film.beta.b").unwrap();
        for bi in 0..b {
            for l in 0..hw {
                for ch in 0..c {
                    out.film_zero_exact &= g.get(&[bi, l, ch]) == beta.get(&[ch]);
                }
            }
        }

        let dims = DecoderDims {
            vocab: rng.gen_range(5..20),
            channels: c,
            d_h: 4,
            d_att: 3,
            d_p: 3,
            d_w: 2,
            d_side: 0,
        };
        let mut dec = Params::new();
        init_decoder(&mut dec, &dims, &mut rng);
        // non-zero biases so the checks do not rely on initial zeros
        for n in ["att.b_h", "att.b", "out.b_p", "out.d"] {
            let s = dec.get(n).unwrap().shape().to_vec();
            *dec.get_mut(n).unwrap() = Tensor::uniform(&s, 1.0, &mut rng);
        }
        let tape = Tape::new();
        let p = dec.bind(&tape, false);
        let h = tape.constant(Tensor::uniform(&[b, 4], 1.0, &mut rng));
        let keys = attention_keys(&tape.constant(features.clone()), &p).unwrap();
        let (map, context) = attention(&keys, &h, &p).unwrap();
        out.attention_sum_err = out.attention_sum_err.max(row_sum_err(&map.alpha.value()));

        let loc = Tensor::uniform(&[c], 2.0, &mut rng);
        let constant: Vec<f32> = (0..b * hw).flat_map(|_| loc.data().to_vec()).collect();
        let flat = tape.constant(Tensor::new(&[b, hw, c], constant).unwrap());
        let (map, _) = attention(&attention_keys(&flat, &p).unwrap(), &h, &p).unwrap();
        out.attention_uniform_err = out.attention_uniform_err.max(uniform_err(&map.alpha.value()));

        let emb = tape.constant(Tensor::uniform(&[b, 2], 1.0, &mut rng));
        let dist = word_distribution(&h, &context, &emb, None, &p).unwrap();
        out.word_sum_err = out.word_sum_err.max(row_sum_err(&dist.value()));

        zero(&mut dec, "out.theta");
        zero(&mut dec, "out.d");
        let tape = Tape::new();
        let p = dec.bind(&tape, false);
        let h = tape.constant(Tensor::uniform(&[b, 4], 1.0, &mut rng));
        let ctx = tape.constant(Tensor::uniform(&[b, c], 1.0, &mut rng));
        let emb = tape.constant(Tensor::uniform(&[b, 2], 1.0, &mut rng));
        let dist = word_distribution(&h, &ctx, &emb, None, &p).unwrap();
        out.word_uniform_err = out.word_uniform_err.max(uniform_err(&dist.value()));
    }
    out
}
