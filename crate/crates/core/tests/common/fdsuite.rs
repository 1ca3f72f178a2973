//! Randomised finite-difference suites over the autodiff primitives.

use super::{fd_check, FdReport};
use metaquill::tensor::Padding;
use metaquill::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 100;
pub const SECOND_ORDER_TOL: f64 = 1e-5;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::uniform(shape, bound, rng)
}

/// Draws each extent from an inclusive range, then uniform values.
fn draw_shape(rng: &mut ChaCha8Rng, ranges: &[(usize, usize)]) -> Vec<usize> {
    ranges.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect()
}

fn rt(rng: &mut ChaCha8Rng, ranges: &[(usize, usize)], bound: f32) -> Tensor {
    let shape = draw_shape(rng, ranges);
    rand_tensor(rng, &shape, bound)
}

/// Values bounded away from zero so relu's kink is never straddled by the FD step.
fn away_from_zero(rng: &mut ChaCha8Rng, ranges: &[(usize, usize)]) -> Tensor {
    let shape = &draw_shape(rng, ranges);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5f32);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values (spacing well above the FD step) so pooling maxima never tie.
fn distinct(rng: &mut ChaCha8Rng, ranges: &[(usize, usize)]) -> Tensor {
    let shape = &draw_shape(rng, ranges);
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| i as f32 * 0.05).collect();
    for i in (1..n).rev() {
        data.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn run_op(
    name: &str,
    seed: u64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> metaquill::Result<Var<'t>> + Copy,
) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::new(name);
    for _ in 0..CASES {
        let inputs = make(&mut rng);
        report.absorb(fd_check(&inputs, f, &mut rng));
    }
    report
}

pub fn elementwise_suite() -> Vec<FdReport> {
    vec![
        run_op(
            "add (trailing broadcast)",
            1,
            |r| {
                let (m, n) = (dims(r, 1, 4), dims(r, 1, 5));
                vec![rt(r, &[(m, m), (n, n)], 1.0), rt(r, &[(n, n)], 1.0)]
            },
            |_, v| v[0].add(&v[1]),
        ),
        run_op(
            "sub (scalar broadcast)",
            2,
            |r| vec![rt(r, &[], 1.0), rt(r, &[(1, 6)], 1.0)],
            |_, v| v[0].sub(&v[1]),
        ),
        run_op(
            "mul",
            3,
            |r| {
                let s = [dims(r, 1, 3), dims(r, 1, 4)];
                vec![rand_tensor(r, &s, 1.5), rand_tensor(r, &s[1..], 1.5)]
            },
            |_, v| v[0].mul(&v[1]),
        ),
        run_op(
            "scale",
            4,
            |r| vec![rt(r, &[(1, 7)], 2.0)],
            |_, v| v[0].scale(-1.7),
        ),
        run_op(
            "tanh",
            5,
            |r| vec![rt(r, &[(1, 4), (1, 4)], 2.0)],
            |_, v| v[0].tanh(),
        ),
        run_op(
            "sigmoid",
            6,
            |r| vec![rt(r, &[(1, 8)], 3.0)],
            |_, v| v[0].sigmoid(),
        ),
        run_op(
            "relu",
            7,
            |r| vec![away_from_zero(r, &[(1, 8)])],
            |_, v| v[0].relu(),
        ),
    ]
}

pub fn linalg_suite() -> Vec<FdReport> {
    vec![
        run_op(
            "matmul",
            11,
            |r| {
                let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
                vec![rt(r, &[(m, m), (k, k)], 1.0), rt(r, &[(k, k), (n, n)], 1.0)]
            },
            |_, v| v[0].matmul(&v[1]),
        ),
        run_op(
            "transpose",
            12,
            |r| vec![rt(r, &[(1, 4), (1, 4)], 1.0)],
            |_, v| v[0].t(),
        ),
        run_op(
            "sum",
            13,
            |r| vec![rt(r, &[(1, 3), (1, 5)], 1.0)],
            |_, v| v[0].sum(),
        ),
        run_op(
            "mean",
            14,
            |r| vec![rt(r, &[(1, 9)], 1.0)],
            |_, v| v[0].mean(),
        ),
        run_op(
            "sum_axis",
            15,
            |r| vec![rt(r, &[(1, 3), (1, 3), (1, 3)], 1.0)],
            |_, v| v[0].sum_axis(1),
        ),
        run_op(
            "expand_axis",
            16,
            |r| vec![rt(r, &[(1, 3), (1, 3)], 1.0)],
            |_, v| v[0].expand_axis(1, 3),
        ),
        run_op(
            "broadcast_to",
            17,
            |r| vec![rt(r, &[(1, 4)], 1.0)],
            |_, v| {
                let n = v[0].shape()[0];
                v[0].broadcast_to(&[3, n])
            },
        ),
        run_op(
            "reshape",
            18,
            |r| vec![rt(r, &[(2, 2), (1, 4)], 1.0)],
            |_, v| {
                let n = v[0].shape()[1];
                v[0].reshape(&[n, 2])
            },
        ),
    ]
}

pub fn normalisation_indexing_suite() -> Vec<FdReport> {
    vec![
        run_op(
            "softmax axis 0",
            21,
            |r| vec![rt(r, &[(1, 6)], 3.0)],
            |_, v| v[0].softmax(0),
        ),
        run_op(
            "softmax axis 1",
            22,
            |r| vec![rt(r, &[(1, 3), (2, 5)], 3.0)],
            |_, v| v[0].softmax(1),
        ),
        run_op(
            "log_softmax",
            23,
            |r| vec![rt(r, &[(2, 4), (2, 4)], 3.0)],
            |_, v| v[0].log_softmax(0),
        ),
        run_op(
            "cross_entropy",
            24,
            |r| vec![rt(r, &[(2, 8)], 3.0)],
            |_, v| v[0].cross_entropy(1),
        ),
        run_op(
            "embed_lookup",
            25,
            |r| vec![rt(r, &[(3, 6), (1, 4)], 1.0)],
            |_, v| v[0].embed_rows(&[2, 0, 2]),
        ),
        run_op(
            "concat",
            26,
            |r| {
                let m = dims(r, 1, 3);
                vec![
                    rt(r, &[(m, m), (1, 3)], 1.0),
                    rt(r, &[(m, m), (1, 4)], 1.0),
                ]
            },
            |t, v| t.concat(v, 1),
        ),
        run_op(
            "slice",
            27,
            |r| vec![rt(r, &[(1, 3), (3, 6)], 1.0)],
            |_, v| v[0].slice(1, 1, 2),
        ),
        run_op(
            "pad",
            28,
            |r| vec![rt(r, &[(1, 3), (1, 3)], 1.0)],
            |_, v| {
                let n = v[0].shape()[1];
                v[0].pad(1, 2, n + 3)
            },
        ),
    ]
}

pub fn conv_pool_suite() -> Vec<FdReport> {
    vec![
        run_op(
            "conv2d valid",
            31,
            |r| {
                let (ci, co) = (dims(r, 1, 2), dims(r, 1, 2));
                vec![
                    rt(r, &[(ci, ci), (4, 4), (4, 4)], 1.0),
                    rt(r, &[(co, co), (ci, ci), (3, 3), (3, 3)], 1.0),
                ]
            },
            |_, v| v[0].conv2d(&v[1], 1, Padding::Valid),
        ),
        run_op(
            "conv2d same stride 2",
            32,
            |r| {
                let ci = dims(r, 1, 2);
                vec![
                    rt(r, &[(ci, ci), (3, 5), (3, 5)], 1.0),
                    rt(r, &[(2, 2), (ci, ci), (3, 3), (3, 3)], 1.0),
                ]
            },
            |_, v| v[0].conv2d(&v[1], 2, Padding::Same),
        ),
        run_op(
            "max_pool2x2",
            33,
            |r| vec![distinct(r, &[(1, 2), (4, 4), (2, 5)])],
            |_, v| v[0].max_pool2x2(),
        ),
        // Gradient of a conv output projection, differentiated again: exercises
        // the input-adjoint and kernel-adjoint ops and their own adjoints.
        run_op(
            "conv2d double-backward",
            34,
            |r| {
                vec![
                    rt(r, &[(1, 1), (4, 4), (4, 4)], 0.5),
                    rt(r, &[(2, 2), (1, 1), (3, 3), (3, 3)], 0.5),
                    rt(r, &[(2, 2), (4, 4), (4, 4)], 0.5),
                ]
            },
            |t, v| {
                let y = v[0].conv2d(&v[1], 1, Padding::Same)?;
                let inner = y.mul(&v[2])?.tanh()?.sum()?;
                let g = t.grad(inner, &[v[0], v[1]], true)?;
                let gx = g[0].mul(&g[0])?.sum()?;
                gx.add(&g[1].sum()?)
            },
        ),
    ]
}

/// Worst relative error of `p''(x)` over random quartics.
pub fn double_backward_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0f64;
    for _ in 0..200 {
        let coeffs: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x0: f32 = rng.gen_range(-1.0..1.0);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(x0), true);
        // Horner form: ((((c4 x + c3) x + c2) x + c1) x + c0)
        let mut p = tape.constant(Tensor::scalar(coeffs[4]));
        for &c in coeffs[..4].iter().rev() {
            p = p.mul(&x).unwrap().add_scalar(c).unwrap();
        }
        let d1 = tape.grad(p, &[x], true).unwrap()[0];
        let d2 = tape.grad(d1, &[x], false).unwrap()[0].value().item() as f64;
        let (c, x0) = (coeffs.iter().map(|&v| v as f64).collect::<Vec<_>>(), x0 as f64);
        let analytic = 2.0 * c[2] + 6.0 * c[3] * x0 + 12.0 * c[4] * x0 * x0;
        let err = (d2 - analytic).abs() / analytic.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

pub fn all_suites() -> Vec<FdReport> {
    let mut out = elementwise_suite();
    out.extend(linalg_suite());
    out.extend(normalisation_indexing_suite());
    out.extend(conv_pool_suite());
    out
}
