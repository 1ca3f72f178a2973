// Raw forward kernels over row-major slices. Inner products accumulate in f64.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

/// Result shape of broadcasting `a` against `b`: equal shapes, a one-element
/// operand, or one shape being a trailing suffix of the other.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Some(a.to_vec());
    }
    if nb == 1 && a.len() >= b.len() {
        return Some(a.to_vec());
    }
    if na == 1 && b.len() >= a.len() {
        return Some(b.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}

pub fn zip_broadcast(a: &[f32], b: &[f32], n: usize, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    let (na, nb) = (a.len(), b.len());
    (0..n).map(|i| f(a[i % na], b[i % nb])).collect()
}

/// Sums `x` down to `target_len` elements by folding leading repeats.
pub fn sum_to(x: &[f32], target_len: usize) -> Vec<f32> {
    let mut acc = vec![0f64; target_len];
    for (i, &v) in x.iter().enumerate() {
        acc[i % target_len] += v as f64;
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub fn broadcast_to(x: &[f32], n: usize) -> Vec<f32> {
    let nx = x.len();
    (0..n).map(|i| x[i % nx]).collect()
}

pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let row = &a[i * k..(i + 1) * k];
        for (p, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (slot, &bv) in acc.iter_mut().zip(brow) {
                *slot += av * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sum_axis(x: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0f32; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0f64;
            for j in 0..n {
                acc += x[(o * n + j) * inner + i] as f64;
            }
            out[o * inner + i] = acc as f32;
        }
    }
    out
}

/// Inverse layout of [`sum_axis`]: repeats each element `n` times along a new axis.
pub fn expand_axis(x: &[f32], outer: usize, n: usize, inner: usize) -> Vec<f32> {
    let mut out = vec![0f32; outer * n * inner];
    for o in 0..outer {
        for j in 0..n {
            let dst = (o * n + j) * inner;
            out[dst..dst + inner].copy_from_slice(&x[o * inner..(o + 1) * inner]);
        }
    }
    out
}

pub fn softmax_axis(x: &[f32], shape: &[usize], axis: usize, log: bool) -> Vec<f32> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[at(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0f64;
            for j in 0..n {
                z += ((x[at(j)] - max) as f64).exp();
            }
            for j in 0..n {
                let shifted = (x[at(j)] - max) as f64;
                out[at(j)] = if log {
                    (shifted - z.ln()) as f32
                } else {
                    (shifted.exp() / z) as f32
                };
            }
        }
    }
    out
}

pub fn slice_axis(x: &[f32], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f32> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let from = (o * n + start) * inner;
        out.extend_from_slice(&x[from..from + len * inner]);
    }
    out
}

/// Zero-pads along `axis` so that the input occupies `[before, before + n)` of `total`.
pub fn pad_axis(x: &[f32], shape: &[usize], axis: usize, before: usize, total: usize) -> Vec<f32> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0f32; outer * total * inner];
    for o in 0..outer {
        let src = o * n * inner;
        let dst = (o * total + before) * inner;
        out[dst..dst + n * inner].copy_from_slice(&x[src..src + n * inner]);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let ph = self.h + 2 * self.pad;
        let pw = self.w + 2 * self.pad;
        if ph < self.kh || pw < self.kw || self.stride == 0 {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    // Input coordinate touched by output `o` at kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Cross-correlation of `x[c_in,h,w]` with `k[c_out,c_in,kh,kw]`.
pub fn conv2d(x: &[f32], k: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let mut out = vec![0f32; g.c_out * ho * wo];
    for co in 0..g.c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0f64;
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            let kv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                            acc += kv as f64 * x[(ci * g.h + iy) * g.w + ix] as f64;
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc as f32;
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(gout: &[f32], k: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let mut acc = vec![0f64; g.c_in * g.h * g.w];
    for co in 0..g.c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = gout[(co * ho + oy) * wo + ox] as f64;
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            let kv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                            acc[(ci * g.h + iy) * g.w + ix] += gv * kv as f64;
                        }
                    }
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Adjoint of [`conv2d`] with respect to its kernels.
pub fn conv2d_kernel_grad(x: &[f32], gout: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let mut acc = vec![0f64; g.c_out * g.c_in * g.kh * g.kw];
    for co in 0..g.c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = gout[(co * ho + oy) * wo + ox] as f64;
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            acc[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] +=
                                gv * x[(ci * g.h + iy) * g.w + ix] as f64;
                        }
                    }
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Flat indices of the maxima of each 2x2 window of `x[c,h,w]` (floor on odd extents).
pub fn max_pool2x2_indices(x: &[f32], c: usize, h: usize, w: usize) -> Vec<usize> {
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}
