//! Raw numeric kernels behind the differentiable primitives.
//!
//! All spatial kernels use zero padding with "same" output size and stride 1.

use crate::tensor::Shape;

/// Geometry of one stride-1, same-padded convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub input: Shape,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.dilation * (self.kernel - 1) / 2) as isize
    }

    /// Calls `f(ky, kx, dy, dx)` for every kernel tap, where (dy, dx) is the
    /// input offset of the tap relative to the output pixel.
    fn taps(&self, mut f: impl FnMut(usize, usize, isize, isize)) {
        let pad = self.pad();
        for ky in 0..self.kernel {
            for kx in 0..self.kernel {
                let dy = (ky * self.dilation) as isize - pad;
                let dx = (kx * self.dilation) as isize - pad;
                f(ky, kx, dy, dx);
            }
        }
    }
}

/// Valid output range `[lo, hi)` along an axis of length `len` for input offset `d`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let Shape { n, c: ci, h, w: wd } = g.input;
    let co = g.c_out;
    let k2 = g.kernel * g.kernel;
    let plane = h * wd;
    let mut out = vec![0.0; n * co * plane];
    for b_i in 0..n {
        for o in 0..co {
            let out_plane = &mut out[(b_i * co + o) * plane..(b_i * co + o + 1) * plane];
            if let Some(bias) = b {
                out_plane.iter_mut().for_each(|v| *v = bias[o]);
            }
            for i in 0..ci {
                let in_plane = &x[(b_i * ci + i) * plane..(b_i * ci + i + 1) * plane];
                let w_base = (o * ci + i) * k2;
                g.taps(|ky, kx, dy, dx| {
                    let wv = w[w_base + ky * g.kernel + kx];
                    if wv == 0.0 {
                        return;
                    }
                    let (y0, y1) = valid_range(h, dy);
                    let (x0, x1) = valid_range(wd, dx);
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * wd;
                        let orow = &mut out_plane[y * wd + x0..y * wd + x1];
                        let irow = &in_plane
                            [(src as isize + x0 as isize + dx) as usize..(src as isize + x1 as isize + dx) as usize];
                        for (o_v, i_v) in orow.iter_mut().zip(irow) {
                            *o_v += wv * i_v;
                        }
                    }
                });
            }
        }
    }
    out
}

/// Returns (grad_x, grad_w, grad_b) for upstream gradient `go`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    go: &[f64],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let Shape { n, c: ci, h, w: wd } = g.input;
    let co = g.c_out;
    let k2 = g.kernel * g.kernel;
    let plane = h * wd;
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let gb = need_b.then(|| {
        let mut gb = vec![0.0; co];
        for b_i in 0..n {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += go[(b_i * co + o) * plane..(b_i * co + o + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return (None, None, gb);
    }
    for b_i in 0..n {
        for o in 0..co {
            let go_plane = &go[(b_i * co + o) * plane..(b_i * co + o + 1) * plane];
            for i in 0..ci {
                let in_off = (b_i * ci + i) * plane;
                let w_base = (o * ci + i) * k2;
                g.taps(|ky, kx, dy, dx| {
                    let (y0, y1) = valid_range(h, dy);
                    let (x0, x1) = valid_range(wd, dx);
                    let widx = w_base + ky * g.kernel + kx;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src = in_off + ((y as isize + dy) as usize) * wd;
                        let s0 = (src as isize + x0 as isize + dx) as usize;
                        let s1 = (src as isize + x1 as isize + dx) as usize;
                        let grow = &go_plane[y * wd + x0..y * wd + x1];
                        if let Some(gx) = gx.as_mut() {
                            if wv != 0.0 {
                                for (gxv, gv) in gx[s0..s1].iter_mut().zip(grow) {
                                    *gxv += wv * gv;
                                }
                            }
                        }
                        if gw.is_some() {
                            acc += x[s0..s1].iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                });
            }
        }
    }
    (gx, gw, gb)
}

/// Per-channel sliding maximum over a `window`×`window` neighbourhood.
/// Out-of-image positions are ignored. Returns values and the flat source
/// index of each maximum (first occurrence wins on ties).
pub(crate) fn sliding_max(shape: Shape, x: &[f64], window: usize) -> (Vec<f64>, Vec<usize>) {
    let r = (window / 2) as isize;
    let (h, w) = (shape.h as isize, shape.w as isize);
    let plane = shape.plane();
    let mut out = vec![0.0; x.len()];
    let mut arg = vec![0usize; x.len()];
    for p in 0..shape.n * shape.c {
        let base = p * plane;
        for y in 0..h {
            for xx in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for yy in (y - r).max(0)..(y + r + 1).min(h) {
                    for xw in (xx - r).max(0)..(xx + r + 1).min(w) {
                        let idx = base + (yy * w + xw) as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = base + (y * w + xx) as usize;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

/// Normalized 1-D Gaussian taps truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable per-channel correlation with a symmetric odd-length kernel,
/// zero padded. For symmetric kernels this map is self-adjoint.
pub(crate) fn separable_blur(shape: Shape, x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (shape.h as isize, shape.w as isize);
    let plane = shape.plane();
    let mut tmp = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for p in 0..shape.n * shape.c {
        let base = p * plane;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let sx = xx + t as isize - r;
                    if sx >= 0 && sx < w {
                        acc += kv * x[base + (y * w + sx) as usize];
                    }
                }
                tmp[base + (y * w + xx) as usize] = acc;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let sy = y + t as isize - r;
                    if sy >= 0 && sy < h {
                        acc += kv * tmp[base + (sy * w + xx) as usize];
                    }
                }
                out[base + (y * w + xx) as usize] = acc;
            }
        }
    }
    out
}

/// Forward difference along width (`horizontal`) or height; the last
/// row/column difference is zero.
pub(crate) fn forward_diff(shape: Shape, x: &[f64], horizontal: bool) -> Vec<f64> {
    let (h, w) = (shape.h, shape.w);
    let plane = shape.plane();
    let mut out = vec![0.0; x.len()];
    for p in 0..shape.n * shape.c {
        let base = p * plane;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                if horizontal && xx + 1 < w {
                    out[i] = x[i + 1] - x[i];
                } else if !horizontal && y + 1 < h {
                    out[i] = x[i + w] - x[i];
                }
            }
        }
    }
    out
}

/// Adjoint of [`forward_diff`].
pub(crate) fn forward_diff_adjoint(shape: Shape, g: &[f64], horizontal: bool) -> Vec<f64> {
    let (h, w) = (shape.h, shape.w);
    let plane = shape.plane();
    let mut out = vec![0.0; g.len()];
    for p in 0..shape.n * shape.c {
        let base = p * plane;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                if horizontal && xx + 1 < w {
                    out[i + 1] += g[i];
                    out[i] -= g[i];
                } else if !horizontal && y + 1 < h {
                    out[i + w] += g[i];
                    out[i] -= g[i];
                }
            }
        }
    }
    out
}
