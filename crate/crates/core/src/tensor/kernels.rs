//! Forward and backward kernels over raw row-major buffers.
//!
//! Every forward kernel here is a pure function of its inputs, so they are
//! usable outside a [`Graph`](super::Graph) and from any thread.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || kernel[1] != input[0] {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if bias != [kernel[0]] {
            return Err(Error::shape("conv2d bias", kernel, bias));
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        let (k, kh, kw) = (kernel[0], kernel[2], kernel[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", "kernel extents must be odd"));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(Error::shape("conv2d", input, kernel));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        })
    }

    /// Output indices `o` in `[lo, hi)` for which `o*stride + tap - pad` lands
    /// inside `[0, extent)`.
    fn valid(&self, tap: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = tap as isize - self.pad as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let last = extent as isize - 1 - shift;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(out as isize);
        if lo >= hi {
            return (0, 0);
        }
        (lo as usize, hi as usize)
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kern: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.k * plane];
    for k in 0..g.k {
        let dst = &mut out[k * plane..(k + 1) * plane];
        dst.iter_mut().for_each(|v| *v = bias[k]);
        for c in 0..g.c {
            let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (ylo, yhi) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = kern[((k * g.c + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = g.valid(kx, g.w, g.ow);
                    if xlo == xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let off = xlo + kx - g.pad;
                            let n = xhi - xlo;
                            for (d, s) in drow[xlo..xhi].iter_mut().zip(&row[off..off + n]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] += wv * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    kern: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.oh * g.ow;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kern.len()];
    let mut gb = vec![0.0; g.k];
    for k in 0..g.k {
        let go = &gout[k * plane..(k + 1) * plane];
        gb[k] = go.iter().sum();
        for c in 0..g.c {
            let base = c * g.h * g.w;
            for ky in 0..g.kh {
                let (ylo, yhi) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let widx = ((k * g.c + c) * g.kh + ky) * g.kw + kx;
                    let wv = kern[widx];
                    let (xlo, xhi) = g.valid(kx, g.w, g.ow);
                    if xlo == xhi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        let roff = base + iy * g.w;
                        if g.stride == 1 {
                            let off = roff + xlo + kx - g.pad;
                            let n = xhi - xlo;
                            let xs = &x[off..off + n];
                            let gs = &grow[xlo..xhi];
                            acc += xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                            for (d, gv) in gx[off..off + n].iter_mut().zip(gs) {
                                *d += wv * gv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                let ix = roff + ox * g.stride + kx - g.pad;
                                acc += x[ix] * grow[ox];
                                gx[ix] += wv * grow[ox];
                            }
                        }
                    }
                    gk[widx] += acc;
                }
            }
        }
    }
    (gx, gk, gb)
}

pub(crate) fn maxpool2_forward(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source taps of half-pixel-aligned 2x bilinear upsampling along one axis:
/// `(lower index, upper index, weight of upper)` for every output position.
pub(crate) fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = libm::floor(src) as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample2_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(gout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let go = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = go[oy * ow + ox];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    gx
}

pub(crate) fn correlate_forward(
    f1: &[f64],
    f2: &[f64],
    c: usize,
    h: usize,
    w: usize,
    max_disp: usize,
) -> Vec<f64> {
    let side = 2 * max_disp + 1;
    let plane = h * w;
    let norm = 1.0 / c as f64;
    let mut out = vec![0.0; side * side * plane];
    let d = max_disp as isize;
    for dy in -d..=d {
        for dx in -d..=d {
            let ch = ((dy + d) as usize) * side + (dx + d) as usize;
            let dst = &mut out[ch * plane..(ch + 1) * plane];
            let (ylo, yhi) = shifted_range(dy, h);
            let (xlo, xhi) = shifted_range(dx, w);
            for cc in 0..c {
                let a = &f1[cc * plane..(cc + 1) * plane];
                let b = &f2[cc * plane..(cc + 1) * plane];
                for y in ylo..yhi {
                    let y2 = (y as isize + dy) as usize;
                    let x2 = (xlo as isize + dx) as usize;
                    let n = xhi - xlo;
                    let ar = &a[y * w + xlo..y * w + xhi];
                    let br = &b[y2 * w + x2..y2 * w + x2 + n];
                    for ((o, p), q) in dst[y * w + xlo..y * w + xhi].iter_mut().zip(ar).zip(br) {
                        *o += p * q * norm;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn correlate_backward(
    f1: &[f64],
    f2: &[f64],
    gout: &[f64],
    c: usize,
    h: usize,
    w: usize,
    max_disp: usize,
) -> (Vec<f64>, Vec<f64>) {
    let side = 2 * max_disp + 1;
    let plane = h * w;
    let norm = 1.0 / c as f64;
    let mut g1 = vec![0.0; f1.len()];
    let mut g2 = vec![0.0; f2.len()];
    let d = max_disp as isize;
    for dy in -d..=d {
        for dx in -d..=d {
            let ch = ((dy + d) as usize) * side + (dx + d) as usize;
            let go = &gout[ch * plane..(ch + 1) * plane];
            let (ylo, yhi) = shifted_range(dy, h);
            let (xlo, xhi) = shifted_range(dx, w);
            for cc in 0..c {
                let off = cc * plane;
                for y in ylo..yhi {
                    let y2 = (y as isize + dy) as usize;
                    for x in xlo..xhi {
                        let x2 = (x as isize + dx) as usize;
                        let gv = go[y * w + x] * norm;
                        g1[off + y * w + x] += gv * f2[off + y2 * w + x2];
                        g2[off + y2 * w + x2] += gv * f1[off + y * w + x];
                    }
                }
            }
        }
    }
    (g1, g2)
}

/// Positions `p` in `[lo, hi)` such that `p + shift` is inside `[0, n)`.
fn shifted_range(shift: isize, n: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

/// `[rows, n] x [m, n]^T + b` -> `[rows, m]`.
pub(crate) fn linear_forward(x: &[f64], wt: &[f64], b: &[f64], rows: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * m];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        for o in 0..m {
            let wr = &wt[o * n..(o + 1) * n];
            out[r * m + o] = b[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

pub(crate) fn linear_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    rows: usize,
    n: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; rows * n];
    let mut gw = vec![0.0; m * n];
    let mut gb = vec![0.0; m];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        for o in 0..m {
            let gv = gout[r * m + o];
            if gv == 0.0 {
                continue;
            }
            gb[o] += gv;
            let wr = &wt[o * n..(o + 1) * n];
            for (d, wv) in gx[r * n..(r + 1) * n].iter_mut().zip(wr) {
                *d += gv * wv;
            }
            for (d, xv) in gw[o * n..(o + 1) * n].iter_mut().zip(xr) {
                *d += gv * xv;
            }
        }
    }
    (gx, gw, gb)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

/// Pure cross-correlation, usable without a graph.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    let data = conv2d_forward(input.data(), kernel.data(), bias.data(), &g);
    Tensor::new(vec![g.k, g.oh, g.ow], data)
}

/// Pure correlation layer, usable without a graph.
pub fn correlate(f1: &Tensor, f2: &Tensor, max_disp: usize) -> Result<Tensor> {
    if f1.shape() != f2.shape() || f1.rank() != 3 {
        return Err(Error::shape("correlate", f1.shape(), f2.shape()));
    }
    let (c, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2]);
    if c == 0 {
        return Err(Error::Empty("correlate"));
    }
    let side = 2 * max_disp + 1;
    Tensor::new(
        vec![side * side, h, w],
        correlate_forward(f1.data(), f2.data(), c, h, w, max_disp),
    )
}
