//! Forward and backward kernels on plain tensors.
//!
//! Dense convolutions go through im2col and `matrixmultiply::dgemm`;
//! depthwise convolutions use direct loops. Work is split across rayon tasks
//! whose partial results are always reduced in a fixed order, so results do
//! not depend on the number of worker threads.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::dataio::{bilinear_taps, resize_plane};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    /// One filter per channel (channel multiplier 1).
    pub depthwise: bool,
}

impl ConvGeom {
    pub fn dense(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation,
            depthwise: false,
        }
    }

    pub fn depthwise(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation,
            depthwise: true,
        }
    }

    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad() - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && !self.depthwise
    }
}

fn tasks_per_sample(n: usize, rows: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    ((2 * threads).div_ceil(n)).clamp(1, rows.max(1))
}

/// `c[m x n] = a[m x k] * b[k x n] (+ c when accumulate)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches; `c` is
    // a distinct mutable slice, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// im2col of output rows `r0..r1` of one sample into `cols[K x P]`.
fn im2col(x: &[f64], (c, h, w): (usize, usize, usize), g: ConvGeom, ow: usize, r0: usize, r1: usize, cols: &mut [f64]) {
    let k = g.kernel;
    let p = (r1 - r0) * ow;
    let pad = g.pad() as isize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                let dy = (ky * g.dilation) as isize - pad;
                let dx = (kx * g.dilation) as isize - pad;
                let (lo, hi) = tap_range(dx, g.stride, w, ow);
                for (ri, oy) in (r0..r1).enumerate() {
                    let iy = (oy * g.stride) as isize + dy;
                    let out = &mut row[ri * ow..(ri + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    if g.stride == 1 {
                        let s0 = (lo as isize + dx) as usize;
                        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else {
                        for (ox, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[(((lo + ox) * g.stride) as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], (c, h, w): (usize, usize, usize), g: ConvGeom, (oh, ow): (usize, usize), dx: &mut [f64]) {
    let k = g.kernel;
    let p = oh * ow;
    let pad = g.pad() as isize;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                let dy = (ky * g.dilation) as isize - pad;
                let dxo = (kx * g.dilation) as isize - pad;
                let (lo, hi) = tap_range(dxo, g.stride, w, ow);
                for oy in row_range(dy, g.stride, h, oh) {
                    let iy = ((oy * g.stride) as isize + dy) as usize;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let src = &row[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        let d0 = (lo as isize + dxo) as usize;
                        dst[d0..d0 + (hi - lo)].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            dst[(((lo + j) * g.stride) as isize + dxo) as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let [_, c, h, w] = x.shape();
    let (oh, ow) = (g.out_size(h), g.out_size(w));
    let co = weight.n();
    let mut y = if g.depthwise {
        assert_eq!(co, c, "depthwise conv needs matching channels");
        depthwise_forward(x, weight, g, oh, ow)
    } else {
        assert_eq!(weight.c(), c, "conv weight expects {} input channels, got {c}", weight.c());
        if use_direct(co, g) {
            direct_forward(x, weight, g, oh, ow)
        } else {
            dense_forward(x, weight, g, oh, ow)
        }
    };
    if let Some(b) = bias {
        let hw = oh * ow;
        y.data_mut().par_chunks_mut(hw).enumerate().for_each(|(idx, plane)| {
            let bv = b.data()[idx % co];
            plane.iter_mut().for_each(|v| *v += bv);
        });
    }
    y
}

fn dense_forward(x: &Tensor, weight: &Tensor, g: ConvGeom, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let co = weight.n();
    let kk = c * g.kernel * g.kernel;
    let chunks = tasks_per_sample(n, oh);
    let rows_per = oh.div_ceil(chunks);
    let tasks: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|i| (0..oh).step_by(rows_per).map(move |r0| (i, r0, (r0 + rows_per).min(oh))))
        .collect();
    let parts: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(i, r0, r1)| {
            let p = (r1 - r0) * ow;
            let xs = x.sample(i);
            let mut out = vec![0.0; co * p];
            if g.is_pointwise() {
                gemm(co, kk, p, weight.data(), kk, 1, &xs[r0 * w..], h * w, 1, &mut out, false);
            } else {
                let mut cols = vec![0.0; kk * p];
                im2col(xs, (c, h, w), g, ow, r0, r1, &mut cols);
                gemm(co, kk, p, weight.data(), kk, 1, &cols, p, 1, &mut out, false);
            }
            out
        })
        .collect();
    let mut y = Tensor::zeros([n, co, oh, ow]);
    let data = y.data_mut();
    for (&(i, r0, r1), part) in tasks.iter().zip(&parts) {
        let p = (r1 - r0) * ow;
        for o in 0..co {
            let dst = ((i * co + o) * oh + r0) * ow;
            data[dst..dst + p].copy_from_slice(&part[o * p..(o + 1) * p]);
        }
    }
    y
}

/// Valid output-column range for a tap at input offset `off` (ix = ox*s + off).
fn tap_range(off: isize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = ((w as isize - 1 - off).div_euclid(s) + 1).clamp(0, ow as isize);
    (lo.min(hi) as usize, hi as usize)
}

/// Dense convolutions with at most this many output channels use direct
/// per-plane loops: a GEMM with so few rows is dominated by packing and
/// im2col traffic.
const DIRECT_MAX_OUT_CHANNELS: usize = 4;

fn use_direct(co: usize, g: ConvGeom) -> bool {
    !g.is_pointwise() && co <= DIRECT_MAX_OUT_CHANNELS
}

/// Dot product with four independent accumulators so it vectorizes; the
/// summation order is fixed, so results stay deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Iterates the taps of a `k x k` filter, yielding for each tap its weight
/// index, the input row/column offsets and the valid output-column range.
fn for_each_tap(g: ConvGeom, w: usize, ow: usize, mut f: impl FnMut(usize, isize, isize, usize, usize)) {
    let k = g.kernel;
    let pad = g.pad() as isize;
    for ky in 0..k {
        let dy = (ky * g.dilation) as isize - pad;
        for kx in 0..k {
            let dx = (kx * g.dilation) as isize - pad;
            let (lo, hi) = tap_range(dx, g.stride, w, ow);
            // a tap that only ever reads padding contributes nothing
            if lo < hi {
                f(ky * k + kx, dy, dx, lo, hi);
            }
        }
    }
}

/// Output rows whose input row `oy * stride + dy` lies inside the plane.
fn row_range(dy: isize, stride: usize, h: usize, oh: usize) -> std::ops::Range<usize> {
    let (lo, hi) = tap_range(dy, stride, h, oh);
    lo..hi
}

/// `out += filter (*) plane` for one input/output plane pair.
fn taps_forward(out: &mut [f64], plane: &[f64], wk: &[f64], g: ConvGeom, (h, w): (usize, usize), (oh, ow): (usize, usize)) {
    for_each_tap(g, w, ow, |t, dy, dx, lo, hi| {
        let wv = wk[t];
        for oy in row_range(dy, g.stride, h, oh) {
            let iy = ((oy * g.stride) as isize + dy) as usize;
            let dst = &mut out[oy * ow + lo..oy * ow + hi];
            if g.stride == 1 {
                let s0 = (iy * w) as isize + lo as isize + dx;
                let src = &plane[s0 as usize..s0 as usize + (hi - lo)];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d += wv * v);
            } else {
                let row = &plane[iy * w..(iy + 1) * w];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += wv * row[(((lo + j) * g.stride) as isize + dx) as usize];
                }
            }
        }
    });
}

/// `dx_plane += filter^T (*) dy_plane`.
fn taps_input_grad(dxp: &mut [f64], dyp: &[f64], wk: &[f64], g: ConvGeom, (h, w): (usize, usize), (oh, ow): (usize, usize)) {
    for_each_tap(g, w, ow, |t, dy, dx, lo, hi| {
        let wv = wk[t];
        for oy in row_range(dy, g.stride, h, oh) {
            let iy = ((oy * g.stride) as isize + dy) as usize;
            let src = &dyp[oy * ow + lo..oy * ow + hi];
            if g.stride == 1 {
                let d0 = ((iy * w) as isize + lo as isize + dx) as usize;
                dxp[d0..d0 + (hi - lo)].iter_mut().zip(src).for_each(|(d, &v)| *d += wv * v);
            } else {
                let row = &mut dxp[iy * w..(iy + 1) * w];
                for (j, &v) in src.iter().enumerate() {
                    row[(((lo + j) * g.stride) as isize + dx) as usize] += wv * v;
                }
            }
        }
    });
}

/// `dwk += dy_plane (x) plane` correlation for every tap.
fn taps_weight_grad(dwk: &mut [f64], plane: &[f64], dyp: &[f64], g: ConvGeom, (h, w): (usize, usize), (oh, ow): (usize, usize)) {
    for_each_tap(g, w, ow, |t, dy, dx, lo, hi| {
        let mut acc = 0.0;
        for oy in row_range(dy, g.stride, h, oh) {
            let iy = ((oy * g.stride) as isize + dy) as usize;
            let gr = &dyp[oy * ow + lo..oy * ow + hi];
            if g.stride == 1 {
                let s0 = ((iy * w) as isize + lo as isize + dx) as usize;
                acc += dot(gr, &plane[s0..s0 + (hi - lo)]);
            } else {
                let row = &plane[iy * w..(iy + 1) * w];
                for (j, &v) in gr.iter().enumerate() {
                    acc += v * row[(((lo + j) * g.stride) as isize + dx) as usize];
                }
            }
        }
        dwk[t] += acc;
    });
}

fn direct_forward(x: &Tensor, weight: &Tensor, g: ConvGeom, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let co = weight.n();
    let k2 = g.kernel * g.kernel;
    let mut y = Tensor::zeros([n, co, oh, ow]);
    y.data_mut().par_chunks_mut(oh * ow).enumerate().for_each(|(idx, out)| {
        let (i, o) = (idx / co, idx % co);
        for ci in 0..c {
            let wk = &weight.data()[(o * c + ci) * k2..][..k2];
            taps_forward(out, x.plane(i, ci), wk, g, (h, w), (oh, ow));
        }
    });
    y
}

fn direct_backward(x: &Tensor, weight: &Tensor, dy: &Tensor, g: ConvGeom, need_dx: bool) -> (Option<Tensor>, Tensor) {
    let [n, c, h, w] = x.shape();
    let [_, co, oh, ow] = dy.shape();
    let k2 = g.kernel * g.kernel;
    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        dx.data_mut().par_chunks_mut(h * w).enumerate().for_each(|(idx, dxp)| {
            let (i, ci) = (idx / c, idx % c);
            for o in 0..co {
                let wk = &weight.data()[(o * c + ci) * k2..][..k2];
                taps_input_grad(dxp, dy.plane(i, o), wk, g, (h, w), (oh, ow));
            }
        });
        dx
    });
    let mut dw = Tensor::zeros(weight.shape());
    dw.data_mut().par_chunks_mut(k2).enumerate().for_each(|(idx, dwk)| {
        let (o, ci) = (idx / c, idx % c);
        for i in 0..n {
            taps_weight_grad(dwk, x.plane(i, ci), dy.plane(i, o), g, (h, w), (oh, ow));
        }
    });
    (dx, dw)
}

fn depthwise_forward(x: &Tensor, weight: &Tensor, g: ConvGeom, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    debug_assert!(n * c > 0);
    let k = g.kernel;
    let pad = g.pad() as isize;
    let mut y = Tensor::zeros([n, c, oh, ow]);
    y.data_mut().par_chunks_mut(oh * ow).enumerate().for_each(|(idx, out)| {
        let (i, ci) = (idx / c, idx % c);
        let plane = x.plane(i, ci);
        let wk = &weight.data()[ci * k * k..(ci + 1) * k * k];
        for ky in 0..k {
            let dy = (ky * g.dilation) as isize - pad;
            for kx in 0..k {
                let wv = wk[ky * k + kx];
                let dx = (kx * g.dilation) as isize - pad;
                let (lo, hi) = tap_range(dx, g.stride, w, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..];
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        dst[ox] += wv * src[((ox * g.stride) as isize + dx) as usize];
                    }
                }
            }
        }
    });
    y
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Option<Tensor>,
}

pub fn conv_backward(x: &Tensor, weight: &Tensor, has_bias: bool, dy: &Tensor, g: ConvGeom, need_dx: bool) -> ConvGrads {
    let (dx, dw) = if g.depthwise {
        depthwise_backward(x, weight, dy, g, need_dx)
    } else if use_direct(weight.n(), g) {
        direct_backward(x, weight, dy, g, need_dx)
    } else {
        dense_backward(x, weight, dy, g, need_dx)
    };
    let db = has_bias.then(|| {
        let [n, co, oh, ow] = dy.shape();
        let mut db = Tensor::zeros([co, 1, 1, 1]);
        for i in 0..n {
            for o in 0..co {
                db.data_mut()[o] += dy.data()[(i * co + o) * oh * ow..][..oh * ow].iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

fn dense_backward(x: &Tensor, weight: &Tensor, dy: &Tensor, g: ConvGeom, need_dx: bool) -> (Option<Tensor>, Tensor) {
    let [n, c, h, w] = x.shape();
    let [_, co, oh, ow] = dy.shape();
    let kk = c * g.kernel * g.kernel;
    let p = oh * ow;
    let parts: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xs = x.sample(i);
            let dys = dy.sample(i);
            let mut dw = vec![0.0; co * kk];
            if g.is_pointwise() {
                gemm(co, p, kk, dys, p, 1, xs, 1, p, &mut dw, false);
                let dx = need_dx.then(|| {
                    let mut dx = vec![0.0; c * h * w];
                    gemm(kk, co, p, weight.data(), 1, kk, dys, p, 1, &mut dx, false);
                    dx
                });
                return (dw, dx);
            }
            let mut cols = vec![0.0; kk * p];
            im2col(xs, (c, h, w), g, ow, 0, oh, &mut cols);
            gemm(co, p, kk, dys, p, 1, &cols, 1, p, &mut dw, false);
            let dx = need_dx.then(|| {
                gemm(kk, co, p, weight.data(), 1, kk, dys, p, 1, &mut cols, false);
                let mut dx = vec![0.0; c * h * w];
                col2im(&cols, (c, h, w), g, (oh, ow), &mut dx);
                dx
            });
            (dw, dx)
        })
        .collect();
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let sample = c * h * w;
    for (i, (pdw, pdx)) in parts.into_iter().enumerate() {
        for (a, b) in dw.data_mut().iter_mut().zip(&pdw) {
            *a += b;
        }
        if let (Some(dx), Some(pdx)) = (dx.as_mut(), pdx) {
            dx.data_mut()[i * sample..(i + 1) * sample].copy_from_slice(&pdx);
        }
    }
    (dx, dw)
}

fn depthwise_backward(x: &Tensor, weight: &Tensor, dy: &Tensor, g: ConvGeom, need_dx: bool) -> (Option<Tensor>, Tensor) {
    let [_, c, h, w] = x.shape();
    let [_, _, oh, ow] = dy.shape();
    let k = g.kernel;
    let pad = g.pad() as isize;
    let mut dx = Tensor::zeros(x.shape());
    let partial: Vec<Vec<f64>> = dx
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .map(|(idx, dxp)| {
            let (i, ci) = (idx / c, idx % c);
            let plane = x.plane(i, ci);
            let dyp = dy.plane(i, ci);
            let wk = &weight.data()[ci * k * k..(ci + 1) * k * k];
            let mut dwk = vec![0.0; k * k];
            for ky in 0..k {
                let oyoff = (ky * g.dilation) as isize - pad;
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let oxoff = (kx * g.dilation) as isize - pad;
                    let (lo, hi) = tap_range(oxoff, g.stride, w, ow);
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * g.stride) as isize + oyoff;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        let dyr = &dyp[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            let ix = (ox * g.stride) as isize + oxoff;
                            let gv = dyr[ox];
                            acc += gv * plane[row + ix as usize];
                            if need_dx {
                                dxp[row + ix as usize] += wv * gv;
                            }
                        }
                    }
                    dwk[ky * k + kx] = acc;
                }
            }
            dwk
        })
        .collect();
    let mut dw = Tensor::zeros(weight.shape());
    for (idx, p) in partial.iter().enumerate() {
        let ci = idx % c;
        for (a, b) in dw.data_mut()[ci * k * k..(ci + 1) * k * k].iter_mut().zip(p) {
            *a += b;
        }
    }
    (need_dx.then_some(dx), dw)
}

/// Per-channel statistics saved by a training-mode batch-norm forward.
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
}

pub fn bn_forward_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, BnCache) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x.plane(i, ci).iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            v += x.plane(i, ci).iter().map(|a| (a - mu) * (a - mu)).sum::<f64>();
        }
        mean[ci] = mu;
        var[ci] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = Tensor::zeros(x.shape());
    xhat.data_mut()
        .par_chunks_mut(hw)
        .zip(y.data_mut().par_chunks_mut(hw))
        .enumerate()
        .for_each(|(idx, (xh, yp))| {
            let ci = idx % c;
            let (mu, is, ga, be) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for (a, b) in xh.iter_mut().zip(yp.iter_mut()) {
                *a = (*a - mu) * is;
                *b = ga * *a + be;
            }
        });
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

pub fn bn_forward_infer(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Tensor {
    let c = x.c();
    let hw = x.h() * x.w();
    let mut y = x.clone();
    y.data_mut().par_chunks_mut(hw).enumerate().for_each(|(idx, p)| {
        let ci = idx % c;
        let scale = gamma[ci] / (var[ci] + BN_EPS).sqrt();
        let shift = beta[ci] - mean[ci] * scale;
        p.iter_mut().for_each(|v| *v = *v * scale + shift);
    });
    y
}

/// Returns `(dx, dgamma, dbeta)` for training-mode batch norm.
pub fn bn_backward_train(dy: &Tensor, cache: &BnCache, gamma: &[f64]) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ci in 0..c {
            let d = dy.plane(i, ci);
            let xh = cache.xhat.plane(i, ci);
            dbeta[ci] += d.iter().sum::<f64>();
            dgamma[ci] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    dx.data_mut().par_chunks_mut(hw).enumerate().for_each(|(idx, out)| {
        let (i, ci) = (idx / c, idx % c);
        let d = dy.plane(i, ci);
        let xh = cache.xhat.plane(i, ci);
        let k = gamma[ci] * cache.inv_std[ci] / m;
        for ((o, &dv), &xv) in out.iter_mut().zip(d).zip(xh) {
            *o = k * (m * dv - dbeta[ci] - xv * dgamma[ci]);
        }
    });
    (dx, dgamma, dbeta)
}

/// Inference-mode batch norm is affine; returns `(dx, dgamma, dbeta)`.
pub fn bn_backward_infer(x: &Tensor, dy: &Tensor, gamma: &[f64], mean: &[f64], var: &[f64]) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = dy.shape();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ci in 0..c {
            let is = 1.0 / (var[ci] + BN_EPS).sqrt();
            let d = dy.plane(i, ci);
            dbeta[ci] += d.iter().sum::<f64>();
            dgamma[ci] += d
                .iter()
                .zip(x.plane(i, ci))
                .map(|(a, b)| a * (b - mean[ci]) * is)
                .sum::<f64>();
        }
    }
    let hw = dy.h() * dy.w();
    let mut dx = dy.clone();
    dx.data_mut().par_chunks_mut(hw).enumerate().for_each(|(idx, p)| {
        let ci = idx % c;
        let scale = gamma[ci] / (var[ci] + BN_EPS).sqrt();
        p.iter_mut().for_each(|v| *v *= scale);
    });
    (dx, dgamma, dbeta)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(y.data()) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add needs equal shapes");
    let mut y = a.clone();
    y.add_assign(b);
    y
}

/// Bilinear resize of every plane to `(oh, ow)`.
pub fn resize_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let xs = bilinear_taps(w, ow);
    let ys = bilinear_taps(h, oh);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    y.data_mut().par_chunks_mut(oh * ow).enumerate().for_each(|(idx, out)| {
        resize_plane(&x.data()[idx * h * w..(idx + 1) * h * w], (w, h), out, (ow, oh), &xs, &ys);
    });
    y
}

pub fn resize_backward(dy: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let [_, _, h, w] = in_shape;
    let [_, _, oh, ow] = dy.shape();
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let xs = bilinear_taps(w, ow);
    let ys = bilinear_taps(h, oh);
    let mut dx = Tensor::zeros(in_shape);
    dx.data_mut().par_chunks_mut(h * w).enumerate().for_each(|(idx, plane)| {
        let d = &dy.data()[idx * oh * ow..(idx + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let g = d[oy * ow + ox];
                plane[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                plane[y0 * w + x1] += g * (1.0 - wy) * wx;
                plane[y1 * w + x0] += g * wy * (1.0 - wx);
                plane[y1 * w + x1] += g * wy * wx;
            }
        }
    });
    dx
}
