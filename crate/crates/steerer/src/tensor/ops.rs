//! Forward kernels, backward kernels and the tape-recording entry points.
//!
//! All kernels are direct (no im2col) and accumulate in fixed row-major
//! order, so results are bit-identical across runs.

use super::tape::{Rule, Tape, Var};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Running mean/variance buffers for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Saved context for the batch-norm backward pass.
#[derive(Debug)]
pub(crate) struct BnContext {
    pub xhat: Vec<f64>,
    pub invstd: Vec<f64>,
    pub training: bool,
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Output rows `oh` for which `oh*stride + k_off - pad` lands inside `[0, in_len)`.
#[inline]
fn valid_out_range(out_len: usize, in_len: usize, stride: usize, k_off: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad <= k_off {
        return (1, 0); // empty
    }
    let hi_raw = (in_len - 1 + pad - k_off) / stride;
    (lo, hi_raw.min(out_len.saturating_sub(1)))
}

/// Fused single-pass kernel for the dominant 3x3 / stride 1 / pad 1 case.
fn conv3x3_s1_p1_accumulate(
    out: &mut [f64],
    xrow_plane: &[f64],
    taps: &[f64; 9],
    h: usize,
    w: usize,
) {
    if w < 2 {
        // Degenerate width: fall through tap by tap.
        for r in 0..h {
            for (kh, tap_row) in taps.chunks_exact(3).enumerate() {
                let ih = r + kh;
                if ih < 1 || ih > h {
                    continue;
                }
                out[r] += tap_row[1] * xrow_plane[ih - 1];
            }
        }
        return;
    }
    for r in 0..h {
        let lo = r.saturating_sub(1);
        let hi = (r + 1).min(h - 1);
        for ih in lo..=hi {
            let kh = ih + 1 - r;
            let t = &taps[kh * 3..kh * 3 + 3];
            let xrow = &xrow_plane[ih * w..(ih + 1) * w];
            let orow = &mut out[r * w..(r + 1) * w];
            orow[0] += t[1] * xrow[0] + t[2] * xrow[1];
            orow[w - 1] += t[0] * xrow[w - 2] + t[1] * xrow[w - 1];
            let (t0, t1, t2) = (t[0], t[1], t[2]);
            for c in 1..w - 1 {
                orow[c] += t0 * xrow[c - 1] + t1 * xrow[c] + t2 * xrow[c + 1];
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = vec![0.0; os.numel()];
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();

    if k == 3 && stride == 1 && pad == 1 {
        for n in 0..xs.n {
            for oc in 0..ws.n {
                let obase = (n * ws.n + oc) * oh * ow;
                out[obase..obase + oh * ow].fill(bd[oc]);
                for ic in 0..xs.c {
                    let xbase = (n * xs.c + ic) * xs.h * xs.w;
                    let wbase = (oc * ws.c + ic) * 9;
                    let taps: &[f64; 9] = wd[wbase..wbase + 9].try_into().unwrap();
                    conv3x3_s1_p1_accumulate(
                        &mut out[obase..obase + oh * ow],
                        &xd[xbase..xbase + xs.h * xs.w],
                        taps,
                        xs.h,
                        xs.w,
                    );
                }
            }
        }
        return Tensor::new(os, out).expect("conv2d output shape");
    }

    for n in 0..xs.n {
        for oc in 0..ws.n {
            let obase = (n * ws.n + oc) * oh * ow;
            out[obase..obase + oh * ow].fill(bd[oc]);
            for ic in 0..xs.c {
                let xbase = (n * xs.c + ic) * xs.h * xs.w;
                let wbase = (oc * ws.c + ic) * k * k;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_out_range(oh, xs.h, stride, kh, pad);
                    for kw in 0..k {
                        let wv = wd[wbase + kh * k + kw];
                        let (ow_lo, ow_hi) = valid_out_range(ow, xs.w, stride, kw, pad);
                        if ow_lo > ow_hi || oh_lo > oh_hi {
                            continue;
                        }
                        let iw0 = ow_lo * stride + kw - pad;
                        let span = ow_hi - ow_lo + 1;
                        for r in oh_lo..=oh_hi {
                            let ih = r * stride + kh - pad;
                            let xrow = &xd[xbase + ih * xs.w + iw0..];
                            let orow = &mut out[obase + r * ow + ow_lo..obase + r * ow + ow_lo + span];
                            if stride == 1 {
                                for (o, &x) in orow.iter_mut().zip(xrow) {
                                    *o += wv * x;
                                }
                            } else {
                                for (o, x) in orow.iter_mut().zip(xrow.iter().step_by(stride)) {
                                    *o += wv * x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out).expect("conv2d output shape")
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    out_shape: Shape,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
    need_gb: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let xd = x.data();
    let wd = w.data();

    let mut gx = if need_gx { Some(vec![0.0; xs.numel()]) } else { None };
    let mut gw = if need_gw { Some(vec![0.0; ws.numel()]) } else { None };
    let mut gb = if need_gb { Some(vec![0.0; ws.n]) } else { None };

    if let Some(gb) = gb.as_mut() {
        for n in 0..xs.n {
            for oc in 0..ws.n {
                let obase = (n * ws.n + oc) * oh * ow;
                let mut acc = 0.0;
                for g in &gout[obase..obase + oh * ow] {
                    acc += g;
                }
                gb[oc] += acc;
            }
        }
    }

    if gx.is_none() && gw.is_none() {
        return (gx, gw, gb);
    }

    if k == 3 && stride == 1 && pad == 1 && xs.w >= 2 {
        let (h, w_len) = (xs.h, xs.w);
        for n in 0..xs.n {
            for oc in 0..ws.n {
                let obase = (n * ws.n + oc) * oh * ow;
                for ic in 0..xs.c {
                    let xbase = (n * xs.c + ic) * h * w_len;
                    let wbase = (oc * ws.c + ic) * 9;
                    for r in 0..h {
                        let lo = r.saturating_sub(1);
                        let hi = (r + 1).min(h - 1);
                        let grow = &gout[obase + r * w_len..obase + (r + 1) * w_len];
                        for ih in lo..=hi {
                            let kh = ih + 1 - r;
                            let t0 = wd[wbase + kh * 3];
                            let t1 = wd[wbase + kh * 3 + 1];
                            let t2 = wd[wbase + kh * 3 + 2];
                            if let Some(gx) = gx.as_mut() {
                                let gxrow = &mut gx[xbase + ih * w_len..xbase + (ih + 1) * w_len];
                                gxrow[0] += t1 * grow[0] + t0 * grow[1];
                                gxrow[w_len - 1] += t2 * grow[w_len - 2] + t1 * grow[w_len - 1];
                                for i in 1..w_len - 1 {
                                    gxrow[i] += t2 * grow[i - 1] + t1 * grow[i] + t0 * grow[i + 1];
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                let xrow = &xd[xbase + ih * w_len..xbase + (ih + 1) * w_len];
                                let mut d0 = 0.0;
                                let mut d1 = grow[0] * xrow[0];
                                let mut d2 = grow[0] * xrow[1];
                                for c in 1..w_len - 1 {
                                    d0 += grow[c] * xrow[c - 1];
                                    d1 += grow[c] * xrow[c];
                                    d2 += grow[c] * xrow[c + 1];
                                }
                                d0 += grow[w_len - 1] * xrow[w_len - 2];
                                d1 += grow[w_len - 1] * xrow[w_len - 1];
                                gw[wbase + kh * 3] += d0;
                                gw[wbase + kh * 3 + 1] += d1;
                                gw[wbase + kh * 3 + 2] += d2;
                            }
                        }
                    }
                }
            }
        }
        return (gx, gw, gb);
    }

    for n in 0..xs.n {
        for oc in 0..ws.n {
            let obase = (n * ws.n + oc) * oh * ow;
            for ic in 0..xs.c {
                let xbase = (n * xs.c + ic) * xs.h * xs.w;
                let wbase = (oc * ws.c + ic) * k * k;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_out_range(oh, xs.h, stride, kh, pad);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = valid_out_range(ow, xs.w, stride, kw, pad);
                        if ow_lo > ow_hi || oh_lo > oh_hi {
                            continue;
                        }
                        let wv = wd[wbase + kh * k + kw];
                        let iw0 = ow_lo * stride + kw - pad;
                        let span = ow_hi - ow_lo + 1;
                        let mut wacc = 0.0;
                        for r in oh_lo..=oh_hi {
                            let ih = r * stride + kh - pad;
                            let grow = &gout[obase + r * ow + ow_lo..obase + r * ow + ow_lo + span];
                            let xrow_start = xbase + ih * xs.w + iw0;
                            if let Some(gx) = gx.as_mut() {
                                let gxrow = &mut gx[xrow_start..];
                                if stride == 1 {
                                    for (g, &go) in gxrow.iter_mut().zip(grow) {
                                        *g += wv * go;
                                    }
                                } else {
                                    for (g, &go) in gxrow.iter_mut().step_by(stride).zip(grow) {
                                        *g += wv * go;
                                    }
                                }
                            }
                            if gw.is_some() {
                                let xrow = &xd[xrow_start..];
                                if stride == 1 {
                                    for (&x, &go) in xrow.iter().zip(grow) {
                                        wacc += go * x;
                                    }
                                } else {
                                    for (&x, &go) in xrow.iter().step_by(stride).zip(grow) {
                                        wacc += go * x;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[wbase + kh * k + kw] += wacc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

pub(crate) fn batch_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    training: bool,
) -> (Tensor, BnContext) {
    let xs = x.shape();
    let plane = xs.h * xs.w;
    let m = (xs.n * plane) as f64;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();

    let mut out = vec![0.0; xs.numel()];
    let mut xhat = vec![0.0; xs.numel()];
    let mut invstd = vec![0.0; xs.c];

    for c in 0..xs.c {
        let (mean, var) = if training {
            let mut sum = 0.0;
            for n in 0..xs.n {
                let base = (n * xs.c + c) * plane;
                for &v in &xd[base..base + plane] {
                    sum += v;
                }
            }
            let mean = sum / m;
            let mut ss = 0.0;
            for n in 0..xs.n {
                let base = (n * xs.c + c) * plane;
                for &v in &xd[base..base + plane] {
                    let d = v - mean;
                    ss += d * d;
                }
            }
            let var = ss / m;
            stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean;
            stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * var;
            (mean, var)
        } else {
            (stats.mean[c], stats.var[c])
        };
        let istd = 1.0 / (var + BN_EPS).sqrt();
        invstd[c] = istd;
        for n in 0..xs.n {
            let base = (n * xs.c + c) * plane;
            for i in base..base + plane {
                let h = (xd[i] - mean) * istd;
                xhat[i] = h;
                out[i] = gd[c] * h + bd[c];
            }
        }
    }

    (
        Tensor::new(xs, out).expect("bn output shape"),
        BnContext {
            xhat,
            invstd,
            training,
        },
    )
}

pub(crate) fn batch_norm_backward(
    x_shape: Shape,
    gamma: &Tensor,
    ctx: &BnContext,
    gout: &[f64],
    need_gx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = x_shape.h * x_shape.w;
    let m = (x_shape.n * plane) as f64;
    let gd = gamma.data();

    let mut gx = if need_gx {
        Some(vec![0.0; x_shape.numel()])
    } else {
        None
    };
    let mut ggamma = vec![0.0; x_shape.c];
    let mut gbeta = vec![0.0; x_shape.c];

    for c in 0..x_shape.c {
        let istd = ctx.invstd[c];
        let mut sum_g = 0.0;
        let mut sum_gh = 0.0;
        for n in 0..x_shape.n {
            let base = (n * x_shape.c + c) * plane;
            for i in base..base + plane {
                sum_g += gout[i];
                sum_gh += gout[i] * ctx.xhat[i];
            }
        }
        ggamma[c] = sum_gh;
        gbeta[c] = sum_g;
        if let Some(gx) = gx.as_mut() {
            if ctx.training {
                // d/dx of batch statistics included.
                let k1 = gd[c] * istd;
                for n in 0..x_shape.n {
                    let base = (n * x_shape.c + c) * plane;
                    for i in base..base + plane {
                        gx[i] = k1 * (gout[i] - sum_g / m - ctx.xhat[i] * sum_gh / m);
                    }
                }
            } else {
                let k1 = gd[c] * istd;
                for n in 0..x_shape.n {
                    let base = (n * x_shape.c + c) * plane;
                    for i in base..base + plane {
                        gx[i] = k1 * gout[i];
                    }
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::new(
        x.shape(),
        x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    )
    .expect("relu shape")
}

pub(crate) fn relu_backward(x: &Tensor, gout: &[f64]) -> Vec<f64> {
    // Subgradient at exactly zero is zero.
    x.data()
        .iter()
        .zip(gout)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

// ---------------------------------------------------------------------------
// bilinear upsampling (factor 2, half-pixel centers, edges clamped)
// ---------------------------------------------------------------------------

/// (low index, high index, fraction toward the high index) per output sample.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2x_forward(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let (oh, ow) = (xs.h * 2, xs.w * 2);
    let rows = bilinear_taps(oh, xs.h);
    let cols = bilinear_taps(ow, xs.w);
    let os = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = vec![0.0; os.numel()];
    let xd = x.data();
    for nc in 0..xs.n * xs.c {
        let xbase = nc * xs.h * xs.w;
        let obase = nc * oh * ow;
        for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
            let row0 = &xd[xbase + r0 * xs.w..xbase + r0 * xs.w + xs.w];
            let row1 = &xd[xbase + r1 * xs.w..xbase + r1 * xs.w + xs.w];
            let orow = &mut out[obase + r * ow..obase + (r + 1) * ow];
            for (c, &(c0, c1, fc)) in cols.iter().enumerate() {
                let top = row0[c0] * (1.0 - fc) + row0[c1] * fc;
                let bot = row1[c0] * (1.0 - fc) + row1[c1] * fc;
                orow[c] = top * (1.0 - fr) + bot * fr;
            }
        }
    }
    Tensor::new(os, out).expect("upsample shape")
}

pub(crate) fn upsample2x_backward(x_shape: Shape, gout: &[f64]) -> Vec<f64> {
    let (oh, ow) = (x_shape.h * 2, x_shape.w * 2);
    let rows = bilinear_taps(oh, x_shape.h);
    let cols = bilinear_taps(ow, x_shape.w);
    let mut gx = vec![0.0; x_shape.numel()];
    for nc in 0..x_shape.n * x_shape.c {
        let xbase = nc * x_shape.h * x_shape.w;
        let obase = nc * oh * ow;
        for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (c, &(c0, c1, fc)) in cols.iter().enumerate() {
                let g = gout[obase + r * ow + c];
                gx[xbase + r0 * x_shape.w + c0] += g * (1.0 - fr) * (1.0 - fc);
                gx[xbase + r0 * x_shape.w + c1] += g * (1.0 - fr) * fc;
                gx[xbase + r1 * x_shape.w + c0] += g * fr * (1.0 - fc);
                gx[xbase + r1 * x_shape.w + c1] += g * fr * fc;
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// softmax across channels
// ---------------------------------------------------------------------------

pub(crate) fn channel_softmax_forward(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let plane = xs.h * xs.w;
    let xd = x.data();
    let mut out = vec![0.0; xs.numel()];
    for n in 0..xs.n {
        let nbase = n * xs.c * plane;
        for p in 0..plane {
            let mut maxv = f64::NEG_INFINITY;
            for c in 0..xs.c {
                maxv = maxv.max(xd[nbase + c * plane + p]);
            }
            let mut denom = 0.0;
            for c in 0..xs.c {
                let e = (xd[nbase + c * plane + p] - maxv).exp();
                out[nbase + c * plane + p] = e;
                denom += e;
            }
            for c in 0..xs.c {
                out[nbase + c * plane + p] /= denom;
            }
        }
    }
    Tensor::new(xs, out).expect("softmax shape")
}

pub(crate) fn channel_softmax_backward(y: &Tensor, gout: &[f64]) -> Vec<f64> {
    let ys = y.shape();
    let plane = ys.h * ys.w;
    let yd = y.data();
    let mut gx = vec![0.0; ys.numel()];
    for n in 0..ys.n {
        let nbase = n * ys.c * plane;
        for p in 0..plane {
            let mut dot = 0.0;
            for c in 0..ys.c {
                let i = nbase + c * plane + p;
                dot += gout[i] * yd[i];
            }
            for c in 0..ys.c {
                let i = nbase + c * plane + p;
                gx[i] = yd[i] * (gout[i] - dot);
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// concat / slice along channels
// ---------------------------------------------------------------------------

pub(crate) fn concat_channels_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    let plane = sa.h * sa.w;
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut out = vec![0.0; os.numel()];
    for n in 0..sa.n {
        let dst = n * os.c * plane;
        out[dst..dst + sa.c * plane]
            .copy_from_slice(&a.data()[n * sa.c * plane..(n + 1) * sa.c * plane]);
        out[dst + sa.c * plane..dst + os.c * plane]
            .copy_from_slice(&b.data()[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    Tensor::new(os, out).expect("concat shape")
}

pub(crate) fn concat_channels_backward(sa: Shape, sb: Shape, gout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let plane = sa.h * sa.w;
    let oc = sa.c + sb.c;
    let mut ga = vec![0.0; sa.numel()];
    let mut gb = vec![0.0; sb.numel()];
    for n in 0..sa.n {
        let src = n * oc * plane;
        ga[n * sa.c * plane..(n + 1) * sa.c * plane]
            .copy_from_slice(&gout[src..src + sa.c * plane]);
        gb[n * sb.c * plane..(n + 1) * sb.c * plane]
            .copy_from_slice(&gout[src + sa.c * plane..src + oc * plane]);
    }
    (ga, gb)
}

pub(crate) fn slice_channels_forward(x: &Tensor, from: usize, to: usize) -> Tensor {
    let xs = x.shape();
    let plane = xs.h * xs.w;
    let os = Shape::new(xs.n, to - from, xs.h, xs.w);
    let mut out = vec![0.0; os.numel()];
    for n in 0..xs.n {
        let src = (n * xs.c + from) * plane;
        let dst = n * os.c * plane;
        out[dst..dst + os.c * plane].copy_from_slice(&x.data()[src..src + os.c * plane]);
    }
    Tensor::new(os, out).expect("slice shape")
}

pub(crate) fn slice_channels_backward_into(
    x_shape: Shape,
    from: usize,
    to: usize,
    gout: &[f64],
    gx: &mut [f64],
) {
    let plane = x_shape.h * x_shape.w;
    let oc = to - from;
    for n in 0..x_shape.n {
        let dst = (n * x_shape.c + from) * plane;
        let src = n * oc * plane;
        for i in 0..oc * plane {
            gx[dst + i] += gout[src + i];
        }
    }
}

// ---------------------------------------------------------------------------
// hadamard product (optionally broadcasting a 1-channel mask)
// ---------------------------------------------------------------------------

pub(crate) fn hadamard_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    let mut out = vec![0.0; sa.numel()];
    if sa == sb {
        for (o, (&x, &y)) in out.iter_mut().zip(a.data().iter().zip(b.data())) {
            *o = x * y;
        }
    } else {
        // b has one channel, broadcast over a's channels.
        let plane = sa.h * sa.w;
        for n in 0..sa.n {
            let bbase = n * plane;
            for c in 0..sa.c {
                let abase = (n * sa.c + c) * plane;
                for p in 0..plane {
                    out[abase + p] = a.data()[abase + p] * b.data()[bbase + p];
                }
            }
        }
    }
    Tensor::new(sa, out).expect("hadamard shape")
}

pub(crate) fn hadamard_backward(
    a: &Tensor,
    b: &Tensor,
    gout: &[f64],
    need_ga: bool,
    need_gb: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        let ga = need_ga.then(|| {
            gout.iter()
                .zip(b.data())
                .map(|(&g, &y)| g * y)
                .collect::<Vec<_>>()
        });
        let gb = need_gb.then(|| {
            gout.iter()
                .zip(a.data())
                .map(|(&g, &x)| g * x)
                .collect::<Vec<_>>()
        });
        (ga, gb)
    } else {
        let plane = sa.h * sa.w;
        let mut ga = need_ga.then(|| vec![0.0; sa.numel()]);
        let mut gb = need_gb.then(|| vec![0.0; sb.numel()]);
        for n in 0..sa.n {
            let bbase = n * plane;
            for c in 0..sa.c {
                let abase = (n * sa.c + c) * plane;
                for p in 0..plane {
                    if let Some(ga) = ga.as_mut() {
                        ga[abase + p] = gout[abase + p] * b.data()[bbase + p];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[bbase + p] += gout[abase + p] * a.data()[abase + p];
                    }
                }
            }
        }
        (ga, gb)
    }
}

// ---------------------------------------------------------------------------
// masked mse
// ---------------------------------------------------------------------------

pub(crate) fn masked_mse_forward(pred: &Tensor, target: &Tensor, mask: &Tensor) -> f64 {
    let mut acc = 0.0;
    for ((&p, &t), &m) in pred.data().iter().zip(target.data()).zip(mask.data()) {
        let d = m * (p - t);
        acc += d * d;
    }
    acc * 0.5
}

pub(crate) fn masked_mse_backward(pred: &Tensor, target: &Tensor, mask: &Tensor, g: f64) -> Vec<f64> {
    pred.data()
        .iter()
        .zip(target.data())
        .zip(mask.data())
        .map(|((&p, &t), &m)| g * m * m * (p - t))
        .collect()
}

// ---------------------------------------------------------------------------
// tape-recording entry points
// ---------------------------------------------------------------------------

impl Tape {
    /// 2-D convolution with square 1x1 or 3x3 kernels, stride 1 or 2, zero
    /// padding. Differentiable in the input, the kernel and the bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if ws.h != ws.w || !(ws.h == 1 || ws.h == 3) {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square 1x1 or 3x3, got {}x{}", ws.h, ws.w),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid("conv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        if xs.c != ws.c {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: ws.c,
                got: xs.c,
            });
        }
        if bs.c != ws.n || bs.n != 1 || bs.h != 1 || bs.w != 1 {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: bs.dims(),
                right: [1, ws.n, 1, 1],
            });
        }
        if xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w {
            return Err(Error::ShapeMismatch {
                op: "conv2d input smaller than kernel",
                left: xs.dims(),
                right: ws.dims(),
            });
        }
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(out, rg, Rule::Conv2d { x, w, b, stride, pad }))
    }

    /// Batch normalization over (N, H, W) per channel; epsilon 1e-5, running
    /// stats updated with momentum 0.1 in training mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        training: bool,
    ) -> Result<Var> {
        let xs = self.shape(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v);
            if s.c != xs.c || s.n != 1 || s.h != 1 || s.w != 1 {
                return Err(Error::ChannelMismatch {
                    op: if name == "gamma" {
                        "batch_norm gamma"
                    } else {
                        "batch_norm beta"
                    },
                    expected: xs.c,
                    got: s.c,
                });
            }
        }
        if stats.mean.len() != xs.c {
            return Err(Error::ChannelMismatch {
                op: "batch_norm running stats",
                expected: xs.c,
                got: stats.mean.len(),
            });
        }
        let (out, ctx) =
            batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), stats, training);
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(out, rg, Rule::BatchNorm { x, gamma, beta, ctx }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu_forward(self.value(x));
        let rg = self.requires_grad(x);
        self.push(out, rg, Rule::Relu { x })
    }

    /// Bilinear upsampling by a power-of-two factor (chained x2 stages).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample_bilinear", "factor must be >= 1"));
        }
        if !factor.is_power_of_two() {
            return Err(Error::invalid(
                "upsample_bilinear",
                format!("factor must be a power of two, got {factor}"),
            ));
        }
        let mut cur = x;
        let mut f = factor;
        while f > 1 {
            let out = upsample2x_forward(self.value(cur));
            let rg = self.requires_grad(cur);
            cur = self.push(out, rg, Rule::Upsample2x { x: cur });
            f /= 2;
        }
        Ok(cur)
    }

    /// Softmax over the channel dimension, numerically stabilized.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.c < 2 {
            return Err(Error::ChannelMismatch {
                op: "channel_softmax",
                expected: 2,
                got: xs.c,
            });
        }
        let out = channel_softmax_forward(self.value(x));
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Rule::ChannelSoftmax { x }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: sa.dims(),
                right: sb.dims(),
            });
        }
        let out = concat_channels_forward(self.value(a), self.value(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, rg, Rule::ConcatChannels { a, b }))
    }

    /// View of channels `from..to` as a new tensor.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let xs = self.shape(x);
        if from > to || to > xs.c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {from}..{to} out of bounds for {} channels", xs.c),
            ));
        }
        let out = slice_channels_forward(self.value(x), from, to);
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Rule::SliceChannels { x, from, to }))
    }

    /// Elementwise product; `b` may have a single channel that broadcasts
    /// over `a`'s channels.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast_ok = sb.c == 1 && sa.n == sb.n && sa.h == sb.h && sa.w == sb.w;
        if sa != sb && !broadcast_ok {
            return Err(Error::ShapeMismatch {
                op: "hadamard",
                left: sa.dims(),
                right: sb.dims(),
            });
        }
        let out = hadamard_forward(self.value(a), self.value(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, rg, Rule::Hadamard { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: sa.dims(),
                right: sb.dims(),
            });
        }
        let out = Tensor::new(
            sa,
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )
        .expect("add shape");
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, rg, Rule::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = Tensor::new(
            self.shape(x),
            self.value(x).data().iter().map(|&v| v * factor).collect(),
        )
        .expect("scale shape");
        let rg = self.requires_grad(x);
        self.push(out, rg, Rule::Scale { x, factor })
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(out, rg, Rule::Sum { x })
    }

    /// Half the sum of squared masked residuals: sum((mask*(pred-target))^2)/2.
    ///
    /// `target` and `mask` must be constants; the result is differentiable
    /// with respect to `pred` only.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        let sp = self.shape(pred);
        for other in [target, mask] {
            let so = self.shape(other);
            if so != sp {
                return Err(Error::ShapeMismatch {
                    op: "masked_mse",
                    left: sp.dims(),
                    right: so.dims(),
                });
            }
            if self.requires_grad(other) {
                return Err(Error::invalid(
                    "masked_mse",
                    "target and mask must not require gradients",
                ));
            }
        }
        let out = Tensor::scalar(masked_mse_forward(
            self.value(pred),
            self.value(target),
            self.value(mask),
        ));
        let rg = self.requires_grad(pred);
        Ok(self.push(out, rg, Rule::MaskedMse { pred, target, mask }))
    }
}
