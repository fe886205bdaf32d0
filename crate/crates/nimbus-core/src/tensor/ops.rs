//! Forward and backward compute kernels.
//!
//! Kernels work on raw `f32` slices so the tape can hand out disjoint
//! borrows of values and gradients. Every backward kernel accumulates into
//! its destination; nothing here overwrites a gradient buffer.
//!
//! Convolution is im2col plus the tiled GEMM from [`super::gemm`], executed
//! over panels of up to [`PW`] output pixels so the patch matrix stays
//! cache-resident instead of round-tripping through memory at full image
//! size. For one output element the reduction order is: bias first, then the
//! kernel-window terms row-major over `(ci, kh, kw)` ascending; across a
//! batch, images are processed in ascending order. The input-gradient scatter
//! visits output-pixel panels in ascending order and, within a panel, patch
//! rows `(ci, kh, kw)` ascending. None of these orders change between calls.

use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm_accumulate, gemm_strip, sum_fixed, transpose};
use crate::tensor::Shape;

/// Output pixels per convolution panel. At typical working shapes a panel
/// covers whole output rows, so the patch gather runs on long spans, while
/// the `k_rows x PW` patch matrix still fits comfortably in cache.
const PW: usize = 128;

/// Resolved convolution geometry, validated once at op record time.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn compute(input: Shape, weight: Shape, bias: Shape, stride: usize, pad: usize) -> Result<ConvDims> {
        if stride == 0 {
            return Err(Error::BadShape { op: "conv2d", shape: input, reason: "stride must be >= 1".into() });
        }
        if weight.c != input.c {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: input, rhs: weight });
        }
        if bias.n != 1 || bias.c != weight.n || bias.h != 1 || bias.w != 1 {
            return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: weight, rhs: bias });
        }
        let (h_p, w_p) = (input.h + 2 * pad, input.w + 2 * pad);
        if weight.h > h_p || weight.w > w_p {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: input,
                reason: format!("kernel {}x{} exceeds padded input {}x{}", weight.h, weight.w, h_p, w_p),
            });
        }
        Ok(ConvDims {
            n: input.n,
            ci: input.c,
            h: input.h,
            w: input.w,
            co: weight.n,
            kh: weight.h,
            kw: weight.w,
            stride,
            pad,
            oh: (h_p - weight.h) / stride + 1,
            ow: (w_p - weight.w) / stride + 1,
        })
    }

    /// Patch-matrix row count: one row per (input channel, kernel cell).
    pub fn k_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.co, self.oh, self.ow)
    }

    fn in_plane(&self) -> usize {
        self.ci * self.h * self.w
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Reusable scratch buffers for the convolution paths. Only capacity is
/// retained between uses; contents are always rewritten before reads.
#[derive(Default)]
pub(crate) struct Scratch {
    cols: Vec<f32>,
    cols2: Vec<f32>,
    dout_t: Vec<f32>,
    dwt: Vec<f32>,
    wt: Vec<f32>,
}

fn ensure_len(buf: &mut Vec<f32>, len: usize) -> &mut [f32] {
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    &mut buf[..len]
}

/// Expands output pixels `p0 .. p0 + width` of one image `(ci, h, w)` into a
/// `k_rows x width` patch panel with row stride `width`. Patch row
/// `(c*kh + u)*kw + v` at output pixel `(oy, ox)` holds
/// `img[c, oy*stride + u - pad, ox*stride + v - pad]`, zero outside.
fn im2col_panel(panel: &mut [f32], img: &[f32], d: &ConvDims, p0: usize, width: usize) {
    debug_assert_eq!(panel.len(), d.k_rows() * width);
    debug_assert!(p0 + width <= d.out_pixels());
    for c in 0..d.ci {
        let plane = &img[c * d.h * d.w..][..d.h * d.w];
        for u in 0..d.kh {
            for v in 0..d.kw {
                let krow = &mut panel[((c * d.kh + u) * d.kw + v) * width..][..width];
                // A panel can straddle output rows; handle one row segment
                // at a time so each segment maps to one input row.
                let mut i = 0;
                while i < width {
                    let (oy, ox0) = ((p0 + i) / d.ow, (p0 + i) % d.ow);
                    let seg = (width - i).min(d.ow - ox0);
                    let dst = &mut krow[i..i + seg];
                    let iy = (oy * d.stride + u) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                    } else {
                        let src_row = &plane[iy as usize * d.w..][..d.w];
                        if d.stride == 1 {
                            let ix0 = (ox0 + v) as isize - d.pad as isize;
                            let lo = ((-ix0).max(0) as usize).min(seg);
                            let hi = ((d.w as isize - ix0).max(0) as usize).clamp(lo, seg);
                            if lo >= hi {
                                dst.fill(0.0);
                            } else {
                                dst[..lo].fill(0.0);
                                dst[lo..hi].copy_from_slice(&src_row[(ix0 + lo as isize) as usize..][..hi - lo]);
                                dst[hi..].fill(0.0);
                            }
                        } else {
                            for (di, out) in dst.iter_mut().enumerate() {
                                let ix = ((ox0 + di) * d.stride + v) as isize - d.pad as isize;
                                *out = if ix >= 0 && (ix as usize) < d.w { src_row[ix as usize] } else { 0.0 };
                            }
                        }
                    }
                    i += seg;
                }
            }
        }
    }
}

/// Scatter-adds a patch panel back onto an image gradient. Mirror of
/// [`im2col_panel`] with `+=`; rows are visited in the same fixed order.
fn col2im_panel(img_grad: &mut [f32], panel: &[f32], d: &ConvDims, p0: usize, width: usize) {
    debug_assert_eq!(panel.len(), d.k_rows() * width);
    debug_assert!(p0 + width <= d.out_pixels());
    for c in 0..d.ci {
        let plane = &mut img_grad[c * d.h * d.w..][..d.h * d.w];
        for u in 0..d.kh {
            for v in 0..d.kw {
                let krow = &panel[((c * d.kh + u) * d.kw + v) * width..][..width];
                let mut i = 0;
                while i < width {
                    let (oy, ox0) = ((p0 + i) / d.ow, (p0 + i) % d.ow);
                    let seg = (width - i).min(d.ow - ox0);
                    let iy = (oy * d.stride + u) as isize - d.pad as isize;
                    if iy >= 0 && iy < d.h as isize {
                        let src = &krow[i..i + seg];
                        let dst_row = &mut plane[iy as usize * d.w..][..d.w];
                        if d.stride == 1 {
                            let ix0 = (ox0 + v) as isize - d.pad as isize;
                            let lo = ((-ix0).max(0) as usize).min(seg);
                            let hi = ((d.w as isize - ix0).max(0) as usize).clamp(lo, seg);
                            if lo < hi {
                                let dst = &mut dst_row[(ix0 + lo as isize) as usize..][..hi - lo];
                                for (dv, sv) in dst.iter_mut().zip(&src[lo..hi]) {
                                    *dv += sv;
                                }
                            }
                        } else {
                            for (di, &sv) in src.iter().enumerate() {
                                let ix = ((ox0 + di) * d.stride + v) as isize - d.pad as isize;
                                if ix >= 0 && (ix as usize) < d.w {
                                    dst_row[ix as usize] += sv;
                                }
                            }
                        }
                    }
                    i += seg;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    out: &mut [f32],
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    d: &ConvDims,
    scratch: &mut Scratch,
) {
    let npix = d.out_pixels();
    let k = d.k_rows();
    let cols = ensure_len(&mut scratch.cols, k * npix.min(PW));
    for img in 0..d.n {
        let in_img = &input[img * d.in_plane()..][..d.in_plane()];
        let out_img = &mut out[img * d.co * npix..][..d.co * npix];
        let mut p0 = 0;
        while p0 < npix {
            let wdt = (npix - p0).min(PW);
            let panel = &mut cols[..k * wdt];
            im2col_panel(panel, in_img, d, p0, wdt);
            for j in 0..d.co {
                out_img[j * npix + p0..][..wdt].fill(bias[j]);
            }
            gemm_strip::<true>(&mut out_img[p0..], npix, weight, panel, d.co, k, wdt);
            p0 += wdt;
        }
    }
}

/// Accumulates d(loss)/d(input) given the output gradient.
pub(crate) fn conv2d_backward_input(
    in_grad: &mut [f32],
    weight: &[f32],
    out_grad: &[f32],
    d: &ConvDims,
    scratch: &mut Scratch,
) {
    let npix = d.out_pixels();
    let k = d.k_rows();
    let Scratch { wt, cols2, dout_t, .. } = scratch;
    let wt = ensure_len(wt, k * d.co);
    transpose(wt, weight, d.co, k);
    let cols2 = ensure_len(cols2, k * npix.min(PW));
    let dpanel = ensure_len(dout_t, d.co * npix.min(PW));
    for img in 0..d.n {
        let og = &out_grad[img * d.co * npix..][..d.co * npix];
        let ig = &mut in_grad[img * d.in_plane()..][..d.in_plane()];
        let mut p0 = 0;
        while p0 < npix {
            let wdt = (npix - p0).min(PW);
            let dp = &mut dpanel[..d.co * wdt];
            for j in 0..d.co {
                dp[j * wdt..][..wdt].copy_from_slice(&og[j * npix + p0..][..wdt]);
            }
            let panel = &mut cols2[..k * wdt];
            gemm_strip::<false>(panel, wdt, wt, dp, k, d.co, wdt);
            col2im_panel(ig, panel, d, p0, wdt);
            p0 += wdt;
        }
    }
}

/// Accumulates d(loss)/d(weight) and d(loss)/d(bias) given the output
/// gradient. The weight gradient is built transposed (`k_rows x co`) so the
/// per-panel GEMM reduces over output pixels in ascending order (partials
/// round-trip through `f32` exactly, so panel boundaries leave no trace),
/// then folded back; images accumulate in ascending order.
pub(crate) fn conv2d_backward_weight_bias(
    w_grad: &mut [f32],
    b_grad: &mut [f32],
    input: &[f32],
    out_grad: &[f32],
    d: &ConvDims,
    scratch: &mut Scratch,
) {
    let npix = d.out_pixels();
    let k = d.k_rows();
    let Scratch { cols, dout_t, dwt, .. } = scratch;
    let cols = ensure_len(cols, k * npix.min(PW));
    let dt = ensure_len(dout_t, npix.min(PW) * d.co);
    let dwt = ensure_len(dwt, k * d.co);
    dwt.fill(0.0);
    for img in 0..d.n {
        let in_img = &input[img * d.in_plane()..][..d.in_plane()];
        let og = &out_grad[img * d.co * npix..][..d.co * npix];
        for (j, row) in og.chunks_exact(npix).enumerate() {
            b_grad[j] += sum_fixed(row);
        }
        let mut p0 = 0;
        while p0 < npix {
            let wdt = (npix - p0).min(PW);
            let panel = &mut cols[..k * wdt];
            im2col_panel(panel, in_img, d, p0, wdt);
            let dtp = &mut dt[..wdt * d.co];
            for j in 0..d.co {
                let src = &og[j * npix + p0..][..wdt];
                for (i, &g) in src.iter().enumerate() {
                    dtp[i * d.co + j] = g;
                }
            }
            gemm_accumulate(dwt, panel, dtp, k, wdt, d.co);
            p0 += wdt;
        }
    }
    for kk in 0..k {
        for j in 0..d.co {
            w_grad[j * k + kk] += dwt[kk * d.co + j];
        }
    }
}

/// 2x2 max pool. `argmax` receives, per output cell, the flat index of the
/// winning input cell; ties go to the first cell in row-major window order.
pub(crate) fn maxpool2_forward(out: &mut [f32], argmax: &mut Vec<u32>, input: &[f32], s: Shape) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    argmax.clear();
    argmax.resize(s.n * s.c * oh * ow, 0);
    let mut oi = 0;
    for plane_idx in 0..s.n * s.c {
        let base = plane_idx * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = base + (2 * oy) * s.w + 2 * ox;
                let mut best_idx = i00;
                let mut best = input[i00];
                for (di, cand) in [(1, input[i00 + 1]), (s.w, input[i00 + s.w]), (s.w + 1, input[i00 + s.w + 1])] {
                    if cand > best {
                        best = cand;
                        best_idx = i00 + di;
                    }
                }
                out[oi] = best;
                argmax[oi] = best_idx as u32;
                oi += 1;
            }
        }
    }
}

pub(crate) fn maxpool2_backward(in_grad: &mut [f32], out_grad: &[f32], argmax: &[u32]) {
    for (&am, &g) in argmax.iter().zip(out_grad) {
        in_grad[am as usize] += g;
    }
}

/// Nearest-neighbor 2x upsampling: every input cell becomes a 2x2 block.
pub(crate) fn upsample2_forward(out: &mut [f32], input: &[f32], s: Shape) {
    let (oh, ow) = (2 * s.h, 2 * s.w);
    for plane_idx in 0..s.n * s.c {
        let src_plane = &input[plane_idx * s.h * s.w..][..s.h * s.w];
        let dst_plane = &mut out[plane_idx * oh * ow..][..oh * ow];
        for y in 0..s.h {
            let src_row = &src_plane[y * s.w..][..s.w];
            let (row0, rest) = dst_plane[2 * y * ow..].split_at_mut(ow);
            let row1 = &mut rest[..ow];
            for (x, &v) in src_row.iter().enumerate() {
                row0[2 * x] = v;
                row0[2 * x + 1] = v;
            }
            row1.copy_from_slice(row0);
        }
    }
}

/// Backward of upsampling: the four replicated cells sum into the source, in
/// fixed (row0 left, row0 right, row1 left, row1 right) order.
pub(crate) fn upsample2_backward(in_grad: &mut [f32], out_grad: &[f32], s: Shape) {
    let (oh, ow) = (2 * s.h, 2 * s.w);
    for plane_idx in 0..s.n * s.c {
        let dst_plane = &mut in_grad[plane_idx * s.h * s.w..][..s.h * s.w];
        let src_plane = &out_grad[plane_idx * oh * ow..][..oh * ow];
        for y in 0..s.h {
            let dst_row = &mut dst_plane[y * s.w..][..s.w];
            let row0 = &src_plane[2 * y * ow..][..ow];
            let row1 = &src_plane[(2 * y + 1) * ow..][..ow];
            for (x, dv) in dst_row.iter_mut().enumerate() {
                *dv += (row0[2 * x] + row0[2 * x + 1]) + (row1[2 * x] + row1[2 * x + 1]);
            }
        }
    }
}

/// Channel concatenation: `a` fills channels `[0, ca)`, `b` fills `[ca, ca+cb)`.
pub(crate) fn concat_forward(out: &mut [f32], a: &[f32], b: &[f32], sa: Shape, sb: Shape) {
    let (pa, pb) = (sa.c * sa.h * sa.w, sb.c * sb.h * sb.w);
    for img in 0..sa.n {
        let dst = &mut out[img * (pa + pb)..][..pa + pb];
        dst[..pa].copy_from_slice(&a[img * pa..][..pa]);
        dst[pa..].copy_from_slice(&b[img * pb..][..pb]);
    }
}

/// Accumulates the slice of the output gradient belonging to one concat input.
/// `offset` and `len` are per-image element offsets into the output.
pub(crate) fn concat_backward_part(in_grad: &mut [f32], out_grad: &[f32], n: usize, total: usize, offset: usize, len: usize) {
    for img in 0..n {
        let src = &out_grad[img * total + offset..][..len];
        let dst = &mut in_grad[img * len..][..len];
        for (dv, &sv) in dst.iter_mut().zip(src) {
            *dv += sv;
        }
    }
}

pub(crate) fn relu_forward(out: &mut [f32], input: &[f32]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = x.max(0.0);
    }
}

pub(crate) fn relu_backward(in_grad: &mut [f32], out_grad: &[f32], input: &[f32]) {
    for ((g, &og), &x) in in_grad.iter_mut().zip(out_grad).zip(input) {
        if x > 0.0 {
            *g += og;
        }
    }
}

/// Largest `f32` strictly below 1. Logistic outputs clamp here so the open
/// interval (0,1) holds even where the 32-bit formula would round to 1.
const ONE_BELOW: f32 = f32::from_bits(0x3F7F_FFFF);

#[inline]
pub(crate) fn logistic_scalar(x: f32) -> f32 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f32::MIN_POSITIVE, ONE_BELOW)
}

pub(crate) fn logistic_forward(out: &mut [f32], input: &[f32]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = logistic_scalar(x);
    }
}

pub(crate) fn logistic_backward(in_grad: &mut [f32], out_grad: &[f32], output: &[f32]) {
    for ((g, &og), &y) in in_grad.iter_mut().zip(out_grad).zip(output) {
        *g += og * y * (1.0 - y);
    }
}

/// Mean of squared differences, reduced with eight fixed partial sums.
pub(crate) fn mse_forward(pred: &[f32], target: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let ca = pred.chunks_exact(8);
    let cb = target.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xp, xt) in ca.zip(cb) {
        for j in 0..8 {
            let diff = xp[j] - xt[j];
            lanes[j] = diff.mul_add(diff, lanes[j]);
        }
    }
    let mut tail = 0.0f32;
    for (&p, &t) in ra.iter().zip(rb) {
        let diff = p - t;
        tail = diff.mul_add(diff, tail);
    }
    let total = (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) + tail;
    total / pred.len() as f32
}

/// Gradient of the mean squared error w.r.t. one side. `sign` is +1 for the
/// prediction, -1 for the target.
pub(crate) fn mse_backward_side(side_grad: &mut [f32], pred: &[f32], target: &[f32], og: f32, sign: f32) {
    let scale = sign * og * 2.0 / pred.len() as f32;
    for ((g, &p), &t) in side_grad.iter_mut().zip(pred).zip(target) {
        *g += scale * (p - t);
    }
}

/// Fixed-weight linear readout, used to give scalar outputs to gradient
/// checks of non-scalar ops.
pub(crate) fn weighted_sum_forward(input: &[f32], weights: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let ca = input.chunks_exact(8);
    let cb = weights.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xi, xw) in ca.zip(cb) {
        for j in 0..8 {
            lanes[j] = xi[j].mul_add(xw[j], lanes[j]);
        }
    }
    let mut tail = 0.0f32;
    for (&x, &w) in ra.iter().zip(rb) {
        tail = x.mul_add(w, tail);
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) + tail
}

pub(crate) fn weighted_sum_backward(in_grad: &mut [f32], weights: &[f32], og: f32) {
    for (g, &w) in in_grad.iter_mut().zip(weights) {
        *g += og * w;
    }
}
