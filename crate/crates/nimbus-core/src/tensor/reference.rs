//! Slow, obviously-correct re-implementations of every op.
//!
//! These run in `f64` with plain nested loops and exist only to cross-check
//! the fast kernels: the convolution oracle slides the kernel window
//! directly, and the verification suite evaluates whole networks through
//! this module to obtain high-precision values for finite differences.
//!
//! [`PatternHash`] fingerprints the non-smooth decisions of a computation
//! (relu sign patterns, max-pool winner indices). Finite-difference probes
//! compare fingerprints at the two displaced points and skip coordinates
//! whose stencil straddles a kink, where central differences are meaningless.

use crate::tensor::{Shape, Tensor};

/// Rank-4 `f64` array used only inside this module and its callers.
#[derive(Clone, Debug)]
pub struct Array4 {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Array4 {
    pub fn zeros(shape: Shape) -> Self {
        Array4 { shape, data: vec![0.0; shape.count()] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Array4 { shape: t.shape(), data: t.data().iter().map(|&v| v as f64).collect() }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }
}

/// FNV-1a accumulator over the discrete decisions of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatternHash(u64);

impl PatternHash {
    pub fn new() -> Self {
        PatternHash(0xCBF2_9CE4_8422_2325)
    }

    #[inline]
    fn byte(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01B3);
    }

    #[inline]
    pub fn push_bit(&mut self, bit: bool) {
        self.byte(bit as u8);
    }

    #[inline]
    pub fn push_u32(&mut self, v: u32) {
        for b in v.to_le_bytes() {
            self.byte(b);
        }
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

impl Default for PatternHash {
    fn default() -> Self {
        PatternHash::new()
    }
}

/// Direct sliding-window convolution; the window loops run innermost.
pub fn conv2d(input: &Array4, weight: &Array4, bias: &[f64], stride: usize, pad: usize) -> Array4 {
    let (is, ws) = (input.shape, weight.shape);
    assert_eq!(is.c, ws.c, "reference conv2d: channel mismatch");
    assert_eq!(bias.len(), ws.n, "reference conv2d: bias length");
    let oh = (is.h + 2 * pad - ws.h) / stride + 1;
    let ow = (is.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Array4::zeros(Shape::new(is.n, ws.n, oh, ow));
    for n in 0..is.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..is.c {
                        for u in 0..ws.h {
                            for v in 0..ws.w {
                                let iy = (oy * stride + u) as isize - pad as isize;
                                let ix = (ox * stride + v) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < is.h && (ix as usize) < is.w {
                                    acc += input.at(n, ci, iy as usize, ix as usize) * weight.at(co, ci, u, v);
                                }
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// 2x2 max pool; the winning window index feeds the pattern hash.
pub fn max_pool2(input: &Array4, pattern: &mut PatternHash) -> Array4 {
    let s = input.shape;
    let mut out = Array4::zeros(Shape::new(s.n, s.c, s.h / 2, s.w / 2));
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..s.h / 2 {
                for ox in 0..s.w / 2 {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u32;
                    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = input.at(n, c, 2 * oy + dy, 2 * ox + dx);
                        if v > best {
                            best = v;
                            best_k = k as u32;
                        }
                    }
                    pattern.push_u32(best_k);
                    out.set(n, c, oy, ox, best);
                }
            }
        }
    }
    out
}

pub fn upsample2(input: &Array4) -> Array4 {
    let s = input.shape;
    let mut out = Array4::zeros(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..2 * s.h {
                for x in 0..2 * s.w {
                    out.set(n, c, y, x, input.at(n, c, y / 2, x / 2));
                }
            }
        }
    }
    out
}

pub fn concat_channels(a: &Array4, b: &Array4) -> Array4 {
    let (sa, sb) = (a.shape, b.shape);
    assert!(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w, "reference concat: spatial mismatch");
    let mut out = Array4::zeros(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w));
    for n in 0..sa.n {
        for c in 0..sa.c {
            for y in 0..sa.h {
                for x in 0..sa.w {
                    out.set(n, c, y, x, a.at(n, c, y, x));
                }
            }
        }
        for c in 0..sb.c {
            for y in 0..sa.h {
                for x in 0..sa.w {
                    out.set(n, sa.c + c, y, x, b.at(n, c, y, x));
                }
            }
        }
    }
    out
}

/// Relu; each sign decision feeds the pattern hash.
pub fn relu(input: &Array4, pattern: &mut PatternHash) -> Array4 {
    let mut out = Array4::zeros(input.shape);
    for (o, &x) in out.data.iter_mut().zip(&input.data) {
        let active = x > 0.0;
        pattern.push_bit(active);
        if active {
            *o = x;
        }
    }
    out
}

pub fn logistic(input: &Array4) -> Array4 {
    let mut out = Array4::zeros(input.shape);
    for (o, &x) in out.data.iter_mut().zip(&input.data) {
        *o = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) };
    }
    out
}

pub fn mse_loss(pred: &Array4, target: &Array4) -> f64 {
    assert_eq!(pred.shape, target.shape, "reference mse: shape mismatch");
    let mut acc = 0.0;
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        acc += (p - t) * (p - t);
    }
    acc / pred.data.len() as f64
}

pub fn weighted_sum(input: &Array4, weights: &[f32]) -> f64 {
    let mut acc = 0.0;
    for (&x, &w) in input.data.iter().zip(weights) {
        acc += x * w as f64;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_conv_frozen_example() {
        let input = Array4 {
            shape: Shape::new(1, 1, 3, 3),
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        };
        let weight = Array4 { shape: Shape::new(1, 1, 2, 2), data: vec![1.0; 4] };
        let out = conv2d(&input, &weight, &[0.0], 1, 0);
        assert_eq!(out.data, vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn pattern_hash_separates_decisions() {
        let mut a = PatternHash::new();
        let mut b = PatternHash::new();
        a.push_bit(true);
        b.push_bit(false);
        assert_ne!(a.value(), b.value());
        let mut c = PatternHash::new();
        c.push_bit(true);
        assert_eq!(a.value(), c.value());
    }
}
