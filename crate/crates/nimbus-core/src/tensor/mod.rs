//! Rank-4 tensors and reverse-mode autodiff.
//!
//! All tensors are dense `f32` in `(n, c, h, w)` layout with `w` fastest.
//! Differentiable computation goes through a [`Tape`]: leaves and op results
//! are tape nodes addressed by [`ValueId`], and [`Tape::backward`] replays the
//! recorded ops in exact reverse execution order, accumulating gradients.
//!
//! Reproducibility contract: every kernel reduces in a fixed, documented
//! order, and tape computation flushes subnormal values to zero on every
//! thread it runs on, so the same build on the same machine produces
//! bit-identical results for the same inputs. The [`reference`] module holds slow `f64`
//! re-implementations of every op used to cross-check the fast kernels, and
//! [`gradcheck`] compares analytic gradients against central differences.

mod gemm;
pub mod gradcheck;
mod ops;
pub mod probes;
pub mod reference;
mod tape;

pub use tape::{Tape, ValueId};

use std::fmt;

use crate::error::{Error, Result};

/// Makes this thread flush subnormal `f32`/`f64` values to zero (x86 FTZ and
/// DAZ control bits; a no-op elsewhere). Subnormal operands take microcode
/// assists that multiply step time once training converges and gradients
/// shrink toward zero, and nothing in an 8-bit-image pipeline resolves
/// magnitudes below 1e-38. Every [`Tape`] sets this before computing, so all
/// tensor math runs under the same rounding regime and results stay
/// bit-reproducible from run to run.
pub(crate) fn flush_subnormals() {
    #[cfg(target_arch = "x86_64")]
    // Safety: reads and rewrites this thread's MXCSR register; setting the
    // FTZ and DAZ bits only changes how subnormals round and cannot fault.
    unsafe {
        let mut csr: u32 = 0;
        std::arch::asm!("stmxcsr [{0}]", in(reg) &mut csr, options(nostack, preserves_flags));
        csr |= 0x8040;
        std::arch::asm!("ldmxcsr [{0}]", in(reg) &csr, options(nostack, preserves_flags));
    }
}

/// Dimensions of a rank-4 tensor: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index of `(n, c, h, w)` in row-major layout, `w` fastest.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 `f32` tensor with an optional gradient buffer of equal shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor from explicit data. The length must match the shape
    /// and every dimension must be at least 1.
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::BadShape { op: "Tensor::new", shape, reason: "all dims must be >= 1".into() });
        }
        if data.len() != shape.count() {
            return Err(Error::BadShape {
                op: "Tensor::new",
                shape,
                reason: format!("data length {} != element count {}", data.len(), shape.count()),
            });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Shape) -> Self {
        assert!(
            shape.n >= 1 && shape.c >= 1 && shape.h >= 1 && shape.w >= 1,
            "Tensor::zeros: all dims must be >= 1, got {shape}"
        );
        Tensor { shape, data: vec![0.0; shape.count()], grad: None }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Single image helper: builds a `(1, 1, h, w)` tensor from rows.
    pub fn from_plane(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(Shape::new(1, 1, h, w), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// The gradient buffer, if one has been attached.
    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Attaches a gradient buffer. The length must match the shape.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.shape.count() {
            return Err(Error::BadShape {
                op: "Tensor::set_grad",
                shape: self.shape,
                reason: format!("grad length {} != element count {}", grad.len(), self.shape.count()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
