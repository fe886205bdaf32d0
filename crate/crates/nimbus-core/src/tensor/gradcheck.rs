//! Central-difference verification of analytic gradients.
//!
//! A [`ScalarProgram`] describes a scalar-valued function of one tensor. The
//! checker obtains the analytic gradient by recording the program on a fresh
//! tape and running backward, then perturbs each coordinate by ±h and
//! compares against the central difference.
//!
//! Two evaluation routes exist for the difference quotient. By default the
//! program is re-run through the engine itself. A program may also provide
//! `eval_reference`, a high-precision `f64` evaluation that additionally
//! fingerprints its non-smooth decisions; when present it is preferred, and
//! coordinates whose ±h evaluations disagree on the fingerprint (the stencil
//! straddles a relu or max-pool kink) are skipped instead of compared, since
//! a central difference across a kink estimates no derivative at all.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, ValueId};

/// A scalar-valued function of one tensor, expressed as a tape program.
pub trait ScalarProgram {
    /// Records the function on `tape` with `x` as the checked input leaf.
    /// Must be pure: same `x`, same recorded computation.
    fn build(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId>;

    /// Optional high-precision evaluation, returning the value and a
    /// fingerprint of the non-smooth decisions taken while computing it.
    fn eval_reference(&self, _x: &Tensor) -> Option<(f64, u64)> {
        None
    }
}

impl<F> ScalarProgram for F
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    fn build(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        self(tape, x)
    }
}

/// Check settings: the probe step and an optional both-sides-small floor
/// under which coordinates are reported as skipped rather than compared.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f32,
    pub zero_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-3, zero_floor: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    /// Max over checked coordinates of |analytic − numeric| / max(1e-8, |analytic| + |numeric|).
    pub max_rel_error: f64,
    /// Max over checked coordinates of |analytic − numeric|.
    pub max_abs_error: f64,
    /// Flat index of the coordinate attaining `max_rel_error`.
    pub worst_coord: usize,
    pub checked: usize,
    pub skipped_kink: usize,
    pub skipped_zero: usize,
}

/// Compares the analytic gradient of `f` at `x` against central differences
/// over every coordinate of `x`.
pub fn grad_check(f: &impl ScalarProgram, x: &Tensor, opts: &GradCheck) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::config("grad_check step must be positive"));
    }
    let analytic = analytic_gradient(f, x)?;
    let base_pattern = f.eval_reference(x).map(|(_, p)| p);

    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    let h = opts.step;
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let (f_plus, p_plus) = eval(f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let (f_minus, p_minus) = eval(f, &probe)?;
        probe.data_mut()[i] = orig;

        if let Some(base) = base_pattern {
            if p_plus != Some(base) || p_minus != Some(base) {
                report.skipped_kink += 1;
                continue;
            }
        }
        // The true step is the f32 rounding of orig±h, not h itself.
        let step_sum = ((orig + h) as f64 - (orig - h) as f64).abs();
        let numeric = (f_plus - f_minus) / step_sum;
        let a = analytic[i] as f64;
        if opts.zero_floor > 0.0 && a.abs() < opts.zero_floor && numeric.abs() < opts.zero_floor {
            report.skipped_zero += 1;
            continue;
        }
        let abs_err = (a - numeric).abs();
        let rel = abs_err / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs_err);
        report.checked += 1;
    }
    Ok(report)
}

/// Records `f` on a fresh tape and returns d f / d x from one backward pass.
/// A gradient the backward pass never reached is all zeros, which is the
/// correct analytic gradient of a function that ignores `x`.
pub fn analytic_gradient(f: &impl ScalarProgram, x: &Tensor) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let out = f.build(&mut tape, xid)?;
    let out_shape = tape.shape(out);
    if out_shape.count() != 1 {
        return Err(Error::Tape(format!("grad_check function must be scalar-valued, got shape {out_shape}")));
    }
    tape.backward(out)?;
    Ok(tape.grad(xid).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.data().len()]))
}

fn eval(f: &impl ScalarProgram, x: &Tensor) -> Result<(f64, Option<u64>)> {
    if let Some((v, p)) = f.eval_reference(x) {
        return Ok((v, Some(p)));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let out = f.build(&mut tape, xid)?;
    Ok((tape.value(out).data()[0] as f64, None))
}
