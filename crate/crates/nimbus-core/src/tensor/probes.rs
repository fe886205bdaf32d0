//! Ready-made [`ScalarProgram`]s for checking each op's gradients.
//!
//! Every probe closes one op into a scalar through a fixed-weight readout
//! and implements both evaluation routes: the engine build and an
//! independent `f64` reference evaluation with kink fingerprinting. The
//! verification suite instantiates these on seeded random tensors.
//!
//! Input generators keep probes away from non-differentiable points: relu
//! inputs stay clear of zero and max-pool windows have distinct entries with
//! a comfortable margin, so a small central-difference stencil cannot cross
//! a kink.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::tensor::gradcheck::ScalarProgram;
use crate::tensor::reference::{self, Array4, PatternHash};
use crate::tensor::{Shape, Tape, Tensor, ValueId};

pub enum OpProbe {
    ConvInput { weight: Tensor, bias: Tensor, stride: usize, pad: usize, readout: Vec<f32> },
    ConvWeight { input: Tensor, bias: Tensor, stride: usize, pad: usize, readout: Vec<f32> },
    ConvBias { input: Tensor, weight: Tensor, stride: usize, pad: usize, readout: Vec<f32> },
    MaxPool { readout: Vec<f32> },
    Upsample { readout: Vec<f32> },
    ConcatA { other: Tensor, readout: Vec<f32> },
    ConcatB { other: Tensor, readout: Vec<f32> },
    Relu { readout: Vec<f32> },
    Logistic { readout: Vec<f32> },
    MsePred { target: Tensor },
    MseTarget { pred: Tensor },
}

impl ScalarProgram for OpProbe {
    fn build(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        match self {
            OpProbe::ConvInput { weight, bias, stride, pad, readout } => {
                let w = tape.leaf(weight.clone());
                let b = tape.leaf(bias.clone());
                let y = tape.conv2d(x, w, b, *stride, *pad)?;
                tape.weighted_sum(y, readout)
            }
            OpProbe::ConvWeight { input, bias, stride, pad, readout } => {
                let i = tape.leaf(input.clone());
                let b = tape.leaf(bias.clone());
                let y = tape.conv2d(i, x, b, *stride, *pad)?;
                tape.weighted_sum(y, readout)
            }
            OpProbe::ConvBias { input, weight, stride, pad, readout } => {
                let i = tape.leaf(input.clone());
                let w = tape.leaf(weight.clone());
                let y = tape.conv2d(i, w, x, *stride, *pad)?;
                tape.weighted_sum(y, readout)
            }
            OpProbe::MaxPool { readout } => {
                let y = tape.max_pool2(x)?;
                tape.weighted_sum(y, readout)
            }
            OpProbe::Upsample { readout } => {
                let y = tape.upsample2(x)?;
                tape.weighted_sum(y, readout)
            }
            OpProbe::ConcatA { other, readout } => {
                let o = tape.leaf(other.clone());
                let y = tape.concat_channels(x, o)?;
                tape.weighted_sum(y, readout)
            }
            OpProbe::ConcatB { other, readout } => {
                let o = tape.leaf(other.clone());
                let y = tape.concat_channels(o, x)?;
                tape.weighted_sum(y, readout)
            }
            OpProbe::Relu { readout } => {
                let y = tape.relu(x)?;
                tape.weighted_sum(y, readout)
            }
            OpProbe::Logistic { readout } => {
                let y = tape.logistic(x)?;
                tape.weighted_sum(y, readout)
            }
            OpProbe::MsePred { target } => {
                let t = tape.leaf(target.clone());
                tape.mse_loss(x, t)
            }
            OpProbe::MseTarget { pred } => {
                let p = tape.leaf(pred.clone());
                tape.mse_loss(p, x)
            }
        }
    }

    fn eval_reference(&self, x: &Tensor) -> Option<(f64, u64)> {
        let xr = Array4::from_tensor(x);
        let mut pat = PatternHash::new();
        let v = match self {
            OpProbe::ConvInput { weight, bias, stride, pad, readout } => {
                let y = reference::conv2d(&xr, &Array4::from_tensor(weight), &bias_f64(bias), *stride, *pad);
                reference::weighted_sum(&y, readout)
            }
            OpProbe::ConvWeight { input, bias, stride, pad, readout } => {
                let y = reference::conv2d(&Array4::from_tensor(input), &xr, &bias_f64(bias), *stride, *pad);
                reference::weighted_sum(&y, readout)
            }
            OpProbe::ConvBias { input, weight, stride, pad, readout } => {
                let y = reference::conv2d(&Array4::from_tensor(input), &Array4::from_tensor(weight), &xr.data, *stride, *pad);
                reference::weighted_sum(&y, readout)
            }
            OpProbe::MaxPool { readout } => {
                let y = reference::max_pool2(&xr, &mut pat);
                reference::weighted_sum(&y, readout)
            }
            OpProbe::Upsample { readout } => reference::weighted_sum(&reference::upsample2(&xr), readout),
            OpProbe::ConcatA { other, readout } => {
                reference::weighted_sum(&reference::concat_channels(&xr, &Array4::from_tensor(other)), readout)
            }
            OpProbe::ConcatB { other, readout } => {
                reference::weighted_sum(&reference::concat_channels(&Array4::from_tensor(other), &xr), readout)
            }
            OpProbe::Relu { readout } => reference::weighted_sum(&reference::relu(&xr, &mut pat), readout),
            OpProbe::Logistic { readout } => reference::weighted_sum(&reference::logistic(&xr), readout),
            OpProbe::MsePred { target } => reference::mse_loss(&xr, &Array4::from_tensor(target)),
            OpProbe::MseTarget { pred } => reference::mse_loss(&Array4::from_tensor(pred), &xr),
        };
        Some((v, pat.value()))
    }
}

fn bias_f64(bias: &Tensor) -> Vec<f64> {
    bias.data().iter().map(|&v| v as f64).collect()
}

/// Uniform tensor in [lo, hi).
pub fn uniform_tensor(shape: Shape, rng: &mut impl Rng, lo: f32, hi: f32) -> Tensor {
    let data = (0..shape.count()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("generated length matches shape")
}

/// Tensor of pairwise-distinct values with gaps of at least `gap`, shuffled,
/// shifted so no value lies within `avoid` of zero. Used as input for ops
/// with kinks (relu, max-pool).
pub fn ladder_tensor(shape: Shape, rng: &mut impl Rng, gap: f32, avoid: f32) -> Tensor {
    let len = shape.count();
    let mut ranks: Vec<usize> = (0..len).collect();
    ranks.shuffle(rng);
    let mid = (len as f32) * gap / 2.0;
    let data: Vec<f32> = ranks
        .into_iter()
        .map(|r| {
            let mut v = r as f32 * gap - mid;
            if v.abs() < avoid {
                // Jump past zero; the gap to neighbors only grows.
                v += if v >= 0.0 { len as f32 * gap } else { -(len as f32) * gap };
            }
            v
        })
        .collect();
    Tensor::new(shape, data).expect("generated length matches shape")
}

/// Readout weights bounded away from zero so no output coordinate is
/// silently dropped from the scalar.
pub fn readout_weights(len: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let mag = rng.gen_range(0.25..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}
