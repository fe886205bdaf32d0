//! Reverse-mode autodiff tape.
//!
//! Values live on the tape as nodes; ops record their inputs by [`ValueId`]
//! and push a new node. [`Tape::backward`] seeds the loss with 1 and replays
//! the recorded ops in exact reverse execution order. Each pass propagates
//! pass-local gradients, then folds them into the persistent per-node
//! gradient buffers, so calling backward twice leaves every gradient at
//! exactly twice its one-pass value.

use crate::error::{Error, Result};
use crate::tensor::ops::{self, ConvDims, Scratch};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    Conv2d { input: ValueId, weight: ValueId, bias: ValueId, dims: ConvDims },
    MaxPool2 { input: ValueId, argmax: Vec<u32> },
    Upsample2 { input: ValueId },
    ConcatChannels { a: ValueId, b: ValueId },
    Relu { input: ValueId },
    Logistic { input: ValueId },
    MseLoss { pred: ValueId, target: ValueId },
    WeightedSum { input: ValueId, weights: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    scratch: Scratch,
}

impl Tape {
    pub fn new() -> Self {
        crate::tensor::flush_subnormals();
        Tape::default()
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes and gradients but keeps scratch capacity, so a reused
    /// tape does not reallocate its convolution workspaces every step.
    pub fn reset(&mut self) {
        crate::tensor::flush_subnormals();
        self.nodes.clear();
        self.grads.clear();
    }

    /// Records an input value. Any gradient buffer already attached to the
    /// tensor is ignored; gradients are tracked by the tape.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        ValueId(self.nodes.len() - 1)
    }

    fn check(&self, id: ValueId, what: &str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("{what}: value id {} is not on this tape", id.0)));
        }
        Ok(())
    }

    /// The tensor held at `id`. Panics on a foreign id; ops validate ids at
    /// record time, so this is only reachable through misuse.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    /// Persistent gradient of `id`, if backward has reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Clone of the value at `id` with its accumulated gradient attached.
    pub fn value_with_grad(&self, id: ValueId) -> Tensor {
        let mut t = self.nodes[id.0].value.clone();
        t.clear_grad();
        if let Some(g) = self.grad(id) {
            t.set_grad(g.to_vec()).expect("tape gradient length matches value shape");
        }
        t
    }

    pub fn conv2d(&mut self, input: ValueId, weight: ValueId, bias: ValueId, stride: usize, pad: usize) -> Result<ValueId> {
        self.check(input, "conv2d input")?;
        self.check(weight, "conv2d weight")?;
        self.check(bias, "conv2d bias")?;
        let dims = ConvDims::compute(self.shape(input), self.shape(weight), self.shape(bias), stride, pad)?;
        let mut out = Tensor::zeros(dims.out_shape());
        ops::conv2d_forward(
            out.data_mut(),
            self.nodes[input.0].value.data(),
            self.nodes[weight.0].value.data(),
            self.nodes[bias.0].value.data(),
            &dims,
            &mut self.scratch,
        );
        Ok(self.push(out, Op::Conv2d { input, weight, bias, dims }))
    }

    pub fn max_pool2(&mut self, input: ValueId) -> Result<ValueId> {
        self.check(input, "max_pool2 input")?;
        let s = self.shape(input);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::BadShape { op: "max_pool2", shape: s, reason: "height and width must be even".into() });
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h / 2, s.w / 2));
        let mut argmax = Vec::new();
        ops::maxpool2_forward(out.data_mut(), &mut argmax, self.nodes[input.0].value.data(), s);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    pub fn upsample2(&mut self, input: ValueId) -> Result<ValueId> {
        self.check(input, "upsample2 input")?;
        let s = self.shape(input);
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w));
        ops::upsample2_forward(out.data_mut(), self.nodes[input.0].value.data(), s);
        Ok(self.push(out, Op::Upsample2 { input }))
    }

    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a, "concat_channels a")?;
        self.check(b, "concat_channels b")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::ShapeMismatch { op: "concat_channels", lhs: sa, rhs: sb });
        }
        let mut out = Tensor::zeros(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w));
        ops::concat_forward(out.data_mut(), self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), sa, sb);
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    pub fn relu(&mut self, input: ValueId) -> Result<ValueId> {
        self.check(input, "relu input")?;
        let mut out = Tensor::zeros(self.shape(input));
        ops::relu_forward(out.data_mut(), self.nodes[input.0].value.data());
        Ok(self.push(out, Op::Relu { input }))
    }

    pub fn logistic(&mut self, input: ValueId) -> Result<ValueId> {
        self.check(input, "logistic input")?;
        let mut out = Tensor::zeros(self.shape(input));
        ops::logistic_forward(out.data_mut(), self.nodes[input.0].value.data());
        Ok(self.push(out, Op::Logistic { input }))
    }

    pub fn mse_loss(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId> {
        self.check(pred, "mse_loss pred")?;
        self.check(target, "mse_loss target")?;
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::ShapeMismatch { op: "mse_loss", lhs: sp, rhs: st });
        }
        let loss = ops::mse_forward(self.nodes[pred.0].value.data(), self.nodes[target.0].value.data());
        let out = Tensor::new(Shape::new(1, 1, 1, 1), vec![loss]).expect("scalar shape");
        Ok(self.push(out, Op::MseLoss { pred, target }))
    }

    /// Scalar readout sum(input * weights), used by gradient checks to close
    /// non-scalar ops into a checkable scalar function.
    pub fn weighted_sum(&mut self, input: ValueId, weights: &[f32]) -> Result<ValueId> {
        self.check(input, "weighted_sum input")?;
        let s = self.shape(input);
        if weights.len() != s.count() {
            return Err(Error::BadShape {
                op: "weighted_sum",
                shape: s,
                reason: format!("weights length {} != element count {}", weights.len(), s.count()),
            });
        }
        let v = ops::weighted_sum_forward(self.nodes[input.0].value.data(), weights);
        let out = Tensor::new(Shape::new(1, 1, 1, 1), vec![v]).expect("scalar shape");
        Ok(self.push(out, Op::WeightedSum { input, weights: weights.to_vec() }))
    }

    /// Runs reverse-mode accumulation from `loss`, which must be a scalar on
    /// this tape. Gradients add onto whatever previous backward calls left.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        self.check(loss, "backward loss")?;
        let ls = self.shape(loss);
        if ls.count() != 1 {
            return Err(Error::Tape(format!("backward target must be a scalar, got shape {ls}")));
        }
        let Tape { nodes, grads, scratch } = self;
        let mut pass: Vec<Option<Vec<f32>>> = Vec::new();
        pass.resize_with(nodes.len(), || None);
        pass[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(og) = pass[i].take() else { continue };
            propagate(nodes, scratch, i, &og, &mut pass);
            let dst = grads[i].get_or_insert_with(|| vec![0.0; og.len()]);
            for (d, s) in dst.iter_mut().zip(&og) {
                *d += s;
            }
        }
        Ok(())
    }
}

fn acc<'a>(pass: &'a mut [Option<Vec<f32>>], id: ValueId, len: usize) -> &'a mut [f32] {
    pass[id.0].get_or_insert_with(|| vec![0.0; len])
}

/// Adds node `i`'s gradient contributions to its inputs' pass buffers.
/// Inputs of multi-input ops are handled one at a time in a fixed order, so
/// an op whose inputs alias the same id still accumulates both shares.
fn propagate(nodes: &[Node], scratch: &mut Scratch, i: usize, og: &[f32], pass: &mut [Option<Vec<f32>>]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d { input, weight, bias, dims } => {
            let in_len = nodes[input.0].value.shape().count();
            ops::conv2d_backward_input(acc(pass, *input, in_len), nodes[weight.0].value.data(), og, dims, scratch);
            // Weight and bias share one kernel; temporaries keep the update
            // correct even if the same value id plays several conv roles.
            let mut wg = vec![0.0; nodes[weight.0].value.shape().count()];
            let mut bg = vec![0.0; nodes[bias.0].value.shape().count()];
            ops::conv2d_backward_weight_bias(&mut wg, &mut bg, nodes[input.0].value.data(), og, dims, scratch);
            merge_add(pass, *weight, &wg);
            merge_add(pass, *bias, &bg);
        }
        Op::MaxPool2 { input, argmax } => {
            let in_len = nodes[input.0].value.shape().count();
            ops::maxpool2_backward(acc(pass, *input, in_len), og, argmax);
        }
        Op::Upsample2 { input } => {
            let s = nodes[input.0].value.shape();
            ops::upsample2_backward(acc(pass, *input, s.count()), og, s);
        }
        Op::ConcatChannels { a, b } => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (pa, pb) = (sa.c * sa.h * sa.w, sb.c * sb.h * sb.w);
            ops::concat_backward_part(acc(pass, *a, sa.count()), og, sa.n, pa + pb, 0, pa);
            ops::concat_backward_part(acc(pass, *b, sb.count()), og, sb.n, pa + pb, pa, pb);
        }
        Op::Relu { input } => {
            let in_len = nodes[input.0].value.shape().count();
            ops::relu_backward(acc(pass, *input, in_len), og, nodes[input.0].value.data());
        }
        Op::Logistic { input } => {
            let in_len = nodes[input.0].value.shape().count();
            ops::logistic_backward(acc(pass, *input, in_len), og, nodes[i].value.data());
        }
        Op::MseLoss { pred, target } => {
            let (p, t) = (pred.0, target.0);
            let len = nodes[p].value.shape().count();
            ops::mse_backward_side(acc(pass, *pred, len), nodes[p].value.data(), nodes[t].value.data(), og[0], 1.0);
            ops::mse_backward_side(acc(pass, *target, len), nodes[p].value.data(), nodes[t].value.data(), og[0], -1.0);
        }
        Op::WeightedSum { input, weights } => {
            let in_len = nodes[input.0].value.shape().count();
            ops::weighted_sum_backward(acc(pass, *input, in_len), weights, og[0]);
        }
    }
}

/// Adds a finished contribution into a pass buffer.
fn merge_add(pass: &mut [Option<Vec<f32>>], id: ValueId, contrib: &[f32]) {
    let dst = pass[id.0].get_or_insert_with(|| vec![0.0; contrib.len()]);
    for (d, c) in dst.iter_mut().zip(contrib) {
        *d += c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize, data: Vec<f32>) -> Tensor {
        Tensor::from_plane(h, w, data).unwrap()
    }

    fn scalar_bias(co: usize) -> Tensor {
        Tensor::zeros(Shape::new(1, co, 1, 1))
    }

    #[test]
    fn conv_window_sums() {
        let mut tape = Tape::new();
        let x = tape.leaf(plane(3, 3, (1..=9).map(|v| v as f32).collect()));
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let b = tape.leaf(scalar_bias(1));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 1, 2, 2));
        assert_eq!(tape.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..32).map(|v| v as f32 * 0.37 - 3.0).collect();
        let x = tape.leaf(Tensor::new(Shape::new(2, 1, 4, 4), data.clone()).unwrap());
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let b = tape.leaf(scalar_bias(1));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let w = tape.leaf(Tensor::full(Shape::new(3, 2, 3, 3), 0.5));
        let b = tape.leaf(Tensor::new(Shape::new(1, 3, 1, 1), vec![-1.5, 0.25, 7.0]).unwrap());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), Shape::new(1, 3, 4, 4));
        for j in 0..3 {
            for p in 0..16 {
                assert_eq!(out.data()[j * 16 + p], [-1.5, 0.25, 7.0][j]);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_with_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        let w = tape.leaf(Tensor::zeros(Shape::new(4, 2, 3, 3)));
        let b = tape.leaf(scalar_bias(4));
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1,3,8,8)") && msg.contains("(4,2,3,3)"), "{msg}");
    }

    #[test]
    fn maxpool_single_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(plane(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_constant_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 2, 4, 4), 2.25));
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.25; 8][..]);
    }

    #[test]
    fn maxpool_window_maxima() {
        let mut tape = Tape::new();
        let x = tape.leaf(plane(
            4,
            4,
            vec![9.0, 3.0, 1.0, 14.0, 7.0, 12.0, 4.0, 0.0, 2.0, 8.0, 15.0, 6.0, 10.0, 5.0, 11.0, 13.0],
        ));
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0, 14.0, 10.0, 15.0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 4)));
        assert!(tape.max_pool2(x).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let mut tape = Tape::new();
        let x = tape.leaf(plane(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample2(x).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn upsample_then_maxpool_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..18).map(|v| (v * 7 % 13) as f32).collect();
        let x = tape.leaf(Tensor::new(Shape::new(1, 2, 3, 3), data.clone()).unwrap());
        let y = tape.upsample2(x).unwrap();
        let z = tape.max_pool2(y).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }

    #[test]
    fn upsample_gradient_sums_four_copies() {
        let mut tape = Tape::new();
        let x = tape.leaf(plane(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample2(x).unwrap();
        let s = tape.weighted_sum(y, &[1.0; 16]).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn concat_shapes_and_layout() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(Shape::new(1, 2, 4, 4), 1.0));
        let b = tape.leaf(Tensor::full(Shape::new(1, 3, 4, 4), 2.0));
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 5, 4, 4));
        let out = tape.value(y).data();
        assert!(out[..32].iter().all(|&v| v == 1.0));
        assert!(out[32..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch_and_empty_channels() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 8, 8)));
        assert!(tape.concat_channels(a, b).is_err());
        // A zero-channel operand is unrepresentable: tensors reject dim 0.
        assert!(Tensor::new(Shape::new(1, 0, 4, 4), vec![]).is_err());
    }

    #[test]
    fn relu_values_and_gradient_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(plane(1, 4, vec![-1.0, 2.5, -0.5, 3.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.5, 0.0, 3.0]);
        let s = tape.weighted_sum(y, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn logistic_midpoint_saturation_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(plane(1, 3, vec![0.0, 1000.0, -1000.0]));
        let y = tape.logistic(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.5);
        assert!(out[1] < 1.0 && out[1] > 0.999);
        assert!(out[2] > 0.0 && out[2] < 1e-6);
        for &v in [-5.0f32, -1.3, 0.4, 2.0, 30.0].iter() {
            let mut t2 = Tape::new();
            let p = t2.leaf(plane(1, 2, vec![v, -v]));
            let q = t2.logistic(p).unwrap();
            let o = t2.value(q).data();
            assert!((o[0] + o[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mse_frozen_values() {
        let mut tape = Tape::new();
        let p = tape.leaf(plane(1, 1, vec![0.5]));
        let t = tape.leaf(plane(1, 1, vec![0.0]));
        let l = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.value(l).data(), &[0.25]);

        let p2 = tape.leaf(plane(1, 2, vec![1.0, 0.0]));
        let t2 = tape.leaf(plane(1, 2, vec![0.0, 1.0]));
        let l2 = tape.mse_loss(p2, t2).unwrap();
        assert_eq!(tape.value(l2).data(), &[1.0]);

        let l3 = tape.mse_loss(p2, p2).unwrap();
        assert_eq!(tape.value(l3).data(), &[0.0]);
    }

    #[test]
    fn mse_gradient_of_square() {
        // loss = mse(x, 0) with a single element is x^2; at x=3 the gradient is 6.
        let mut tape = Tape::new();
        let x = tape.leaf(plane(1, 1, vec![3.0]));
        let z = tape.leaf(plane(1, 1, vec![0.0]));
        let l = tape.mse_loss(x, z).unwrap();
        assert_eq!(tape.value(l).data(), &[9.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn logistic_chain_gradient_at_zero() {
        // Identity via a 1x1 unit conv, then logistic: d/dx at 0 is 0.25.
        let mut tape = Tape::new();
        let x = tape.leaf(plane(1, 1, vec![0.0]));
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let b = tape.leaf(scalar_bias(1));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        let z = tape.logistic(y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(plane(4, 4, (0..16).map(|v| (v as f32) * 0.3 - 2.0).collect()));
        let w = tape.leaf(Tensor::new(Shape::new(2, 1, 3, 3), (0..18).map(|v| (v as f32) * 0.1 - 0.9).collect()).unwrap());
        let b = tape.leaf(Tensor::new(Shape::new(1, 2, 1, 1), vec![0.1, -0.2]).unwrap());
        let c = tape.conv2d(x, w, b, 1, 1).unwrap();
        let r = tape.relu(c).unwrap();
        let t = tape.leaf(Tensor::full(Shape::new(1, 2, 4, 4), 0.5));
        let l = tape.mse_loss(r, t).unwrap();
        tape.backward(l).unwrap();
        let gx: Vec<f32> = tape.grad(x).unwrap().to_vec();
        let gw: Vec<f32> = tape.grad(w).unwrap().to_vec();
        let gb: Vec<f32> = tape.grad(b).unwrap().to_vec();
        assert!(gx.iter().any(|&v| v != 0.0));
        tape.backward(l).unwrap();
        let twice = |g: &[f32]| g.iter().map(|&v| 2.0 * v).collect::<Vec<_>>();
        assert_eq!(tape.grad(x).unwrap(), &twice(&gx)[..]);
        assert_eq!(tape.grad(w).unwrap(), &twice(&gw)[..]);
        assert_eq!(tape.grad(b).unwrap(), &twice(&gb)[..]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Tape(_)));
    }

    #[test]
    fn ops_are_bitwise_deterministic_across_calls() {
        let data: Vec<f32> = (0..5 * 3 * 8 * 8).map(|v| ((v * 37 % 101) as f32) * 0.31 - 15.0).collect();
        let wdat: Vec<f32> = (0..4 * 3 * 9).map(|v| ((v * 53 % 97) as f32) * 0.021 - 1.0).collect();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(Shape::new(5, 3, 8, 8), data.clone()).unwrap());
            let w = tape.leaf(Tensor::new(Shape::new(4, 3, 3, 3), wdat.clone()).unwrap());
            let b = tape.leaf(Tensor::new(Shape::new(1, 4, 1, 1), vec![0.3, -0.1, 0.0, 2.0]).unwrap());
            let c = tape.conv2d(x, w, b, 1, 1).unwrap();
            let r = tape.relu(c).unwrap();
            let p = tape.max_pool2(r).unwrap();
            let u = tape.upsample2(p).unwrap();
            let k = tape.concat_channels(r, u).unwrap();
            let s = tape.logistic(k).unwrap();
            let t = tape.leaf(Tensor::full(tape.shape(s), 0.25));
            let l = tape.mse_loss(s, t).unwrap();
            tape.backward(l).unwrap();
            let mut out = tape.value(l).data().to_vec();
            out.extend_from_slice(tape.grad(x).unwrap());
            out.extend_from_slice(tape.grad(w).unwrap());
            out
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn reused_tape_after_reset_matches_fresh_tape() {
        let mut tape = Tape::new();
        let compute = |tape: &mut Tape| {
            let x = tape.leaf(plane(4, 4, (0..16).map(|v| v as f32 * 0.5 - 4.0).collect()));
            let w = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 0.2));
            let b = tape.leaf(scalar_bias(1));
            let c = tape.conv2d(x, w, b, 1, 1).unwrap();
            tape.value(c).data().to_vec()
        };
        let first = compute(&mut tape);
        tape.reset();
        assert!(tape.is_empty());
        let second = compute(&mut tape);
        assert_eq!(first, second);
    }
}
