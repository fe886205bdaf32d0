//! U-Net encoder–decoder over the tape ops.
//!
//! The network maps an RGB batch to a single-channel map squashed through
//! the logistic, one cloudiness value per pixel. Architecture, fixed by
//! [`UNetConfig`]: per encoder level two 3x3 conv+relu blocks (padding 1)
//! then a 2x2 max pool; a two-block bottleneck; per decoder level a
//! nearest-neighbor 2x upsample followed by a 3x3 conv+relu, concatenation
//! with the same-level encoder feature (skip first, upsampled second), and
//! two more 3x3 conv+relu blocks; finally a 1x1 conv to `out_channels` and
//! the logistic. Channel width starts at `base_channels` and doubles per
//! level. Defaults: depth 3, base 16, so 16/32/64 with a 128-channel
//! bottleneck.
//!
//! [`UNetParams::init`] draws weights uniformly from
//! ±sqrt(6 / (ci·kh·kw)) and zeroes biases, fully determined by the seed.
//!
//! The module keeps two forward implementations that must mirror each other
//! exactly: [`forward_on`] records engine ops on a tape, and
//! [`reference_loss`] reruns the same layer sequence through the slow `f64`
//! reference ops. The verification suite differentiates one and
//! finite-differences the other; any structural divergence between them
//! shows up there as a gradient mismatch.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::ScalarProgram;
use crate::tensor::reference::{self, Array4, PatternHash};
use crate::tensor::{Shape, Tape, Tensor, ValueId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of pool/upsample levels.
    pub depth: usize,
    /// Channels at the first encoder level; doubles each level down.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Seed fully determining the initial parameters.
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { depth: 3, base_channels: 16, in_channels: 3, out_channels: 1, seed: 0 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("network depth must be >= 1"));
        }
        if self.depth > 6 {
            return Err(Error::config(format!("network depth {} exceeds the working resolution budget", self.depth)));
        }
        if self.base_channels < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::config("channel counts must be >= 1"));
        }
        // Width doubles per level; cap the bottleneck to keep memory sane.
        if self.base_channels << self.depth > 4096 {
            return Err(Error::config("base_channels * 2^depth exceeds 4096"));
        }
        Ok(())
    }

    /// Convolution layers in execution order. Parameter tensors, checkpoint
    /// entries, and optimizer state all follow this order and these names.
    pub fn layer_plan(&self) -> Vec<ConvSpec> {
        let mut plan = Vec::new();
        let mut ci = self.in_channels;
        for k in 1..=self.depth {
            let co = self.base_channels << (k - 1);
            plan.push(ConvSpec::new(format!("enc{k}.c1"), ci, co, 3, 1));
            plan.push(ConvSpec::new(format!("enc{k}.c2"), co, co, 3, 1));
            ci = co;
        }
        let cb = self.base_channels << self.depth;
        plan.push(ConvSpec::new("bot.c1".into(), ci, cb, 3, 1));
        plan.push(ConvSpec::new("bot.c2".into(), cb, cb, 3, 1));
        ci = cb;
        for k in (1..=self.depth).rev() {
            let co = self.base_channels << (k - 1);
            plan.push(ConvSpec::new(format!("up{k}"), ci, co, 3, 1));
            plan.push(ConvSpec::new(format!("dec{k}.c1"), 2 * co, co, 3, 1));
            plan.push(ConvSpec::new(format!("dec{k}.c2"), co, co, 3, 1));
            ci = co;
        }
        plan.push(ConvSpec::new("out".into(), ci, self.out_channels, 1, 0));
        plan
    }

    /// Total number of scalar parameters (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.layer_plan().iter().map(|spec| spec.weight_count() + spec.co).sum()
    }

    /// Smallest legal input height/width: one pixel at the bottleneck.
    pub fn spatial_unit(&self) -> usize {
        1 << self.depth
    }
}

/// One convolution layer of the plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub ci: usize,
    pub co: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvSpec {
    fn new(name: String, ci: usize, co: usize, kernel: usize, pad: usize) -> Self {
        ConvSpec { name, ci, co, kernel, pad }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.co, self.ci, self.kernel, self.kernel)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.co, 1, 1)
    }

    fn weight_count(&self) -> usize {
        self.co * self.ci * self.kernel * self.kernel
    }
}

/// Named parameter tensors in canonical order: for each plan layer, first
/// `<name>.w`, then `<name>.b`.
#[derive(Clone, Debug)]
pub struct UNetParams {
    config: UNetConfig,
    tensors: Vec<(String, Tensor)>,
}

impl UNetParams {
    /// Fan-in scaled uniform init: weights in ±sqrt(6 / (ci·kh·kw)), biases
    /// zero. Same seed, same bits.
    pub fn init(config: &UNetConfig) -> Result<UNetParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = Vec::new();
        for spec in config.layer_plan() {
            let fan_in = (spec.ci * spec.kernel * spec.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt() as f32;
            let dist = Uniform::new(-bound, bound);
            let wshape = spec.weight_shape();
            let wdata: Vec<f32> = (0..wshape.count()).map(|_| dist.sample(&mut rng)).collect();
            tensors.push((format!("{}.w", spec.name), Tensor::new(wshape, wdata)?));
            tensors.push((format!("{}.b", spec.name), Tensor::zeros(spec.bias_shape())));
        }
        Ok(UNetParams { config: *config, tensors })
    }

    /// All-zero parameters; with these the network outputs exactly 0.5
    /// everywhere (the logistic of zero).
    pub fn zeroed(config: &UNetConfig) -> Result<UNetParams> {
        config.validate()?;
        let tensors = config
            .layer_plan()
            .into_iter()
            .flat_map(|spec| {
                [
                    (format!("{}.w", spec.name), Tensor::zeros(spec.weight_shape())),
                    (format!("{}.b", spec.name), Tensor::zeros(spec.bias_shape())),
                ]
            })
            .collect();
        Ok(UNetParams { config: *config, tensors })
    }

    /// Rebuilds params from named tensors, validating names, order, and
    /// shapes against the config's layer plan.
    pub fn from_tensors(config: &UNetConfig, tensors: Vec<(String, Tensor)>) -> Result<UNetParams> {
        config.validate()?;
        let plan = config.layer_plan();
        if tensors.len() != 2 * plan.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors for this config, got {}",
                2 * plan.len(),
                tensors.len()
            )));
        }
        for (i, spec) in plan.iter().enumerate() {
            for (j, (suffix, want_shape)) in [("w", spec.weight_shape()), ("b", spec.bias_shape())].iter().enumerate() {
                let (name, tensor) = &tensors[2 * i + j];
                let want_name = format!("{}.{suffix}", spec.name);
                if *name != want_name {
                    return Err(Error::config(format!("parameter {} named {name}, expected {want_name}", 2 * i + j)));
                }
                if tensor.shape() != *want_shape {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {}, expected {want_shape}",
                        tensor.shape()
                    )));
                }
            }
        }
        Ok(UNetParams { config: *config, tensors })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.shape().count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }
}

/// Per-pixel cloudiness in [0,1] at the working resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMask {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl ProbabilityMask {
    /// Validates every value into [0,1]; NaN is rejected by the comparison.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<ProbabilityMask> {
        if values.len() != width * height {
            return Err(Error::config(format!(
                "probability mask length {} != {width}x{height}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config(format!("probability mask value {bad} outside [0,1]")));
        }
        Ok(ProbabilityMask { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Reinterprets a single-sample, single-channel output as a mask; values are
/// not touched (forward output is already inside (0,1)).
pub fn mask_of(output: &Tensor) -> Result<ProbabilityMask> {
    let s = output.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::BadShape {
            op: "mask_of",
            shape: s,
            reason: "expected a single-sample, single-channel tensor".into(),
        });
    }
    ProbabilityMask::from_values(s.w, s.h, output.data().to_vec())
}

/// Pushes all parameter tensors as tape leaves, in canonical order.
pub fn push_params(tape: &mut Tape, params: &UNetParams) -> Vec<ValueId> {
    params.tensors.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
}

fn check_batch(config: &UNetConfig, s: Shape) -> Result<()> {
    let unit = config.spatial_unit();
    if s.c != config.in_channels || s.h % unit != 0 || s.w % unit != 0 {
        return Err(Error::BadShape {
            op: "unet forward",
            shape: s,
            reason: format!(
                "batch must have {} channels and spatial dims divisible by {unit}",
                config.in_channels
            ),
        });
    }
    Ok(())
}

/// Records the network on `tape` using previously pushed parameter leaves.
/// Returns the output value id.
pub fn forward_on(tape: &mut Tape, config: &UNetConfig, param_ids: &[ValueId], input: ValueId) -> Result<ValueId> {
    let (out, _) = forward_traced(tape, config, param_ids, input)?;
    Ok(out)
}

/// Like [`forward_on`], also returning the encoder feature shapes per level
/// (before pooling) for structural audits.
pub fn forward_traced(
    tape: &mut Tape,
    config: &UNetConfig,
    param_ids: &[ValueId],
    input: ValueId,
) -> Result<(ValueId, Vec<Shape>)> {
    config.validate()?;
    check_batch(config, tape.shape(input))?;
    if param_ids.len() != 2 * config.layer_plan().len() {
        return Err(Error::config(format!(
            "expected {} parameter ids, got {}",
            2 * config.layer_plan().len(),
            param_ids.len()
        )));
    }
    let mut cursor = param_ids.iter();
    let mut next = || {
        let w = *cursor.next().expect("parameter id count validated");
        let b = *cursor.next().expect("parameter id count validated");
        (w, b)
    };

    let conv_relu = |tape: &mut Tape, (w, b): (ValueId, ValueId), x: ValueId| -> Result<ValueId> {
        let y = tape.conv2d(x, w, b, 1, 1)?;
        tape.relu(y)
    };

    let mut skips = Vec::with_capacity(config.depth);
    let mut skip_shapes = Vec::with_capacity(config.depth);
    let mut cur = input;
    for _ in 0..config.depth {
        cur = conv_relu(tape, next(), cur)?;
        cur = conv_relu(tape, next(), cur)?;
        skips.push(cur);
        skip_shapes.push(tape.shape(cur));
        cur = tape.max_pool2(cur)?;
    }
    cur = conv_relu(tape, next(), cur)?;
    cur = conv_relu(tape, next(), cur)?;
    for k in (1..=config.depth).rev() {
        cur = tape.upsample2(cur)?;
        cur = conv_relu(tape, next(), cur)?;
        cur = tape.concat_channels(skips[k - 1], cur)?;
        cur = conv_relu(tape, next(), cur)?;
        cur = conv_relu(tape, next(), cur)?;
    }
    let (w, b) = next();
    let logits = tape.conv2d(cur, w, b, 1, 0)?;
    let out = tape.logistic(logits)?;
    Ok((out, skip_shapes))
}

/// Pure forward pass: fresh throwaway tape, returns the output tensor.
pub fn forward(params: &UNetParams, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = push_params(&mut tape, params);
    let input = tape.leaf(batch.clone());
    let out = forward_on(&mut tape, &params.config, &ids, input)?;
    Ok(tape.value(out).clone())
}

/// Same layer sequence as [`forward_on`] through the f64 reference ops,
/// ending in the mse loss against `target`. Returns the loss and the kink
/// fingerprint of all relu/max-pool decisions. `override_param` substitutes
/// one parameter tensor by index.
pub fn reference_loss(
    params: &UNetParams,
    override_param: Option<(usize, &Tensor)>,
    batch: &Tensor,
    target: &Tensor,
) -> (f64, u64) {
    let config = &params.config;
    let tensor_at = |i: usize| -> Array4 {
        match override_param {
            Some((idx, t)) if idx == i => Array4::from_tensor(t),
            _ => Array4::from_tensor(&params.tensors[i].1),
        }
    };
    let mut idx = 0usize;
    let mut next = || {
        let w = tensor_at(idx);
        let b = tensor_at(idx + 1);
        idx += 2;
        (w, b)
    };
    let mut pat = PatternHash::new();
    let conv_relu = |pat: &mut PatternHash, (w, b): (Array4, Array4), x: &Array4| -> Array4 {
        let y = reference::conv2d(x, &w, &b.data, 1, 1);
        reference::relu(&y, pat)
    };

    let mut skips = Vec::with_capacity(config.depth);
    let mut cur = Array4::from_tensor(batch);
    for _ in 0..config.depth {
        cur = conv_relu(&mut pat, next(), &cur);
        cur = conv_relu(&mut pat, next(), &cur);
        skips.push(cur.clone());
        cur = reference::max_pool2(&cur, &mut pat);
    }
    cur = conv_relu(&mut pat, next(), &cur);
    cur = conv_relu(&mut pat, next(), &cur);
    for k in (1..=config.depth).rev() {
        cur = reference::upsample2(&cur);
        cur = conv_relu(&mut pat, next(), &cur);
        cur = reference::concat_channels(&skips[k - 1], &cur);
        cur = conv_relu(&mut pat, next(), &cur);
        cur = conv_relu(&mut pat, next(), &cur);
    }
    let (w, b) = next();
    let logits = reference::conv2d(&cur, &w, &b.data, 1, 0);
    let out = reference::logistic(&logits);
    let loss = reference::mse_loss(&out, &Array4::from_tensor(target));
    (loss, pat.value())
}

/// Scalar program for checking the end-to-end loss gradient w.r.t. one
/// parameter tensor, with the reference route supplying high-precision
/// values and kink fingerprints for the difference quotient.
pub struct UNetLossProbe<'a> {
    pub params: &'a UNetParams,
    pub param_index: usize,
    pub batch: &'a Tensor,
    pub target: &'a Tensor,
}

impl ScalarProgram for UNetLossProbe<'_> {
    fn build(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let ids: Vec<ValueId> = self
            .params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, (_, t))| if i == self.param_index { x } else { tape.leaf(t.clone()) })
            .collect();
        let input = tape.leaf(self.batch.clone());
        let out = forward_on(tape, &self.params.config, &ids, input)?;
        let target = tape.leaf(self.target.clone());
        tape.mse_loss(out, target)
    }

    fn eval_reference(&self, x: &Tensor) -> Option<(f64, u64)> {
        Some(reference_loss(self.params, Some((self.param_index, x)), self.batch, self.target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheck};
    use crate::tensor::probes::uniform_tensor;
    use rand::Rng;

    fn small_config() -> UNetConfig {
        UNetConfig { depth: 2, base_channels: 2, in_channels: 3, out_channels: 1, seed: 11 }
    }

    #[test]
    fn layer_plan_names_and_wiring_for_default_config() {
        let plan = UNetConfig::default().layer_plan();
        let names: Vec<&str> = plan.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "enc1.c1", "enc1.c2", "enc2.c1", "enc2.c2", "enc3.c1", "enc3.c2", "bot.c1",
                "bot.c2", "up3", "dec3.c1", "dec3.c2", "up2", "dec2.c1", "dec2.c2", "up1",
                "dec1.c1", "dec1.c2", "out",
            ]
        );
        // Input and output channels of consecutive layers must chain through
        // the pool/upsample/concat structure.
        let by_name = |n: &str| plan.iter().find(|s| s.name == n).unwrap();
        assert_eq!((by_name("enc1.c1").ci, by_name("enc1.c1").co), (3, 16));
        assert_eq!((by_name("enc3.c2").ci, by_name("enc3.c2").co), (64, 64));
        assert_eq!((by_name("bot.c1").ci, by_name("bot.c1").co), (64, 128));
        assert_eq!((by_name("up3").ci, by_name("up3").co), (128, 64));
        assert_eq!((by_name("dec3.c1").ci, by_name("dec3.c1").co), (128, 64));
        assert_eq!((by_name("out").ci, by_name("out").co), (16, 1));
        assert_eq!(by_name("out").kernel, 1);
        assert_eq!(by_name("out").pad, 0);
    }

    #[test]
    fn param_count_matches_hand_computed_totals() {
        let tiny = UNetConfig { depth: 1, base_channels: 1, in_channels: 3, out_channels: 1, seed: 0 };
        // Layer by layer: 28 + 10 + 20 + 38 + 19 + 19 + 10 + 2.
        assert_eq!(tiny.param_count(), 146);
        assert_eq!(UNetConfig::default().param_count(), 535_793);
        let params = UNetParams::init(&tiny).unwrap();
        assert_eq!(params.param_count(), 146);
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        for bad in [
            UNetConfig { depth: 0, ..UNetConfig::default() },
            UNetConfig { depth: 7, ..UNetConfig::default() },
            UNetConfig { base_channels: 0, ..UNetConfig::default() },
            UNetConfig { in_channels: 0, ..UNetConfig::default() },
            UNetConfig { out_channels: 0, ..UNetConfig::default() },
            UNetConfig { depth: 6, base_channels: 128, ..UNetConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "accepted {bad:?}");
        }
        UNetConfig::default().validate().unwrap();
    }

    #[test]
    fn init_is_seed_determined_with_zero_biases() {
        let config = small_config();
        let a = UNetParams::init(&config).unwrap();
        let b = UNetParams::init(&config).unwrap();
        for ((na, ta), (nb, tb)) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "same seed must reproduce {na} exactly");
        }
        let other = UNetParams::init(&UNetConfig { seed: 12, ..config }).unwrap();
        assert_ne!(a.tensors()[0].1.data(), other.tensors()[0].1.data());

        let plan = config.layer_plan();
        for (i, spec) in plan.iter().enumerate() {
            let bound = (6.0 / (spec.ci * spec.kernel * spec.kernel) as f64).sqrt() as f32;
            let (_, w) = &a.tensors()[2 * i];
            assert!(w.data().iter().all(|v| v.abs() < bound), "{} weight outside init bound", spec.name);
            let (_, bias) = &a.tensors()[2 * i + 1];
            assert!(bias.data().iter().all(|&v| v == 0.0), "{} bias not zero", spec.name);
        }
    }

    #[test]
    fn zero_parameters_output_exactly_half() {
        let config = small_config();
        let params = UNetParams::zeroed(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = uniform_tensor(Shape::new(2, 3, 8, 8), &mut rng, -1.0, 1.0);
        let out = forward(&params, &batch).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 1, 8, 8));
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_shapes_and_purity() {
        let config = small_config();
        let params = UNetParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = uniform_tensor(Shape::new(3, 3, 16, 24), &mut rng, 0.0, 1.0);
        let once = forward(&params, &batch).unwrap();
        let twice = forward(&params, &batch).unwrap();
        assert_eq!(once.shape(), Shape::new(3, 1, 16, 24));
        assert_eq!(once.data(), twice.data(), "forward must be a pure function of params and input");
        assert!(once.data().iter().all(|&v| 0.0 < v && v < 1.0), "outputs must stay strictly inside (0,1)");
    }

    #[test]
    fn forward_runs_default_network_at_working_resolution() {
        let config = UNetConfig::default();
        let params = UNetParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = uniform_tensor(Shape::new(1, 3, 128, 128), &mut rng, 0.0, 1.0);
        let out = forward(&params, &batch).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 128, 128));
        assert!(out.data().iter().all(|&v| 0.0 < v && v < 1.0));
    }

    #[test]
    fn encoder_features_halve_per_level() {
        let config = UNetConfig::default();
        let params = UNetParams::init(&config).unwrap();
        let mut tape = Tape::new();
        let ids = push_params(&mut tape, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = tape.leaf(uniform_tensor(Shape::new(1, 3, 128, 128), &mut rng, 0.0, 1.0));
        let (_, skips) = forward_traced(&mut tape, &config, &ids, input).unwrap();
        assert_eq!(skips.len(), 3);
        for (level, shape) in skips.iter().enumerate() {
            let side = 128 >> level;
            assert_eq!(*shape, Shape::new(1, 16 << level, side, side), "encoder level {level}");
        }
    }

    #[test]
    fn forward_rejects_wrong_channels_and_indivisible_dims() {
        let config = small_config();
        let params = UNetParams::init(&config).unwrap();
        let bad_c = Tensor::zeros(Shape::new(1, 2, 16, 16));
        assert!(forward(&params, &bad_c).is_err());
        let bad_h = Tensor::zeros(Shape::new(1, 3, 18, 16));
        assert!(forward(&params, &bad_h).is_err());
        let bad_w = Tensor::zeros(Shape::new(1, 3, 16, 10));
        assert!(forward(&params, &bad_w).is_err());
    }

    #[test]
    fn mask_of_requires_single_sample_single_channel() {
        let config = small_config();
        let params = UNetParams::zeroed(&config).unwrap();
        let out = forward(&params, &Tensor::zeros(Shape::new(1, 3, 8, 8))).unwrap();
        let mask = mask_of(&out).unwrap();
        assert_eq!((mask.width(), mask.height()), (8, 8));
        assert!(mask.values().iter().all(|&v| v == 0.5));
        assert_eq!(mask.get(3, 5), 0.5);

        assert!(mask_of(&Tensor::zeros(Shape::new(2, 1, 8, 8))).is_err());
        assert!(mask_of(&Tensor::zeros(Shape::new(1, 2, 8, 8))).is_err());
    }

    #[test]
    fn probability_mask_rejects_out_of_range_values() {
        assert!(ProbabilityMask::from_values(2, 1, vec![0.0, 1.0]).is_ok());
        assert!(ProbabilityMask::from_values(2, 1, vec![0.0]).is_err());
        assert!(ProbabilityMask::from_values(2, 1, vec![0.0, 1.5]).is_err());
        assert!(ProbabilityMask::from_values(2, 1, vec![f32::NAN, 0.5]).is_err());
    }

    #[test]
    fn from_tensors_round_trips_and_validates() {
        let config = small_config();
        let params = UNetParams::init(&config).unwrap();
        let rebuilt = UNetParams::from_tensors(&config, params.tensors().to_vec()).unwrap();
        assert_eq!(rebuilt.tensors().len(), params.tensors().len());

        let mut renamed = params.tensors().to_vec();
        renamed[0].0 = "enc1.c9.w".into();
        assert!(UNetParams::from_tensors(&config, renamed).is_err());

        let mut swapped = params.tensors().to_vec();
        swapped.swap(0, 2);
        assert!(UNetParams::from_tensors(&config, swapped).is_err());

        let mut reshaped = params.tensors().to_vec();
        reshaped[1].1 = Tensor::zeros(Shape::new(1, 3, 1, 1));
        assert!(UNetParams::from_tensors(&config, reshaped).is_err());

        let short = params.tensors()[..4].to_vec();
        assert!(UNetParams::from_tensors(&config, short).is_err());
    }

    /// End-to-end check: the analytic loss gradient w.r.t. every parameter
    /// tensor agrees with central differences through the f64 reference
    /// forward, on a reduced 16x16 depth-2 network.
    #[test]
    fn loss_gradient_matches_difference_quotient_for_every_parameter() {
        let config = small_config();
        let params = UNetParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = uniform_tensor(Shape::new(1, 3, 16, 16), &mut rng, 0.0, 1.0);
        let target_data: Vec<f32> = (0..256).map(|_| *[0.0f32, 0.5, 1.0].iter().nth(rng.gen_range(0..3)).unwrap()).collect();
        let target = Tensor::new(Shape::new(1, 1, 16, 16), target_data).unwrap();

        // The difference quotient runs through the f64 route, so a small
        // step costs no precision and keeps the nudge from flipping relu
        // signs downstream. Tiny gradients vanish under f32 rounding of the
        // nudged parameter; the floor skips those instead of comparing noise.
        let opts = GradCheck { step: 1e-4, zero_floor: 1e-6 };
        let mut total_checked = 0usize;
        let mut total_coords = 0usize;
        let mut worst = 0.0f64;
        for (index, (name, tensor)) in params.tensors().iter().enumerate() {
            let probe = UNetLossProbe { params: &params, param_index: index, batch: &batch, target: &target };
            let report = grad_check(&probe, tensor, &opts).unwrap();
            assert!(
                report.max_rel_error < 1e-3,
                "{name}: rel error {} at coord {}",
                report.max_rel_error,
                report.worst_coord
            );
            total_checked += report.checked;
            total_coords += tensor.shape().count();
            worst = worst.max(report.max_rel_error);
        }
        assert_eq!(total_coords, 2119);
        assert!(total_checked > 1800, "only {total_checked} of {total_coords} coordinates were checkable");
        assert!(worst < 1e-3);
    }
}
