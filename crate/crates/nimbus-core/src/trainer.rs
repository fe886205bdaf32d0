//! Adam optimization, the seeded training loop, and checkpoints.
//!
//! Training is deterministic end to end: the sample order of epoch `e` is
//! drawn from a generator seeded with `derive_seed(seed, e)`, so it depends
//! only on the configured seed and the epoch number, never on how many
//! steps ran before. Together with checkpointing the full optimizer state,
//! that makes resumed training bitwise identical to uninterrupted training.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch, Sample};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor};
use crate::unet::{forward_on, push_params, UNetConfig, UNetParams};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} must be positive and finite", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!("{name} {beta} outside [0, 1)")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon {} must be positive and finite", self.epsilon)));
        }
        Ok(())
    }
}

/// Training loop configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Total epochs the state should reach; resuming continues toward this.
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    /// Seed for the per-epoch sample order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 300, batch_size: 4, adam: AdamParams::default(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        self.adam.validate()
    }
}

/// Mean per-pixel loss of one completed epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub mean_loss: f64,
}

/// Network parameters plus the optimizer state that tracks them.
#[derive(Clone, Debug)]
pub struct TrainState {
    params: UNetParams,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    epoch: u64,
    step: u64,
}

impl TrainState {
    /// Fresh state with zeroed moments around the given parameters.
    pub fn new(params: UNetParams) -> TrainState {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        TrainState { m: zeros.clone(), v: zeros, params, epoch: 0, step: 0 }
    }

    pub fn params(&self) -> &UNetParams {
        &self.params
    }

    pub fn into_params(self) -> UNetParams {
        self.params
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update on a single tensor. `t` is the 1-based step count after
/// this update; both moment estimates are bias-corrected with it.
fn adam_update(name: &str, theta: &mut [f32], m: &mut [f32], v: &mut [f32], grad: &[f32], t: u64, p: &AdamParams) -> Result<()> {
    debug_assert!(t >= 1);
    let t = t.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - p.beta1.powi(t);
    let bc2 = 1.0 - p.beta2.powi(t);
    for (((theta, m), v), &g) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
        if !g.is_finite() {
            return Err(Error::non_finite(format!("gradient of {name}")));
        }
        *m = p.beta1 * *m + (1.0 - p.beta1) * g;
        *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta -= p.lr * m_hat / (v_hat.sqrt() + p.epsilon);
    }
    Ok(())
}

/// Runs one optimization step on a prepared batch and returns the loss.
fn train_step(state: &mut TrainState, tape: &mut Tape, input: Tensor, target: Tensor, adam: &AdamParams) -> Result<f64> {
    tape.reset();
    let ids = push_params(tape, &state.params);
    let input_id = tape.leaf(input);
    let target_id = tape.leaf(target);
    let config = *state.params.config();
    let out = forward_on(tape, &config, &ids, input_id)?;
    let loss = tape.mse_loss(out, target_id)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).data()[0] as f64;
    if !loss_value.is_finite() {
        return Err(Error::non_finite("training loss"));
    }
    state.step += 1;
    let t = state.step;
    for (i, ((name, tensor), id)) in state.params.tensors_mut().zip(&ids).enumerate() {
        let grad = tape.grad(*id).expect("backward reaches every parameter");
        adam_update(name, tensor.data_mut(), state.m[i].data_mut(), state.v[i].data_mut(), grad, t, adam)?;
    }
    Ok(loss_value)
}

/// Trains until `cfg.epochs` epochs are complete, continuing from wherever
/// `state` left off, and returns stats for the epochs run here. Every epoch
/// visits all samples once in a seed-determined order; the trailing batch may
/// be smaller than `cfg.batch_size`.
pub fn train(state: &mut TrainState, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut tape = Tape::new();
    let mut stats = Vec::new();
    while state.epoch < cfg.epochs as u64 {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch));
        order.shuffle(&mut rng);
        let mut weighted_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (input, target) = batch(samples, chunk);
            let loss = train_step(state, &mut tape, input, target, &cfg.adam)?;
            weighted_loss += loss * chunk.len() as f64;
        }
        state.epoch += 1;
        stats.push(EpochStats { epoch, mean_loss: weighted_loss / samples.len() as f64 });
    }
    Ok(stats)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NMBS";
const CHECKPOINT_VERSION: u8 = 1;

fn push_tensor_record(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    let bytes = name.as_bytes();
    assert!(bytes.len() <= u16::MAX as usize, "tensor name too long");
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    out.push(4);
    let s = tensor.shape();
    for dim in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the full training state: network configuration, progress
/// counters, parameters, and both Adam moments. Loading restores a state
/// that trains bitwise identically to one that never stopped.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let c = state.params.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    let header = format!(
        "depth={}\nbase_channels={}\nin_channels={}\nout_channels={}\nseed={}\nepoch={}\nstep={}\n",
        c.depth, c.base_channels, c.in_channels, c.out_channels, c.seed, state.epoch, state.step
    );
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(3 * state.params.tensors().len() as u32).to_le_bytes());
    for (name, tensor) in state.params.tensors() {
        push_tensor_record(&mut out, name, tensor);
    }
    for (prefix, moments) in [("m.", &state.m), ("v.", &state.v)] {
        for ((name, _), moment) in state.params.tensors().iter().zip(moments) {
            push_tensor_record(&mut out, &format!("{prefix}{name}"), moment);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Checkpoint { path: self.path.into(), reason: format!("truncated while reading {what}") });
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("length checked")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("length checked")))
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint { path: self.path.into(), reason: reason.into() }
    }
}

fn read_tensor_record(r: &mut Reader) -> Result<(String, Tensor)> {
    let name_len = r.u16("a tensor name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "a tensor name")?)
        .map_err(|_| r.fail("tensor name is not valid UTF-8"))?
        .to_string();
    let rank = r.u8(&format!("rank of {name}"))?;
    if rank != 4 {
        return Err(r.fail(format!("tensor {name} has rank {rank}, expected 4")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32(&format!("dimensions of {name}"))? as usize;
    }
    let count = dims.iter().product::<usize>();
    let raw = r.take(4 * count, &format!("values of {name}"))?;
    let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("chunk size"))).collect();
    let tensor = Tensor::new(Shape::new(dims[0], dims[1], dims[2], dims[3]), data)
        .map_err(|e| r.fail(format!("tensor {name}: {e}")))?;
    Ok((name, tensor))
}

fn header_fields(text: &str, path: &Path) -> Result<std::collections::HashMap<String, u64>> {
    let mut fields = std::collections::HashMap::new();
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint { path: path.into(), reason: format!("malformed header line {line:?}") })?;
        let value: u64 = value
            .parse()
            .map_err(|_| Error::Checkpoint { path: path.into(), reason: format!("header field {key} has non-numeric value {value:?}") })?;
        if fields.insert(key.to_string(), value).is_some() {
            return Err(Error::Checkpoint { path: path.into(), reason: format!("duplicate header field {key}") });
        }
    }
    Ok(fields)
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4, "the magic number")? != CHECKPOINT_MAGIC {
        return Err(r.fail("not a checkpoint file (bad magic number)"));
    }
    let version = r.u8("the format version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported format version {version}")));
    }
    let header_len = r.u32("the header length")? as usize;
    let header = std::str::from_utf8(r.take(header_len, "the header")?)
        .map_err(|_| r.fail("header is not valid UTF-8"))?
        .to_string();
    let mut fields = header_fields(&header, path)?;
    let mut field = |key: &str| -> Result<u64> {
        fields.remove(key).ok_or_else(|| Error::Checkpoint { path: path.into(), reason: format!("header is missing {key}") })
    };
    let config = UNetConfig {
        depth: field("depth")? as usize,
        base_channels: field("base_channels")? as usize,
        in_channels: field("in_channels")? as usize,
        out_channels: field("out_channels")? as usize,
        seed: field("seed")?,
    };
    let epoch = field("epoch")?;
    let step = field("step")?;
    if let Some(key) = fields.keys().next() {
        return Err(r.fail(format!("unknown header field {key}")));
    }
    let record_count = r.u32("the tensor count")? as usize;
    if record_count % 3 != 0 {
        return Err(r.fail(format!("tensor count {record_count} is not three records per parameter")));
    }
    let param_count = record_count / 3;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        params.push(read_tensor_record(&mut r)?);
    }
    let params = UNetParams::from_tensors(&config, params)?;
    let mut moments = Vec::with_capacity(2 * param_count);
    for prefix in ["m.", "v."] {
        for (name, tensor) in params.tensors() {
            let (got_name, moment) = read_tensor_record(&mut r)?;
            let expected = format!("{prefix}{name}");
            if got_name != expected {
                return Err(r.fail(format!("expected moment tensor {expected}, found {got_name}")));
            }
            if moment.shape() != tensor.shape() {
                return Err(r.fail(format!("moment tensor {got_name} has shape {}, parameter has {}", moment.shape(), tensor.shape())));
            }
            moments.push(moment);
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    let v = moments.split_off(param_count);
    Ok(TrainState { params, m: moments, v, epoch, step })
}
