//! CPU-only engine for probabilistic sky/cloud segmentation.
//!
//! The crate trains a small U-Net to predict a per-pixel cloudiness value in
//! [0, 1] from an RGB sky image, then thresholds the prediction into a
//! ternary sky / thin-cloud / thick-cloud map. Everything runs on a single
//! core with no external compute libraries: the tensor kernels, the
//! reverse-mode autodiff tape, the optimizer, and the evaluation protocol are
//! all in this crate.
//!
//! Module map:
//! - [`tensor`]: rank-4 tensors, the autodiff tape, and a slow reference
//!   implementation used to cross-check the fast kernels.
//! - [`unet`]: network configuration, parameter initialization, forward pass.
//! - [`data`]: dataset loading, resizing, target encoding, synthetic fixtures.
//! - [`trainer`]: Adam, the training loop, checkpoints.
//! - [`metrics`]: thresholding, per-label error percentages, renderings.
//! - [`experiment`]: the repeated-split evaluation protocol and its reports.

pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};

/// Derives an independent stream seed from a base seed and a salt.
///
/// Distinct salts give statistically unrelated seeds even for consecutive
/// bases. The mixer is the splitmix64 finalizer, chosen because it is a
/// bijection per salt and has full avalanche; the exact constants are part of
/// the reproducibility contract and must not change.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
