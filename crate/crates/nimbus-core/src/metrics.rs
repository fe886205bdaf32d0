//! Thresholding cloudiness maps into ternary labels and scoring them.
//!
//! A predicted probability `p` classifies as sky below the lower threshold,
//! thin cloud from there up to just below the upper threshold, and thick
//! cloud at the upper threshold and above. Scoring pools pixel counts over
//! all evaluated images first and divides once per label, so images with
//! more pixels of a label weigh proportionally more; a label that never
//! occurs in the ground truth yields no score rather than a zero.

use std::path::Path;

use crate::data::{Label, LabelMask, LABELS};
use crate::error::{Error, Result};
use crate::unet::ProbabilityMask;

/// Cut points separating the three labels on the cloudiness axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub lower: f32,
    pub upper: f32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { lower: 0.3, upper: 0.6 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lower && self.lower < self.upper && self.upper < 1.0) {
            return Err(Error::config(format!(
                "thresholds must satisfy 0 < lower < upper < 1, got {} and {}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    /// Classifies one cloudiness value; both cut points belong to the label
    /// above them.
    pub fn classify(&self, p: f32) -> Label {
        if p < self.lower {
            Label::Sky
        } else if p < self.upper {
            Label::Thin
        } else {
            Label::Thick
        }
    }
}

/// Applies the thresholds to every pixel of a cloudiness map.
pub fn ternarize(mask: &ProbabilityMask, thresholds: &Thresholds) -> LabelMask {
    let labels = mask.values().iter().map(|&p| thresholds.classify(p)).collect();
    LabelMask::new(mask.width(), mask.height(), labels).expect("probability mask dimensions are valid")
}

/// Misclassification percentage per label, `None` where the ground truth
/// contains no pixel of that label.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LabelErrors {
    pub sky: Option<f64>,
    pub thin: Option<f64>,
    pub thick: Option<f64>,
}

impl LabelErrors {
    pub fn get(&self, label: Label) -> Option<f64> {
        match label {
            Label::Sky => self.sky,
            Label::Thin => self.thin,
            Label::Thick => self.thick,
        }
    }

    fn set(&mut self, label: Label, value: Option<f64>) {
        match label {
            Label::Sky => self.sky = value,
            Label::Thin => self.thin = value,
            Label::Thick => self.thick = value,
        }
    }
}

/// Pixel tallies pooled over any number of prediction/truth pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    wrong: [u64; 3],
    total: [u64; 3],
}

impl ErrorCounts {
    /// Tallies one image: for every pixel, the truth label's total grows,
    /// and its wrong count grows when the prediction disagrees.
    pub fn add(&mut self, predicted: &LabelMask, truth: &LabelMask) {
        assert!(
            predicted.width() == truth.width() && predicted.height() == truth.height(),
            "prediction {}x{} does not match truth {}x{}",
            predicted.width(),
            predicted.height(),
            truth.width(),
            truth.height()
        );
        for (&p, &t) in predicted.labels().iter().zip(truth.labels()) {
            self.total[t.index()] += 1;
            if p != t {
                self.wrong[t.index()] += 1;
            }
        }
    }

    /// Percentage of each label's pixels that were misclassified.
    pub fn percentages(&self) -> LabelErrors {
        let mut errors = LabelErrors::default();
        for label in LABELS {
            let i = label.index();
            let value = if self.total[i] == 0 { None } else { Some(100.0 * self.wrong[i] as f64 / self.total[i] as f64) };
            errors.set(label, value);
        }
        errors
    }
}

/// Scores one prediction against its ground truth.
pub fn per_label_error(predicted: &LabelMask, truth: &LabelMask) -> LabelErrors {
    let mut counts = ErrorCounts::default();
    counts.add(predicted, truth);
    counts.percentages()
}

/// Per-label mean over runs, skipping runs where the label was absent. A
/// label absent from every run stays absent.
pub fn mean_errors(runs: &[LabelErrors]) -> LabelErrors {
    let mut means = LabelErrors::default();
    for label in LABELS {
        let present: Vec<f64> = runs.iter().filter_map(|r| r.get(label)).collect();
        let value = if present.is_empty() { None } else { Some(present.iter().sum::<f64>() / present.len() as f64) };
        means.set(label, value);
    }
    means
}

/// Diverging cold-to-warm color for a cloudiness value in [0, 1]: blue at 0,
/// light gray at 0.5, red at 1.
pub fn coolwarm(v: f64) -> [u8; 3] {
    const BLUE: [f64; 3] = [59.0, 76.0, 192.0];
    const GRAY: [f64; 3] = [221.0, 221.0, 221.0];
    const RED: [f64; 3] = [180.0, 4.0, 38.0];
    let v = v.clamp(0.0, 1.0);
    let (a, b, s) = if v <= 0.5 { (BLUE, GRAY, v / 0.5) } else { (GRAY, RED, (v - 0.5) / 0.5) };
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] + (b[c] - a[c]) * s + 0.5).floor() as u8;
    }
    out
}

/// Gray triple reusing the dataset mask byte on all three channels, so a
/// rendered ground-truth mask re-encodes its own code losslessly.
fn label_color(label: Label) -> [u8; 3] {
    let b = label.mask_byte();
    [b, b, b]
}

fn save_rgb(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .expect("pixel buffer matches dimensions")
        .save(path)
        .map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })
}

/// Writes a cloudiness map as a color PNG under the diverging palette.
pub fn save_probability_color(path: &Path, mask: &ProbabilityMask) -> Result<()> {
    let bytes = mask.values().iter().flat_map(|&p| coolwarm(p as f64)).collect();
    save_rgb(path, mask.width(), mask.height(), bytes)
}

/// Writes a cloudiness map as a 16-bit grayscale PNG, scaling [0, 1] to the
/// full sample range.
pub fn save_probability_gray16(path: &Path, mask: &ProbabilityMask) -> Result<()> {
    let values: Vec<u16> = mask.values().iter().map(|&p| (p as f64 * 65535.0 + 0.5).floor() as u16).collect();
    image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(mask.width() as u32, mask.height() as u32, values)
        .expect("pixel buffer matches dimensions")
        .save(path)
        .map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })
}

/// Loads a cloudiness map from a grayscale PNG: 16-bit samples scale by
/// 1/65535, anything else decodes through 8-bit and scales by 1/255.
pub fn load_probability_mask(path: &Path) -> Result<ProbabilityMask> {
    let decoded = image::open(path).map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let values: Vec<f32> = match decoded {
        image::DynamicImage::ImageLuma16(img) => img.into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        other => other.into_luma8().into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    };
    ProbabilityMask::from_values(w, h, values)
}

/// Writes a ternary map as an RGB PNG of black, mid-gray, and white pixels.
pub fn save_ternary_color(path: &Path, mask: &LabelMask) -> Result<()> {
    let bytes = mask.labels().iter().flat_map(|&l| label_color(l)).collect();
    save_rgb(path, mask.width(), mask.height(), bytes)
}

/// Writes a ternary map in the dataset mask format, one label byte per
/// pixel, so predictions can be reloaded like ground truth.
pub fn save_ternary_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let bytes: Vec<u8> = mask.labels().iter().map(|l| l.mask_byte()).collect();
    image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("pixel buffer matches dimensions")
        .save(path)
        .map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })
}
