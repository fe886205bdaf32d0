//! Dataset loading, resampling, target encoding, and synthetic fixtures.
//!
//! A dataset is a tab-separated manifest listing an RGB sky photograph and a
//! ternary label mask per line. Everything is resampled to
//! [`WORKING_SIZE`] x [`WORKING_SIZE`] at load time: images bilinearly,
//! masks by nearest neighbor so no new label values appear. Both resamplers
//! align pixel centers, which makes a same-size resample the identity.
//!
//! Mask files are 8-bit grayscale with exactly three legal values: 0 (clear
//! sky), 128 (thin cloud), 255 (thick cloud). The training target for a
//! pixel is its label's cloudiness value 0.0, 0.5, or 1.0.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::derive_seed;

/// Side length every sample is resampled to before training or inference.
pub const WORKING_SIZE: usize = 128;

/// Ternary class of one ground-truth pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Sky,
    Thin,
    Thick,
}

/// All labels in index order.
pub const LABELS: [Label; 3] = [Label::Sky, Label::Thin, Label::Thick];

impl Label {
    /// The byte representing this label in mask files.
    pub fn mask_byte(self) -> u8 {
        match self {
            Label::Sky => 0,
            Label::Thin => 128,
            Label::Thick => 255,
        }
    }

    pub fn from_mask_byte(byte: u8) -> Option<Label> {
        match byte {
            0 => Some(Label::Sky),
            128 => Some(Label::Thin),
            255 => Some(Label::Thick),
            _ => None,
        }
    }

    /// Cloudiness value the network is trained to output for this label.
    pub fn target_value(self) -> f32 {
        match self {
            Label::Sky => 0.0,
            Label::Thin => 0.5,
            Label::Thick => 1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Label::Sky => 0,
            Label::Thin => 1,
            Label::Thick => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Sky => "sky",
            Label::Thin => "thin",
            Label::Thick => "thick",
        }
    }
}

/// RGB image with planar channel layout and values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SkyImage {
    width: usize,
    height: usize,
    planes: Vec<f32>,
}

impl SkyImage {
    /// `planes` holds the three channels concatenated, each row-major.
    pub fn new(width: usize, height: usize, planes: Vec<f32>) -> Result<SkyImage> {
        if width == 0 || height == 0 || planes.len() != 3 * width * height {
            return Err(Error::config(format!(
                "sky image {}x{} needs {} plane values, got {}",
                width,
                height,
                3 * width * height,
                planes.len()
            )));
        }
        if let Some(v) = planes.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config(format!("sky image value {v} outside [0, 1]")));
        }
        Ok(SkyImage { width, height, planes })
    }

    fn from_rgb8(width: usize, height: usize, interleaved: &[u8]) -> SkyImage {
        let npix = width * height;
        let mut planes = vec![0.0f32; 3 * npix];
        for (i, px) in interleaved.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planes[c * npix + i] = px[c] as f32 / 255.0;
            }
        }
        SkyImage { width, height, planes }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Planar channel data: red plane, then green, then blue.
    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    /// Bilinear resample with pixel-center alignment. Resampling to the
    /// current size reproduces the image exactly.
    pub fn resized(&self, width: usize, height: usize) -> SkyImage {
        assert!(width >= 1 && height >= 1, "resize target must be nonempty");
        if width == self.width && height == self.height {
            return self.clone();
        }
        let npix = width * height;
        let mut planes = vec![0.0f32; 3 * npix];
        for c in 0..3 {
            let src = &self.planes[c * self.width * self.height..][..self.width * self.height];
            resample_bilinear(src, self.width, self.height, &mut planes[c * npix..][..npix], width, height);
        }
        SkyImage { width, height, planes }
    }

    /// Network input layout for a single image: `(1, 3, h, w)`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(Shape::new(1, 3, self.height, self.width), self.planes.clone())
            .expect("image planes match their declared size")
    }
}

/// Per-pixel ground-truth labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<LabelMask> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::config(format!(
                "label mask {}x{} needs {} labels, got {}",
                width,
                height,
                width * height,
                labels.len()
            )));
        }
        Ok(LabelMask { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    /// Pixels per label, indexed by [`Label::index`].
    pub fn counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }

    /// Row-major training target plane with one cloudiness value per pixel.
    pub fn target_plane(&self) -> Vec<f32> {
        self.labels.iter().map(|l| l.target_value()).collect()
    }

    /// Nearest-neighbor resample with pixel-center alignment, so the result
    /// contains only labels present in the source.
    pub fn resized(&self, width: usize, height: usize) -> LabelMask {
        assert!(width >= 1 && height >= 1, "resize target must be nonempty");
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = nearest_source(y, height, self.height);
            for x in 0..width {
                let sx = nearest_source(x, width, self.width);
                labels.push(self.labels[sy * self.width + sx]);
            }
        }
        LabelMask { width, height, labels }
    }
}

/// One dataset entry at working resolution.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: SkyImage,
    pub mask: LabelMask,
}

impl Sample {
    /// Returns the sample resized to the square working resolution; a sample
    /// already at that size comes back unchanged.
    pub fn to_working(&self) -> Sample {
        let s = WORKING_SIZE;
        Sample {
            id: self.id.clone(),
            image: if self.image.width() == s && self.image.height() == s {
                self.image.clone()
            } else {
                self.image.resized(s, s)
            },
            mask: if self.mask.width() == s && self.mask.height() == s {
                self.mask.clone()
            } else {
                self.mask.resized(s, s)
            },
        }
    }
}

/// Stacks the selected samples into a `(b, 3, s, s)` input tensor and a
/// `(b, 1, s, s)` cloudiness target tensor, in the order given by `idx`.
pub fn batch(samples: &[Sample], idx: &[usize]) -> (Tensor, Tensor) {
    assert!(!idx.is_empty(), "batch needs at least one sample");
    let s = WORKING_SIZE;
    let npix = s * s;
    let mut input = vec![0.0f32; idx.len() * 3 * npix];
    let mut target = vec![0.0f32; idx.len() * npix];
    for (b, &i) in idx.iter().enumerate() {
        let sample = &samples[i];
        assert!(
            sample.image.width() == s && sample.image.height() == s && sample.mask.width() == s && sample.mask.height() == s,
            "sample {} is not at working resolution",
            sample.id
        );
        input[b * 3 * npix..][..3 * npix].copy_from_slice(sample.image.planes());
        for (t, l) in target[b * npix..][..npix].iter_mut().zip(sample.mask.labels()) {
            *t = l.target_value();
        }
    }
    let input = Tensor::new(Shape::new(idx.len(), 3, s, s), input).expect("batch input size");
    let target = Tensor::new(Shape::new(idx.len(), 1, s, s), target).expect("batch target size");
    (input, target)
}

/// Maps destination pixel centers into the source grid:
/// `(d + 0.5) * sw / dw - 0.5`.
fn source_coord(d: usize, dn: usize, sn: usize) -> f64 {
    (d as f64 + 0.5) * (sn as f64 / dn as f64) - 0.5
}

fn nearest_source(d: usize, dn: usize, sn: usize) -> usize {
    let s = source_coord(d, dn, sn).round();
    (s.max(0.0) as usize).min(sn - 1)
}

fn resample_bilinear(src: &[f32], sw: usize, sh: usize, dst: &mut [f32], dw: usize, dh: usize) {
    for dy in 0..dh {
        let sy = source_coord(dy, dh, sh).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f64;
        for dx in 0..dw {
            let sx = source_coord(dx, dw, sw).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = sx - x0 as f64;
            let v00 = src[y0 * sw + x0] as f64;
            let v01 = src[y0 * sw + x1] as f64;
            let v10 = src[y1 * sw + x0] as f64;
            let v11 = src[y1 * sw + x1] as f64;
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            dst[dy * dw + dx] = (top + (bottom - top) * fy) as f32;
        }
    }
}

/// Loads an RGB image and resamples it to working resolution. 8-bit RGB is
/// accepted as is; 8-bit RGBA drops its alpha channel with a warning.
pub fn load_image(path: &Path) -> Result<SkyImage> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        image::DynamicImage::ImageRgba8(rgba) => {
            log::warn!("{}: dropping alpha channel", path.display());
            image::DynamicImage::ImageRgba8(rgba).to_rgb8()
        }
        other => {
            return Err(Error::Image {
                path: path.into(),
                reason: format!("unsupported color type {:?}, expected 8-bit RGB", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Image { path: path.into(), reason: "empty image".into() });
    }
    Ok(SkyImage::from_rgb8(w as usize, h as usize, rgb.as_raw()).resized(WORKING_SIZE, WORKING_SIZE))
}

/// Loads a ternary label mask and resamples it to working resolution.
/// Every source pixel must be one of the three label bytes.
pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Image {
                path: path.into(),
                reason: format!("unsupported color type {:?}, expected 8-bit grayscale", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Image { path: path.into(), reason: "empty mask".into() });
    }
    let mut labels = Vec::with_capacity((w * h) as usize);
    for (i, &byte) in gray.as_raw().iter().enumerate() {
        match Label::from_mask_byte(byte) {
            Some(l) => labels.push(l),
            None => {
                return Err(Error::MaskValue {
                    path: path.into(),
                    x: (i as u32) % w,
                    y: (i as u32) / w,
                    value: byte,
                })
            }
        }
    }
    let mask = LabelMask::new(w as usize, h as usize, labels)?;
    Ok(mask.resized(WORKING_SIZE, WORKING_SIZE))
}

/// Loads a dataset manifest: one `image<TAB>mask[<TAB>id]` entry per line,
/// paths relative to the manifest's directory. Blank lines and lines starting
/// with `#` are skipped; a missing id defaults to the image file stem. Ids
/// must be unique.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Manifest {
                path: path.into(),
                line: lineno + 1,
                reason: format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let image_path = base.join(fields[0]);
        let mask_path = base.join(fields[1]);
        let id = match fields.get(2) {
            Some(id) if !id.is_empty() => (*id).to_string(),
            _ => image_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Manifest {
                    path: path.into(),
                    line: lineno + 1,
                    reason: "cannot derive an id from the image path; add an id field".into(),
                })?,
        };
        if !seen.insert(id.clone()) {
            return Err(Error::Manifest {
                path: path.into(),
                line: lineno + 1,
                reason: format!("duplicate sample id {id:?}"),
            });
        }
        samples.push(Sample { id, image: load_image(&image_path)?, mask: load_mask(&mask_path)? });
    }
    Ok(samples)
}

/// Shuffles `0..n` with the seeded generator and splits off
/// `round(train_frac * n)` training indices, at least one on each side.
/// Both halves come back sorted ascending.
pub fn random_split(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::config(format!("cannot split {n} samples into nonempty train and test sets")));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::config(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Smoothstep falloff of an axis-aligned elliptical blob at `(x, y)`.
fn blob_alpha(x: f64, y: f64, blob: &SynthBlob) -> f64 {
    let dx = (x - blob.cx) / blob.rx;
    let dy = (y - blob.cy) / blob.ry;
    let falloff = (1.0 - (dx * dx + dy * dy)).clamp(0.0, 1.0);
    blob.peak * falloff * falloff * (3.0 - 2.0 * falloff)
}

struct SynthBlob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    peak: f64,
}

fn draw_blobs(rng: &mut ChaCha8Rng, count: usize, peak_range: std::ops::Range<f64>, radius_range: std::ops::Range<f64>) -> Vec<SynthBlob> {
    (0..count)
        .map(|_| SynthBlob {
            cx: rng.gen_range(0.0..WORKING_SIZE as f64),
            cy: rng.gen_range(0.0..WORKING_SIZE as f64),
            rx: rng.gen_range(radius_range.clone()),
            ry: rng.gen_range(radius_range.clone()),
            peak: rng.gen_range(peak_range.clone()),
        })
        .collect()
}

/// One synthetic scene as quantized image bytes and mask bytes, so the
/// in-memory fixtures and their PNG round trip hold identical values.
fn synth_scene(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let s = WORKING_SIZE;
    loop {
        let n_thick = rng.gen_range(2..=4);
        let thick = draw_blobs(rng, n_thick, 0.65..0.92, 14.0..34.0);
        let n_thin = rng.gen_range(2..=4);
        let thin = draw_blobs(rng, n_thin, 0.28..0.45, 18.0..46.0);
        let cloud_gray = rng.gen_range(0.86..0.97);
        let mut rgb = Vec::with_capacity(3 * s * s);
        let mut mask = Vec::with_capacity(s * s);
        let mut counts = [0usize; 3];
        for y in 0..s {
            let t = y as f64 / (s - 1) as f64;
            // Vertical sky gradient: deep blue up top, haze at the horizon.
            let sky = [
                0.13 + 0.42 * t,
                0.33 + 0.39 * t,
                0.68 + 0.24 * t,
            ];
            for x in 0..s {
                let mut alpha = 0.0f64;
                for blob in thick.iter().chain(&thin) {
                    alpha = alpha.max(blob_alpha(x as f64, y as f64, blob));
                }
                let label = if alpha < 0.2 {
                    Label::Sky
                } else if alpha < 0.5 {
                    Label::Thin
                } else {
                    Label::Thick
                };
                counts[label.index()] += 1;
                mask.push(label.mask_byte());
                for ch in sky {
                    let v = ch + (cloud_gray - ch) * alpha;
                    rgb.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        // Keep only scenes where every label is visibly represented, so a
        // per-label training or test metric never sits on a handful of
        // pixels. The draws converge in a try or two.
        if counts.iter().all(|&c| c * 25 >= s * s) {
            return (rgb, mask);
        }
    }
}

/// Deterministic synthetic scenes: gradient sky behind smooth cloud blobs,
/// labeled from the blob opacity that generated each pixel.
pub fn synthetic_samples(count: usize, seed: u64) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let (rgb, mask_bytes) = synth_scene(&mut rng);
            let labels = mask_bytes.iter().map(|&b| Label::from_mask_byte(b).expect("generated byte is a label")).collect();
            Sample {
                id: format!("synth-{i:03}"),
                image: SkyImage::from_rgb8(WORKING_SIZE, WORKING_SIZE, &rgb),
                mask: LabelMask::new(WORKING_SIZE, WORKING_SIZE, labels).expect("generated mask size"),
            }
        })
        .collect()
}

/// Writes `count` synthetic scenes under `dir` as PNG files plus a
/// `manifest.tsv`, and returns the manifest path. Loading that manifest
/// reproduces [`synthetic_samples`] with the same arguments exactly.
pub fn write_synthetic_dataset(dir: &Path, count: usize, seed: u64) -> Result<PathBuf> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut manifest = String::new();
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let (rgb, mask) = synth_scene(&mut rng);
        let id = format!("synth-{i:03}");
        let image_path = images.join(format!("{id}.png"));
        let mask_path = masks.join(format!("{id}.png"));
        let s = WORKING_SIZE as u32;
        image::RgbImage::from_raw(s, s, rgb)
            .expect("rgb buffer matches dimensions")
            .save(&image_path)
            .map_err(|e| Error::Image { path: image_path.clone(), reason: e.to_string() })?;
        image::GrayImage::from_raw(s, s, mask)
            .expect("mask buffer matches dimensions")
            .save(&mask_path)
            .map_err(|e| Error::Image { path: mask_path.clone(), reason: e.to_string() })?;
        manifest.push_str(&format!("images/{id}.png\tmasks/{id}.png\t{id}\n"));
    }
    let manifest_path = dir.join("manifest.tsv");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_bytes_and_targets_round_trip() {
        for label in LABELS {
            assert_eq!(Label::from_mask_byte(label.mask_byte()), Some(label));
            assert_eq!(LABELS[label.index()], label);
        }
        assert_eq!(Label::Sky.target_value(), 0.0);
        assert_eq!(Label::Thin.target_value(), 0.5);
        assert_eq!(Label::Thick.target_value(), 1.0);
        for byte in [1u8, 64, 127, 129, 200, 254] {
            assert_eq!(Label::from_mask_byte(byte), None);
        }
    }

    #[test]
    fn to_working_resizes_only_when_needed() {
        let image = SkyImage::new(9, 6, vec![0.5; 3 * 9 * 6]).unwrap();
        let mask = LabelMask::new(9, 6, vec![Label::Thin; 9 * 6]).unwrap();
        let small = Sample { id: "s".into(), image, mask };
        let working = small.to_working();
        assert_eq!(working.image.width(), WORKING_SIZE);
        assert_eq!(working.mask.height(), WORKING_SIZE);
        assert_eq!(working.to_working().image.planes(), working.image.planes());
    }

    #[test]
    fn bilinear_resample_to_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let planes: Vec<f32> = (0..3 * 7 * 5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = SkyImage::new(7, 5, planes.clone()).unwrap();
        assert_eq!(img.resized(7, 5).planes(), &planes[..]);
    }

    #[test]
    fn bilinear_downsample_averages_pixel_centers() {
        // 2x1 -> 1x1 lands exactly between the two pixels.
        let img = SkyImage::new(2, 1, vec![0.25, 0.75, 0.25, 0.75, 0.25, 0.75]).unwrap();
        let out = img.resized(1, 1);
        assert_eq!(out.planes(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn nearest_resample_preserves_label_set_and_blocks() {
        let mask = LabelMask::new(2, 2, vec![Label::Sky, Label::Thin, Label::Thick, Label::Sky]).unwrap();
        let up = mask.resized(4, 4);
        // Each source pixel becomes a 2x2 block under center alignment.
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(up.get(x, y), mask.get(x / 2, y / 2), "({x},{y})");
            }
        }
        assert_eq!(mask.resized(2, 2), mask);
    }

    #[test]
    fn split_is_seeded_disjoint_and_sized() {
        let (train, test) = random_split(32, 0.8, 77).unwrap();
        assert_eq!(train.len(), 26);
        assert_eq!(test.len(), 6);
        let again = random_split(32, 0.8, 77).unwrap();
        assert_eq!((train.clone(), test.clone()), again);
        let other = random_split(32, 0.8, 78).unwrap();
        assert_ne!((train.clone(), test.clone()), other);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
        assert!(random_split(1, 0.8, 0).is_err());
        assert!(random_split(10, 1.0, 0).is_err());
        // Tiny sets still get a nonempty test side.
        let (tr, te) = random_split(2, 0.8, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
    }

    #[test]
    fn synthetic_scenes_are_deterministic_with_full_label_coverage() {
        let a = synthetic_samples(3, 9);
        let b = synthetic_samples(3, 9);
        assert_eq!(a.len(), 3);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.id, sb.id);
            assert_eq!(sa.image, sb.image);
            assert_eq!(sa.mask, sb.mask);
            let counts = sa.mask.counts();
            let floor = WORKING_SIZE * WORKING_SIZE / 25;
            assert!(counts.iter().all(|&c| c >= floor), "label counts {counts:?}");
        }
        assert_ne!(a[0].image, a[1].image);
        assert_ne!(synthetic_samples(1, 9)[0].image, synthetic_samples(1, 10)[0].image);
    }

    #[test]
    fn synthetic_dataset_round_trips_through_png_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 2, 5).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        let direct = synthetic_samples(2, 5);
        assert_eq!(loaded.len(), 2);
        for (l, d) in loaded.iter().zip(&direct) {
            assert_eq!(l.id, d.id);
            assert_eq!(l.image, d.image);
            assert_eq!(l.mask, d.mask);
        }
    }

    #[test]
    fn manifest_skips_comments_and_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 2, 1).unwrap();
        let manifest = dir.path().join("custom.tsv");
        fs::write(
            &manifest,
            "# synthetic fixtures\n\nimages/synth-000.png\tmasks/synth-000.png\tfirst\nimages/synth-001.png\tmasks/synth-001.png\n",
        )
        .unwrap();
        let samples = load_manifest(&manifest).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].id, "first");
        assert_eq!(samples[1].id, "synth-001");

        fs::write(&manifest, "images/synth-000.png\tmasks/synth-000.png\tdup\nimages/synth-001.png\tmasks/synth-001.png\tdup\n").unwrap();
        let err = load_manifest(&manifest).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");

        fs::write(&manifest, "only_one_field.png\n").unwrap();
        assert!(matches!(load_manifest(&manifest).unwrap_err(), Error::Manifest { line: 1, .. }));
    }

    #[test]
    fn mask_loader_rejects_bytes_outside_the_label_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let mut bytes = vec![0u8; 16];
        bytes[6] = 7;
        image::GrayImage::from_raw(4, 4, bytes).unwrap().save(&path).unwrap();
        match load_mask(&path).unwrap_err() {
            Error::MaskValue { x, y, value, .. } => {
                assert_eq!((x, y, value), (2, 1, 7));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn batch_stacks_planes_and_targets_in_index_order() {
        let samples = synthetic_samples(3, 4);
        let (input, target) = batch(&samples, &[2, 0]);
        assert_eq!(input.shape(), Shape::new(2, 3, WORKING_SIZE, WORKING_SIZE));
        assert_eq!(target.shape(), Shape::new(2, 1, WORKING_SIZE, WORKING_SIZE));
        let npix = WORKING_SIZE * WORKING_SIZE;
        assert_eq!(&input.data()[..3 * npix], samples[2].image.planes());
        assert_eq!(&input.data()[3 * npix..], samples[0].image.planes());
        for (t, l) in target.data()[npix..].iter().zip(samples[0].mask.labels()) {
            assert_eq!(*t, l.target_value());
        }
    }
}
