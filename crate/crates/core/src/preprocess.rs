//! Image preprocessing pipeline: S0 (native sensor frame) -> S1 (cropped to
//! the blob bounding box and randomly padded to a power-of-two side) -> S2
//! (optionally noised, resized to 128x128).
//!
//! Labels transform alongside the image. Going S0->S1 every label is
//! unchanged (the crop offset only moves UV points such as CoB and CoF,
//! which are tracked by [`PreprocessRecord`]); going S1->S2 the spatial
//! components scale by `128/gamma` while angles stay put. The record keeps
//! everything needed to invert S2 estimates back to S0 for on-board use.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::labels::LabelSet;

/// Side of the fixed-size network input.
pub const TARGET_SIDE: usize = 128;

/// Candidate padded sizes, smallest first.
pub const GAMMA_CHOICES: [usize; 4] = [128, 256, 512, 1024];

/// Tight axis-aligned bounding box of the foreground, in UV pixels.
/// `x0, y0` is the top-left corner; `w, h` are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

/// How the center of brightness is computed from the foreground mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CentroidMode {
    /// Intensity-weighted centroid (default).
    #[default]
    BrightnessWeighted,
    /// Unweighted centroid of the binary mask.
    BinaryMask,
}

/// Output of the blob analysis on a binarized image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobResult {
    /// Center of brightness in UV pixels of the analyzed frame.
    pub cob: [f64; 2],
    pub bbox: Bbox,
    /// Intensity threshold that defined the foreground (pixels strictly above).
    pub threshold: f64,
}

/// Per-image bookkeeping needed to map labels between spaces and to invert
/// S2 estimates back to S0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRecord {
    pub blob: BlobResult,
    /// Padded side in S1, one of [`GAMMA_CHOICES`].
    pub gamma: usize,
    pub alpha_u: usize,
    pub alpha_v: usize,
    pub noise_applied: bool,
    /// Seed used for the pad draw (and noise, when applied).
    pub seed: u64,
}

impl PreprocessRecord {
    /// `128 / gamma`.
    pub fn scale(&self) -> f64 {
        TARGET_SIDE as f64 / self.gamma as f64
    }

    pub fn uv_s0_to_s1(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] - self.blob.bbox.x0 as f64 + self.alpha_u as f64,
            p[1] - self.blob.bbox.y0 as f64 + self.alpha_v as f64,
        ]
    }

    pub fn uv_s1_to_s2(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.scale();
        [p[0] * s, p[1] * s]
    }

    pub fn uv_s0_to_s2(&self, p: [f64; 2]) -> [f64; 2] {
        self.uv_s1_to_s2(self.uv_s0_to_s1(p))
    }

    /// S0 -> S2 for the CoB found by the blob analysis.
    pub fn cob_s2(&self) -> [f64; 2] {
        self.uv_s0_to_s2(self.blob.cob)
    }
}

/// One fully preprocessed sample: 128x128 image, labels in S2 units, and the
/// record that ties them back to S0.
#[derive(Debug, Clone)]
pub struct S2Sample {
    pub image: GrayImage,
    pub labels: LabelSet,
    pub record: PreprocessRecord,
}

/// Additive zero-mean Gaussian noise, clipped to [0, 1], applied before the
/// resize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { sigma: 2.0 / 255.0 }
    }
}

/// Otsu threshold over a 256-bin histogram of the 8-bit quantized image.
///
/// Returns the intensity of the selected bin; the foreground is every pixel
/// strictly above it. Ties break toward the lower bin. A constant image
/// returns its own bin, which leaves the foreground empty.
pub fn otsu_threshold(image: &GrayImage) -> f64 {
    let mut hist = [0u64; 256];
    for &p in image.pixels() {
        let bin = (p.clamp(0.0, 1.0) * 255.0).round() as usize;
        hist[bin] += 1;
    }
    let total = image.len() as f64;
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();

    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if occupied <= 1 {
        let bin = hist.iter().position(|&c| c > 0).unwrap_or(0);
        return bin as f64 / 255.0;
    }

    let mut best_t = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..255 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    best_t as f64 / 255.0
}

/// Blob analysis with the default brightness-weighted centroid.
pub fn blob_analysis(image: &GrayImage, threshold: f64) -> Result<BlobResult> {
    blob_analysis_with_mode(image, threshold, CentroidMode::BrightnessWeighted)
}

/// Computes the CoB and the tight bounding box of the pixels strictly above
/// `threshold`. Errors with an empty-blob diagnosis when nothing survives,
/// which signals an off-frame (or fully unlit) body.
pub fn blob_analysis_with_mode(
    image: &GrayImage,
    threshold: f64,
    mode: CentroidMode,
) -> Result<BlobResult> {
    let mut min_u = usize::MAX;
    let mut max_u = 0usize;
    let mut min_v = usize::MAX;
    let mut max_v = 0usize;
    let mut wsum = 0.0f64;
    let mut usum = 0.0f64;
    let mut vsum = 0.0f64;
    let t = threshold as f32;
    for (v, row) in image.rows().enumerate() {
        for (u, &p) in row.iter().enumerate() {
            if p > t {
                min_u = min_u.min(u);
                max_u = max_u.max(u);
                min_v = min_v.min(v);
                max_v = max_v.max(v);
                let w = match mode {
                    CentroidMode::BrightnessWeighted => p as f64,
                    CentroidMode::BinaryMask => 1.0,
                };
                wsum += w;
                usum += w * u as f64;
                vsum += w * v as f64;
            }
        }
    }
    if wsum == 0.0 {
        return Err(Error::EmptyBlob { threshold });
    }
    Ok(BlobResult {
        cob: [usum / wsum, vsum / wsum],
        bbox: Bbox {
            x0: min_u,
            y0: min_v,
            w: max_u - min_u + 1,
            h: max_v - min_v + 1,
        },
        threshold,
    })
}

/// Smallest member of [`GAMMA_CHOICES`] that bounds `side`.
pub fn select_gamma(side: usize) -> Result<usize> {
    GAMMA_CHOICES
        .iter()
        .copied()
        .find(|&g| g >= side)
        .ok_or(Error::BodyExceedsSensor { size: side })
}

/// S0 -> S1: crop to the bounding box and pad to `gamma x gamma` with the
/// pad offsets drawn uniformly from their admissible ranges.
///
/// Padding re-uses the original S0 pixels at the corresponding coordinates
/// and falls back to zero where those leave the sensor. Labels pass through
/// unchanged; the returned record carries the crop/pad geometry.
pub fn to_s1(
    image: &GrayImage,
    labels: &LabelSet,
    blob: &BlobResult,
    rng_seed: u64,
) -> Result<(GrayImage, LabelSet, PreprocessRecord)> {
    let bbox = blob.bbox;
    let gamma = select_gamma(bbox.w.max(bbox.h))?;
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let alpha_u = rng.random_range(0..=gamma - bbox.w);
    let alpha_v = rng.random_range(0..=gamma - bbox.h);
    let (img, labels, mut record) = to_s1_with_pad(image, labels, blob, gamma, alpha_u, alpha_v);
    record.seed = rng_seed;
    Ok((img, labels, record))
}

/// Deterministic variant of [`to_s1`] with explicit pad offsets.
pub fn to_s1_with_pad(
    image: &GrayImage,
    labels: &LabelSet,
    blob: &BlobResult,
    gamma: usize,
    alpha_u: usize,
    alpha_v: usize,
) -> (GrayImage, LabelSet, PreprocessRecord) {
    let bbox = blob.bbox;
    debug_assert!(gamma >= bbox.w.max(bbox.h));
    debug_assert!(alpha_u <= gamma - bbox.w && alpha_v <= gamma - bbox.h);
    let (w, h) = (image.width() as i64, image.height() as i64);
    let du = bbox.x0 as i64 - alpha_u as i64;
    let dv = bbox.y0 as i64 - alpha_v as i64;
    let out = GrayImage::from_fn(gamma, gamma, |x, y| {
        let u = x as i64 + du;
        let v = y as i64 + dv;
        if u >= 0 && u < w && v >= 0 && v < h {
            image.get(u as usize, v as usize)
        } else {
            0.0
        }
    });
    let record = PreprocessRecord {
        blob: blob.clone(),
        gamma,
        alpha_u,
        alpha_v,
        noise_applied: false,
        seed: 0,
    };
    (out, labels.clone(), record)
}

/// S1 -> S2: optional noise, then bilinear resize to 128x128. Spatial label
/// components scale by `128/gamma`; angles are unchanged.
pub fn to_s2(
    image_s1: &GrayImage,
    labels_s1: &LabelSet,
    record: &PreprocessRecord,
    noise: Option<NoiseSpec>,
) -> Result<S2Sample> {
    if image_s1.width() != record.gamma || image_s1.height() != record.gamma {
        return Err(Error::ShapeMismatch(format!(
            "S1 image is {}x{}, record says gamma = {}",
            image_s1.width(),
            image_s1.height(),
            record.gamma
        )));
    }
    let mut record = record.clone();
    let noised;
    let source = if let Some(spec) = noise {
        let mut rng = ChaCha12Rng::seed_from_u64(record.seed.wrapping_add(0x9e37_79b9));
        let normal = Normal::new(0.0, spec.sigma).expect("sigma must be finite and non-negative");
        let mut img = image_s1.clone();
        for p in img.pixels_mut() {
            *p = (*p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
        record.noise_applied = true;
        noised = img;
        &noised
    } else {
        image_s1
    };
    let image = resize_bilinear(source, TARGET_SIDE);
    let labels = labels_s1.scale_spatial(record.scale());
    Ok(S2Sample {
        image,
        labels,
        record,
    })
}

/// Maps S2-space label estimates back to S0 by scaling the spatial
/// components by `gamma/128`. Exact inverse of the S1->S2 transform.
pub fn invert_labels(labels_s2: &LabelSet, record: &PreprocessRecord) -> LabelSet {
    labels_s2.scale_spatial(1.0 / record.scale())
}

/// Bilinear resample onto `side x side`, sampling the source at
/// `x_src = x_dst * (src_side / side)` so that UV positions transform
/// exactly like the labels do.
pub fn resize_bilinear(src: &GrayImage, side: usize) -> GrayImage {
    if src.width() == side && src.height() == side {
        return src.clone();
    }
    let fx = src.width() as f64 / side as f64;
    let fy = src.height() as f64 / side as f64;
    GrayImage::from_fn(side, side, |x, y| {
        let sx = x as f64 * fx;
        let sy = y as f64 * fy;
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(src.width() - 1);
        let y1 = (y0 + 1).min(src.height() - 1);
        let tx = (sx - x0 as f64) as f32;
        let ty = (sy - y0 as f64) as f32;
        let top = src.get(x0, y0) * (1.0 - tx) + src.get(x1, y0) * tx;
        let bot = src.get(x0, y1) * (1.0 - tx) + src.get(x1, y1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Full per-image pipeline: Otsu, blob analysis, S1, S2.
pub fn preprocess_image(
    image: &GrayImage,
    labels: &LabelSet,
    rng_seed: u64,
    noise: Option<NoiseSpec>,
) -> Result<S2Sample> {
    let threshold = otsu_threshold(image);
    let blob = blob_analysis(image, threshold)?;
    let (s1_img, s1_labels, record) = to_s1(image, labels, &blob, rng_seed)?;
    to_s2(&s1_img, &s1_labels, &record, noise)
}
