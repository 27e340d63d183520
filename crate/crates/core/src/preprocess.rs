//! The four preprocessing variants (raw, histogram equalization, lung-field
//! segmentation, both) and resolution resampling.
//!
//! [`run_pipeline`] always applies equalization to the whole radiograph
//! first, then zeroes pixels outside the lung field, then resamples.
//! Masking first would let the zeroed background dominate the histogram.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{rescale_annotation, Image, ImageRecord, Mask};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleFilter {
    Bilinear,
    Area,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub equalize: bool,
    pub segment_lung: bool,
    pub target_dim: usize,
    pub equalize_bins: usize,
    /// `None` picks area averaging when shrinking and bilinear when growing.
    pub resample_filter: Option<ResampleFilter>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            equalize: false,
            segment_lung: false,
            target_dim: 2048,
            equalize_bins: 256,
            resample_filter: None,
        }
    }
}

impl PreprocessConfig {
    pub fn new(variant: Variant, target_dim: usize) -> Self {
        PreprocessConfig {
            equalize: variant.equalize(),
            segment_lung: variant.segment_lung(),
            target_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![512, 1024, 2048].contains(&self.target_dim) && !self.target_dim.is_power_of_two() {
            return Err(Error::Config(format!(
                "target_dim {} must be a power of two",
                self.target_dim
            )));
        }
        if self.equalize_bins < 2 {
            return Err(Error::Config("equalize_bins must be at least 2".into()));
        }
        Ok(())
    }
}

/// One column of the experiment grid's preprocessing axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Raw,
    He,
    Seg,
    HeSeg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Raw, Variant::He, Variant::Seg, Variant::HeSeg];

    pub fn equalize(self) -> bool {
        matches!(self, Variant::He | Variant::HeSeg)
    }

    pub fn segment_lung(self) -> bool {
        matches!(self, Variant::Seg | Variant::HeSeg)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Raw => "raw",
            Variant::He => "he",
            Variant::Seg => "seg",
            Variant::HeSeg => "he-seg",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preprocessing variant {s:?}")))
    }
}

/// Global histogram equalization: quantize into `bins`, then map every pixel
/// to the empirical CDF of its bin. A constant image maps to 1.0.
pub fn equalize_histogram(img: &Image, bins: usize) -> Image {
    assert!(bins >= 2, "equalization needs at least two bins");
    let quantize = |v: f32| ((v.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
    let mut hist = vec![0u64; bins];
    for &v in img.iter() {
        hist[quantize(v)] += 1;
    }
    let total = img.len() as f64;
    let mut cdf = vec![0f32; bins];
    let mut running = 0u64;
    for (c, h) in cdf.iter_mut().zip(&hist) {
        running += h;
        *c = (running as f64 / total) as f32;
    }
    img.mapv(|v| cdf[quantize(v)])
}

/// Zeroes every pixel outside the lung field.
pub fn apply_lung_mask(img: &Image, lung_mask: &Mask) -> Result<Image> {
    if img.dim() != lung_mask.dim() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs lung mask {:?}",
            img.dim(),
            lung_mask.dim()
        )));
    }
    let mut out = img.clone();
    ndarray::Zip::from(&mut out)
        .and(lung_mask)
        .for_each(|v, &m| {
            if !m {
                *v = 0.0
            }
        });
    Ok(out)
}

/// Per-output-index source taps and weights for a 1-D resize.
fn taps(src: usize, dst: usize, filter: ResampleFilter) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| match filter {
            ResampleFilter::Nearest => {
                let i = (((o as f64 + 0.5) * scale) as usize).min(src - 1);
                vec![(i, 1.0)]
            }
            ResampleFilter::Bilinear => {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                let t = (pos - i0 as f64) as f32;
                if i0 == i1 || t == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - t), (i1, t)]
                }
            }
            ResampleFilter::Area => {
                let (lo, hi) = (o as f64 * scale, (o as f64 + 1.0) * scale);
                let mut v = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < src {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) as f32;
                    if overlap > 0.0 {
                        v.push((i, overlap));
                    }
                    i += 1;
                }
                let total: f32 = v.iter().map(|t| t.1).sum();
                v.iter_mut().for_each(|t| t.1 /= total);
                v
            }
        })
        .collect()
}

/// Resizes a square image to `target_dim`. `filter = None` uses area
/// averaging for shrinking and bilinear interpolation for growing.
pub fn resample(img: &Image, target_dim: usize, filter: Option<ResampleFilter>) -> Image {
    let (h, w) = img.dim();
    if h == target_dim && w == target_dim {
        return img.clone();
    }
    let filter = filter.unwrap_or(if target_dim < h {
        ResampleFilter::Area
    } else {
        ResampleFilter::Bilinear
    });
    let tx = taps(w, target_dim, filter);
    let ty = taps(h, target_dim, filter);
    let mut rows = Array2::<f32>::zeros((h, target_dim));
    for y in 0..h {
        let src = img.row(y);
        for (x, t) in tx.iter().enumerate() {
            rows[[y, x]] = t.iter().map(|&(i, wgt)| src[i] * wgt).sum();
        }
    }
    let mut out = Array2::<f32>::zeros((target_dim, target_dim));
    for (y, t) in ty.iter().enumerate() {
        let mut dst = out.row_mut(y);
        for &(i, wgt) in t {
            dst.scaled_add(wgt, &rows.row(i));
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Nearest-neighbour resize of a binary mask.
pub fn resample_mask(mask: &Mask, target_dim: usize) -> Mask {
    let (h, w) = mask.dim();
    if h == target_dim && w == target_dim {
        return mask.clone();
    }
    let tx = taps(w, target_dim, ResampleFilter::Nearest);
    let ty = taps(h, target_dim, ResampleFilter::Nearest);
    Array2::from_shape_fn((target_dim, target_dim), |(y, x)| mask[[ty[y][0].0, tx[x][0].0]])
}

/// Equalize → mask → resample, carrying the annotation and lung mask along
/// to the target resolution.
pub fn run_pipeline(record: &ImageRecord, cfg: &PreprocessConfig) -> Result<ImageRecord> {
    if cfg.segment_lung && record.lung_mask.is_none() {
        return Err(Error::MissingMask(record.image_id.clone()));
    }
    let mut pixels = if cfg.equalize {
        equalize_histogram(&record.pixels, cfg.equalize_bins)
    } else {
        record.pixels.clone()
    };
    if cfg.segment_lung {
        pixels = apply_lung_mask(&pixels, record.lung_mask.as_ref().expect("checked above"))?;
    }
    let dim = cfg.target_dim;
    let pixels = resample(&pixels, dim, cfg.resample_filter);
    Ok(ImageRecord {
        image_id: record.image_id.clone(),
        pixels,
        dim,
        annotation: record
            .annotation
            .as_ref()
            .map(|a| rescale_annotation(a, record.dim, dim)),
        lung_mask: record.lung_mask.as_ref().map(|m| resample_mask(m, dim)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::NoduleAnnotation;
    use proptest::prelude::*;

    #[test]
    fn constant_image_equalizes_to_one() {
        let img = Array2::from_elem((8, 8), 0.3f32);
        assert!(equalize_histogram(&img, 256).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_mass_image_equalizes_to_half_and_one() {
        let img = Array2::from_shape_fn((4, 4), |(y, _)| if y < 2 { 0.0 } else { 1.0 });
        let eq = equalize_histogram(&img, 256);
        for ((y, _), &v) in eq.indexed_iter() {
            assert_eq!(v, if y < 2 { 0.5 } else { 1.0 });
        }
    }

    #[test]
    fn mask_identity_zero_and_checkerboard() {
        let img = Array2::from_elem((6, 6), 0.8f32);
        let ones = Array2::from_elem((6, 6), true);
        assert_eq!(apply_lung_mask(&img, &ones).unwrap(), img);
        let zeros = Array2::from_elem((6, 6), false);
        assert!(apply_lung_mask(&img, &zeros).unwrap().iter().all(|&v| v == 0.0));
        let checker = Array2::from_shape_fn((6, 6), |(y, x)| (x + y) % 2 == 0);
        let kept: f32 = apply_lung_mask(&img, &checker).unwrap().sum();
        assert!((kept - img.sum() / 2.0).abs() < 1e-4);
        let wrong = Array2::from_elem((5, 6), true);
        assert!(matches!(apply_lung_mask(&img, &wrong), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn same_size_resample_is_bit_identical() {
        let img = Array2::from_shape_fn((16, 16), |(y, x)| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        for f in [None, Some(ResampleFilter::Bilinear), Some(ResampleFilter::Nearest)] {
            assert_eq!(resample(&img, 16, f), img);
        }
    }

    #[test]
    fn constant_image_survives_any_resize() {
        let img = Array2::from_elem((64, 64), 0.37f32);
        for dim in [16, 32, 128] {
            for f in [ResampleFilter::Area, ResampleFilter::Bilinear, ResampleFilter::Nearest] {
                let out = resample(&img, dim, Some(f));
                assert!(out.iter().all(|&v| (v - 0.37).abs() <= 2.0 * f32::EPSILON), "{f:?} {dim}");
            }
        }
    }

    #[test]
    fn downsampled_disk_keeps_its_radius() {
        let disk = Array2::from_shape_fn((2048, 2048), |(y, x)| {
            let (dx, dy) = (x as f64 - 1024.0, y as f64 - 1024.0);
            if dx * dx + dy * dy <= 512.0 * 512.0 { 1.0f32 } else { 0.0 }
        });
        let small = resample(&disk, 512, None);
        let area = small.iter().filter(|&&v| v >= 0.5).count() as f64;
        let r = (area / std::f64::consts::PI).sqrt();
        assert!((r - 128.0).abs() <= 1.0, "measured radius {r}");
    }

    #[test]
    fn area_and_bilinear_preserve_mean_on_smooth_images() {
        let img = Array2::from_shape_fn((256, 256), |(y, x)| {
            0.5 + 0.3 * ((x as f32) / 40.0).sin() * ((y as f32) / 55.0).cos()
        });
        let mean = img.mean().unwrap();
        for f in [ResampleFilter::Area, ResampleFilter::Bilinear] {
            for dim in [64, 128, 512] {
                let m = resample(&img, dim, Some(f)).mean().unwrap();
                assert!((m - mean).abs() / mean < 0.01, "{f:?} {dim}: {m} vs {mean}");
            }
        }
    }

    fn asymmetric_record() -> ImageRecord {
        // Bright left half is outside the lung; the histogram differs by order.
        let pixels = Array2::from_shape_fn((8, 8), |(y, x)| {
            if x < 4 { 0.9 } else { (y as f32) / 10.0 }
        });
        let lung = Array2::from_shape_fn((8, 8), |(_, x)| x >= 4);
        ImageRecord::new("asym", pixels).with_lung_mask(lung)
    }

    #[test]
    fn pipeline_equalizes_before_masking() {
        let rec = asymmetric_record();
        let cfg = PreprocessConfig {
            equalize: true,
            segment_lung: true,
            target_dim: 8,
            ..Default::default()
        };
        let out = run_pipeline(&rec, &cfg).unwrap();
        let eq_then_mask =
            apply_lung_mask(&equalize_histogram(&rec.pixels, 256), rec.lung_mask.as_ref().unwrap())
                .unwrap();
        let mask_then_eq = equalize_histogram(
            &apply_lung_mask(&rec.pixels, rec.lung_mask.as_ref().unwrap()).unwrap(),
            256,
        );
        assert_eq!(out.pixels, eq_then_mask);
        assert_ne!(out.pixels, mask_then_eq);
    }

    #[test]
    fn identity_config_and_annotation_rescale() {
        let rec = ImageRecord::new("id", Array2::from_elem((2048, 2048), 0.25f32))
            .with_annotation(NoduleAnnotation::new("id", 1024.0, 1024.0, 40.0));
        let same = run_pipeline(&rec, &PreprocessConfig::new(Variant::Raw, 2048)).unwrap();
        assert_eq!(same.pixels, rec.pixels);
        let small = run_pipeline(&rec, &PreprocessConfig::new(Variant::Raw, 512)).unwrap();
        let a = small.annotation.unwrap();
        assert_eq!((a.center_x, a.center_y, a.diameter_px), (255.625, 255.625, 10.0));
    }

    #[test]
    fn segmentation_needs_a_mask() {
        let rec = ImageRecord::new("nomask", Array2::zeros((8, 8)));
        let err = run_pipeline(&rec, &PreprocessConfig::new(Variant::Seg, 8)).unwrap_err();
        assert!(matches!(err, Error::MissingMask(_)));
    }

    proptest! {
        #[test]
        fn equalization_is_monotone(values in proptest::collection::vec(0.0f32..=1.0, 64)) {
            let img = Array2::from_shape_vec((8, 8), values).unwrap();
            let eq = equalize_histogram(&img, 256);
            for (a, ea) in img.iter().zip(eq.iter()) {
                prop_assert!((0.0..=1.0).contains(ea));
                for (b, eb) in img.iter().zip(eq.iter()) {
                    if a <= b {
                        prop_assert!(ea <= eb);
                    }
                }
            }
        }

        #[test]
        fn equalization_is_idempotent_up_to_one_bin(values in proptest::collection::vec(0.0f32..=1.0, 256)) {
            let img = Array2::from_shape_vec((16, 16), values).unwrap();
            let once = equalize_histogram(&img, 64);
            let twice = equalize_histogram(&once, 64);
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() <= 1.0 / 64.0 + 1e-6, "{a} vs {b}");
            }
        }
    }
}
