//! Morphological false-positive reduction: open-then-close the binarized
//! composite masks with a disc of growing diameter and re-rate each time,
//! tracing a sensitivity / false-positives-per-image curve.

mod morph;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use morph::{close, dilate, erode, morph_open_close, open, structuring_element};

use crate::dataio::{Image, Mask, NoduleAnnotation};
use crate::parallel::par_map;
use crate::provenance::write_atomic;
use crate::rater::{aggregate, rate_image, RaterConfig, RatingResult};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelShape {
    #[default]
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub kernel_min: usize,
    pub kernel_max: usize,
    pub kernel_step: usize,
    pub kernel_shape: KernelShape,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kernel_min: 3,
            kernel_max: 90,
            kernel_step: 3,
            kernel_shape: KernelShape::Ellipse,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_min < 1 || self.kernel_step < 1 || self.kernel_min > self.kernel_max {
            return Err(Error::Config(format!(
                "sweep: need 1 ≤ kernel_min ≤ kernel_max and kernel_step ≥ 1, got {}..{} step {}",
                self.kernel_min, self.kernel_max, self.kernel_step
            )));
        }
        Ok(())
    }

    pub fn kernels(&self) -> Vec<usize> {
        (self.kernel_min..=self.kernel_max).step_by(self.kernel_step.max(1)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub kernel_size: usize,
    pub sensitivity: f64,
    pub fp_per_image: f64,
}

/// A composite mask with its ground truth in the mask's pixel frame.
#[derive(Debug, Clone)]
pub struct SweepItem {
    pub image_id: String,
    pub composite: Image,
    pub gt: Option<NoduleAnnotation>,
}

pub fn binarize(mask: &Image, threshold: f64) -> Mask {
    let t = threshold as f32;
    mask.mapv(|v| v >= t)
}

/// Rates every item after opening-closing its binarized composite with a
/// disc of diameter `k`. The ROI-intensity test then sees values in {0, 1}.
pub fn rate_with_kernel(items: &[SweepItem], k: usize, rater: &RaterConfig) -> Vec<RatingResult> {
    par_map(items, |it| {
        let morphed = morph_open_close(&binarize(&it.composite, rater.binarize_threshold), k);
        let img = morphed.mapv(|b| if b { 1.0f32 } else { 0.0 });
        rate_image(&it.image_id, &img, it.gt.as_ref(), rater)
    })
}

/// One point per kernel size, in increasing kernel order.
pub fn sweep(items: &[SweepItem], cfg: &SweepConfig, rater: &RaterConfig) -> Result<Vec<RocPoint>> {
    cfg.validate()?;
    rater.validate()?;
    if items.is_empty() {
        return Err(Error::EmptySet);
    }
    cfg.kernels()
        .into_iter()
        .map(|k| {
            let results = rate_with_kernel(items, k, rater);
            let a = aggregate(&results)?;
            log::info!("kernel {k}: {:.1}% at {:.2} FP/image", a.sensitivity, a.fp_per_image);
            Ok(RocPoint {
                kernel_size: k,
                sensitivity: a.sensitivity,
                fp_per_image: a.fp_per_image,
            })
        })
        .collect()
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["kernel_size", "sensitivity", "fp_per_image"])?;
    for p in points {
        w.write_record([
            p.kernel_size.to_string(),
            format!("{:.6}", p.sensitivity),
            format!("{:.6}", p.fp_per_image),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn default_grid_has_thirty_points() {
        let k = SweepConfig::default().kernels();
        assert_eq!(k.len(), 30);
        assert_eq!((k[0], k[29]), (3, 90));
    }

    #[test]
    fn disk_survives_and_speck_vanishes() {
        let disk = Array2::from_shape_fn((80, 80), |(y, x)| (x as f64 - 40.0).hypot(y as f64 - 40.0) <= 20.0);
        let out = morph_open_close(&disk, 6);
        let a = disk.iter().filter(|&&v| v).count() as f64;
        let b = out.iter().filter(|&&v| v).count() as f64;
        assert!((a - b).abs() / a < 0.02);
        let mut speck = Array2::from_elem((20, 20), false);
        speck.slice_mut(ndarray::s![5..7, 5..7]).fill(true);
        assert!(!morph_open_close(&speck, 6).iter().any(|&v| v));
    }

    #[test]
    fn huge_kernel_kills_everything() {
        let mut m = Array2::<f32>::zeros((64, 64));
        m.slice_mut(ndarray::s![20..30, 20..30]).fill(1.0);
        let items = vec![SweepItem {
            image_id: "a".into(),
            composite: m,
            gt: Some(NoduleAnnotation::new("a", 25.0, 25.0, 10.0)),
        }];
        let cfg = SweepConfig {
            kernel_min: 40,
            kernel_max: 40,
            kernel_step: 1,
            ..Default::default()
        };
        let pts = sweep(&items, &cfg, &RaterConfig::default()).unwrap();
        assert_eq!(pts, vec![RocPoint { kernel_size: 40, sensitivity: 0.0, fp_per_image: 0.0 }]);
    }
}
