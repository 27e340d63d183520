//! Automated localization rating: blob detection on a predicted mask,
//! ellipse fitting, geometric and ROI-intensity filters, centroid matching
//! against the ground-truth nodule and TP/FP accounting.

mod contour;
mod ellipse;
mod overlay;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use contour::{label_components, trace_outer_contour, Component};
pub use ellipse::{conic_to_ellipse, fit_ellipse, moment_ellipse, Ellipse};
pub use overlay::write_overlay;

use crate::dataio::{Image, NoduleAnnotation};
use crate::provenance::write_atomic;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiShape {
    /// Axis-aligned square of side `minor_axis`.
    #[default]
    Square,
    /// Disc of diameter `minor_axis`.
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaterConfig {
    pub eccentricity_max: f64,
    pub area_divisor: usize,
    pub roi_intensity_min: f64,
    pub centroid_tol_divisor: usize,
    pub binarize_threshold: f64,
    pub roi_shape: RoiShape,
}

impl Default for RaterConfig {
    fn default() -> Self {
        RaterConfig {
            eccentricity_max: 0.95,
            area_divisor: 128,
            roi_intensity_min: 0.5,
            centroid_tol_divisor: 16,
            binarize_threshold: 0.5,
            roi_shape: RoiShape::Square,
        }
    }
}

impl RaterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("rater: {m}")));
        if !(self.eccentricity_max > 0.0 && self.eccentricity_max < 1.0) {
            return bad("eccentricity_max must lie in (0, 1)");
        }
        if self.area_divisor == 0 || self.centroid_tol_divisor == 0 {
            return bad("divisors must be at least 1");
        }
        if !(self.roi_intensity_min > 0.0 && self.roi_intensity_min < 1.0) {
            return bad("roi_intensity_min must lie in (0, 1)");
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return bad("binarize_threshold must lie in (0, 1)");
        }
        Ok(())
    }

    /// Ellipses with area at or below `(dim / area_divisor)²` are noise.
    pub fn min_area(&self, dim: usize) -> f64 {
        (dim as f64 / self.area_divisor as f64).powi(2)
    }

    /// Largest centroid distance still counted as a hit.
    pub fn tolerance(&self, dim: usize) -> f64 {
        dim as f64 / self.centroid_tol_divisor as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Candidate,
    FilteredNoise,
    TruePositive,
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center_x: f64,
    pub center_y: f64,
    pub major_axis: f64,
    pub minor_axis: f64,
    pub angle: f64,
    pub eccentricity: f64,
    pub area: f64,
    pub roi_mean: f64,
    /// Boundary points of the traced contour.
    pub contour_points: usize,
    pub status: Status,
}

impl Detection {
    fn from_ellipse(e: &Ellipse, contour_points: usize) -> Self {
        Detection {
            center_x: e.center_x,
            center_y: e.center_y,
            major_axis: e.major,
            minor_axis: e.minor,
            angle: e.angle,
            eccentricity: e.eccentricity(),
            area: e.area(),
            roi_mean: 0.0,
            contour_points,
            status: Status::Candidate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingResult {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub tp: usize,
    pub fp: usize,
}

impl RatingResult {
    pub fn filtered(&self) -> usize {
        self.detections.iter().filter(|d| d.status == Status::FilteredNoise).count()
    }
}

/// Binarizes `mask` at the configured threshold (`value ≥ threshold` is
/// foreground), labels 8-connected components and fits an ellipse to each
/// outer contour. Contours with fewer than five distinct points come back
/// as `FilteredNoise` with zero axes, centred on their pixels.
pub fn detect_blobs(mask: &Image, cfg: &RaterConfig) -> Vec<Detection> {
    let thr = cfg.binarize_threshold as f32;
    let fg = mask.mapv(|v| v >= thr);
    let (labels, comps) = label_components(&fg);
    comps
        .iter()
        .map(|c| {
            let contour = trace_outer_contour(&labels, c.label, c.start);
            let mut distinct = contour.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 5 {
                let n = c.pixels.len() as f64;
                return Detection {
                    center_x: c.pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n,
                    center_y: c.pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n,
                    major_axis: 0.0,
                    minor_axis: 0.0,
                    angle: 0.0,
                    eccentricity: 0.0,
                    area: 0.0,
                    roi_mean: 0.0,
                    contour_points: distinct.len(),
                    status: Status::FilteredNoise,
                };
            }
            let pts: Vec<(f64, f64)> = distinct.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
            let e = fit_ellipse(&pts)
                .filter(|e| e.major.is_finite() && e.minor.is_finite())
                .unwrap_or_else(|| moment_ellipse(&c.pixels));
            Detection::from_ellipse(&e, distinct.len())
        })
        .collect()
}

/// Marks a candidate as noise when it is too elongated or too small.
pub fn filter_geometry(mut det: Detection, dim: usize, cfg: &RaterConfig) -> Detection {
    if det.status == Status::Candidate
        && (det.eccentricity >= cfg.eccentricity_max || det.area <= cfg.min_area(dim))
    {
        det.status = Status::FilteredNoise;
    }
    det
}

/// Mean of `mask` over the ROI built from the detection centre and minor
/// axis, clipped to the image. Pixel centres sit at integer coordinates.
pub fn roi_mean(det: &Detection, mask: &Image, shape: RoiShape) -> f64 {
    let (h, w) = mask.dim();
    let r = det.minor_axis / 2.0;
    let x0 = (det.center_x - r).ceil().max(0.0) as usize;
    let y0 = (det.center_y - r).ceil().max(0.0) as usize;
    let x1 = (det.center_x + r).floor();
    let y1 = (det.center_y + r).floor();
    if x1 < 0.0 || y1 < 0.0 {
        return 0.0;
    }
    let x1 = (x1 as usize).min(w.saturating_sub(1));
    let y1 = (y1 as usize).min(h.saturating_sub(1));
    let (mut sum, mut count) = (0.0, 0usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if shape == RoiShape::Circle {
                let (dx, dy) = (x as f64 - det.center_x, y as f64 - det.center_y);
                if dx * dx + dy * dy > r * r {
                    continue;
                }
            }
            sum += mask[[y, x]] as f64;
            count += 1;
        }
    }
    if count == 0 || x0 > x1 || y0 > y1 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Records the ROI mean and filters detections whose mean is strictly
/// below `roi_intensity_min`.
pub fn filter_roi_intensity(mut det: Detection, mask: &Image, cfg: &RaterConfig) -> Detection {
    if det.status != Status::Candidate {
        return det;
    }
    det.roi_mean = roi_mean(&det, mask, cfg.roi_shape);
    if det.roi_mean < cfg.roi_intensity_min {
        det.status = Status::FilteredNoise;
    }
    det
}

/// Labels surviving candidates: the one nearest the ground-truth centre,
/// if within tolerance, is the single true positive; the rest are false
/// positives. `gt` is in the mask's pixel frame.
pub fn match_detections(
    image_id: &str,
    mut detections: Vec<Detection>,
    gt: Option<&NoduleAnnotation>,
    dim: usize,
    cfg: &RaterConfig,
) -> RatingResult {
    let tol = cfg.tolerance(dim);
    let mut best: Option<(f64, usize)> = None;
    if let Some(gt) = gt {
        for (i, d) in detections.iter().enumerate() {
            if d.status != Status::Candidate {
                continue;
            }
            let dist = (d.center_x - gt.center_x).hypot(d.center_y - gt.center_y);
            if dist <= tol && best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, i));
            }
        }
    }
    let (mut tp, mut fp) = (0, 0);
    for (i, d) in detections.iter_mut().enumerate() {
        if d.status != Status::Candidate {
            continue;
        }
        if best.is_some_and(|(_, b)| b == i) {
            d.status = Status::TruePositive;
            tp += 1;
        } else {
            d.status = Status::FalsePositive;
            fp += 1;
        }
    }
    RatingResult {
        image_id: image_id.to_string(),
        detections,
        tp,
        fp,
    }
}

/// The full rating pipeline for one predicted mask.
pub fn rate_image(image_id: &str, mask: &Image, gt: Option<&NoduleAnnotation>, cfg: &RaterConfig) -> RatingResult {
    let dim = mask.nrows().max(mask.ncols());
    let dets = detect_blobs(mask, cfg)
        .into_iter()
        .map(|d| filter_geometry(d, dim, cfg))
        .map(|d| filter_roi_intensity(d, mask, cfg))
        .collect();
    match_detections(image_id, dets, gt, dim, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub sensitivity: f64,
    pub fp_per_image: f64,
}

/// Sensitivity in percent and mean false positives per image.
pub fn aggregate<'a>(results: impl IntoIterator<Item = &'a RatingResult>) -> Result<Aggregate> {
    let (mut n, mut tp, mut fp) = (0usize, 0usize, 0usize);
    for r in results {
        n += 1;
        tp += r.tp;
        fp += r.fp;
    }
    if n == 0 {
        return Err(Error::EmptySet);
    }
    Ok(Aggregate {
        n,
        tp,
        fp,
        sensitivity: 100.0 * tp as f64 / n as f64,
        fp_per_image: fp as f64 / n as f64,
    })
}

/// One row per detection (or one empty row for images without any), sorted
/// by image id.
pub fn write_ratings_csv(path: &Path, results: &[RatingResult]) -> Result<()> {
    let mut sorted: Vec<&RatingResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record([
        "image_id", "tp", "fp", "detection", "status", "center_x", "center_y", "major_axis", "minor_axis",
        "eccentricity", "area", "roi_mean",
    ])?;
    for r in sorted {
        if r.detections.is_empty() {
            w.write_record([r.image_id.as_str(), &r.tp.to_string(), &r.fp.to_string(), "", "", "", "", "", "", "", "", ""])?;
        }
        for (i, d) in r.detections.iter().enumerate() {
            let status = serde_json::to_value(d.status)?;
            w.write_record([
                r.image_id.clone(),
                r.tp.to_string(),
                r.fp.to_string(),
                i.to_string(),
                status.as_str().unwrap_or_default().to_string(),
                format!("{:.4}", d.center_x),
                format!("{:.4}", d.center_y),
                format!("{:.4}", d.major_axis),
                format!("{:.4}", d.minor_axis),
                format!("{:.6}", d.eccentricity),
                format!("{:.4}", d.area),
                format!("{:.6}", d.roi_mean),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}
