use ndarray::Array2;

use super::{ImageRecord, Mask, NoduleAnnotation};
use crate::{Error, Result};

/// A circular ground-truth mask and the geometry it was drawn with.
#[derive(Debug, Clone)]
pub struct NoduleMask {
    pub mask: Mask,
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    /// True when the scaled radius fell below one pixel and was clamped.
    pub clamped: bool,
}

/// Maps a pixel coordinate between frames scaled by `s`. Pixel `i` spans
/// `[i − ½, i + ½]`, matching the image resampler, so edges map to edges.
fn scale_coord(v: f64, s: f64) -> f64 {
    (v + 0.5) * s - 0.5
}

/// Rescales an annotation from a `from_dim` frame to a `to_dim` frame.
pub fn rescale_annotation(ann: &NoduleAnnotation, from_dim: usize, to_dim: usize) -> NoduleAnnotation {
    let s = to_dim as f64 / from_dim as f64;
    NoduleAnnotation {
        center_x: scale_coord(ann.center_x, s),
        center_y: scale_coord(ann.center_y, s),
        diameter_px: ann.diameter_px * s,
        ..ann.clone()
    }
}

/// Draws the circle approximation of a nodule at resolution `dim`, from an
/// annotation expressed in a `coord_dim` frame. Pixel `(x, y)` is foreground
/// when its distance to the scaled center is at most the scaled radius.
pub fn synthesize_nodule_mask(ann: &NoduleAnnotation, coord_dim: usize, dim: usize) -> NoduleMask {
    let s = dim as f64 / coord_dim as f64;
    let (cx, cy) = (scale_coord(ann.center_x, s), scale_coord(ann.center_y, s));
    let mut radius = ann.diameter_px / 2.0 * s;
    let clamped = radius < 1.0;
    if clamped {
        log::warn!(
            "{}: nodule radius {radius:.3} px at {dim}² is below one pixel; clamping to 1",
            ann.image_id
        );
        radius = 1.0;
    }
    let r2 = radius * radius;
    let mut mask = Array2::from_shape_fn((dim, dim), |(y, x)| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        dx * dx + dy * dy <= r2
    });
    if !mask.iter().any(|&m| m) {
        // Center sits outside the image; keep the nearest pixel so the mask is never empty.
        let x = (cx.round().max(0.0) as usize).min(dim - 1);
        let y = (cy.round().max(0.0) as usize).min(dim - 1);
        mask[[y, x]] = true;
    }
    NoduleMask {
        mask,
        center_x: cx,
        center_y: cy,
        radius,
        clamped,
    }
}

fn centroid_in_lung(record: &ImageRecord) -> Result<bool> {
    let mask = record
        .lung_mask
        .as_ref()
        .ok_or_else(|| Error::MissingMask(record.image_id.clone()))?;
    Ok(record.annotation.as_ref().is_some_and(|a| nodule_in_lung(a, mask)))
}

/// True when the rounded nodule centroid lies on lung-mask foreground.
pub fn nodule_in_lung(ann: &NoduleAnnotation, lung: &Mask) -> bool {
    let (h, w) = lung.dim();
    let x = ann.center_x.round();
    let y = ann.center_y.round();
    x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h && lung[[y as usize, x as usize]]
}

/// Ids of records whose nodule centroid falls outside the lung field.
pub fn jsrt_a_exclusions(records: &[ImageRecord]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for r in records {
        if !centroid_in_lung(r)? {
            out.push(r.image_id.clone());
        }
    }
    Ok(out)
}

/// Keeps records whose annotated nodule centroid lies on lung-mask
/// foreground. Every record must carry a lung mask.
pub fn make_jsrt_a(records: Vec<ImageRecord>) -> Result<Vec<ImageRecord>> {
    if let Some(r) = records.iter().find(|r| r.lung_mask.is_none()) {
        return Err(Error::MissingMask(r.image_id.clone()));
    }
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        if centroid_in_lung(&r)? {
            kept.push(r);
        } else {
            log::info!("excluding {}: nodule centroid outside the lung field", r.image_id);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn full_resolution_circle_area() {
        let ann = NoduleAnnotation::new("a", 1024.0, 1024.0, 200.0);
        let m = synthesize_nodule_mask(&ann, 2048, 2048);
        let area = m.mask.iter().filter(|&&v| v).count() as f64;
        let expected = PI * 100.0 * 100.0;
        assert!((area - expected).abs() / expected < 0.02, "area {area}");
        assert!(!m.clamped);
    }

    #[test]
    fn half_resolution_maps_edges_to_edges() {
        let ann = NoduleAnnotation::new("a", 1024.0, 1024.0, 200.0);
        let m = synthesize_nodule_mask(&ann, 2048, 1024);
        assert_eq!((m.center_x, m.center_y, m.radius), (511.75, 511.75, 50.0));
        let corner = NoduleAnnotation::new("a", -0.5, 2047.5, 8.0);
        let r = rescale_annotation(&corner, 2048, 512);
        assert_eq!((r.center_x, r.center_y, r.diameter_px), (-0.5, 511.5, 2.0));
    }

    #[test]
    fn tiny_radius_is_clamped() {
        let ann = NoduleAnnotation::new("a", 1000.0, 1000.0, 1.0);
        let m = synthesize_nodule_mask(&ann, 2048, 512);
        assert!(m.clamped);
        assert_eq!(m.radius, 1.0);
        // centre lands at (249.625, 249.625): the 2×2 block around it
        assert_eq!(m.mask.iter().filter(|&&v| v).count(), 4);
    }

    fn lung_record(id: &str, cx: f64, cy: f64) -> ImageRecord {
        let mut lung = Array2::from_elem((32, 32), false);
        lung.slice_mut(ndarray::s![8..24, 8..24]).fill(true);
        ImageRecord::new(id, Array2::zeros((32, 32)))
            .with_annotation(NoduleAnnotation::new(id, cx, cy, 4.0))
            .with_lung_mask(lung)
    }

    #[test]
    fn jsrt_a_filter_drops_out_of_lung_centroids() {
        let records = vec![lung_record("in", 16.0, 16.0), lung_record("out", 2.0, 30.0)];
        assert_eq!(jsrt_a_exclusions(&records).unwrap(), vec!["out".to_string()]);
        let kept = make_jsrt_a(records).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].image_id, "in");
    }

    #[test]
    fn jsrt_a_requires_masks() {
        let mut r = lung_record("m", 16.0, 16.0);
        r.lung_mask = None;
        assert!(matches!(make_jsrt_a(vec![r]), Err(Error::MissingMask(_))));
    }
}
