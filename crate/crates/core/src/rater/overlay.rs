use std::path::Path;

use image::{Rgb, RgbImage};

use super::{RatingResult, Status};
use crate::dataio::{Image, NoduleAnnotation};
use crate::{Error, Result};

fn plot(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_ellipse(img: &mut RgbImage, cx: f64, cy: f64, a: f64, b: f64, angle: f64, color: Rgb<u8>) {
    let steps = ((a + b) * 4.0).ceil().max(16.0) as usize;
    let (s, c) = angle.sin_cos();
    for i in 0..steps {
        let t = i as f64 / steps as f64 * std::f64::consts::TAU;
        let (x, y) = (a * t.cos(), b * t.sin());
        plot(img, cx + x * c - y * s, cy + x * s + y * c, color);
    }
}

/// Grey mask with fitted ellipses (green true positive, red false positive,
/// amber filtered) and the ground-truth circle in blue.
pub fn write_overlay(path: &Path, mask: &Image, result: &RatingResult, gt: Option<&NoduleAnnotation>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (mask[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    for d in &result.detections {
        let color = match d.status {
            Status::TruePositive => Rgb([0, 200, 0]),
            Status::FalsePositive => Rgb([220, 0, 0]),
            Status::FilteredNoise | Status::Candidate => Rgb([200, 150, 0]),
        };
        draw_ellipse(&mut img, d.center_x, d.center_y, d.major_axis / 2.0, d.minor_axis / 2.0, d.angle, color);
    }
    if let Some(g) = gt {
        let r = g.diameter_px / 2.0;
        draw_ellipse(&mut img, g.center_x, g.center_y, r, r, 0.0, Rgb([40, 90, 255]));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
