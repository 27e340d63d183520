//! Synthetic radiograph-like fixtures: Gaussian-noise background with one
//! bright soft-edged disc per image and a two-lobe lung mask around it.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    write_png16, write_png_mask, ByteOrder, Container, DatasetSpec, ImageRecord, Lobe, Malignancy, Mask,
    NoduleAnnotation, RawFormat, Sex, Side, SizeUnits, Subtlety,
};
use crate::provenance::{mix_seed, write_atomic};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub dim: usize,
    pub seed: u64,
    pub background: f64,
    pub noise_sd: f64,
    /// Peak brightness added at the disc centre.
    pub contrast: f64,
    /// Disc radius range as fractions of `dim`.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Width of the logistic edge in pixels.
    pub edge: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 200,
            dim: 256,
            seed: 0,
            background: 0.35,
            noise_sd: 0.08,
            contrast: 0.45,
            radius_min: 0.04,
            radius_max: 0.08,
            edge: 1.0,
        }
    }
}

/// Two vertical ellipses standing in for the lung fields.
pub fn lung_fields(dim: usize) -> Mask {
    let d = dim as f64;
    Array2::from_shape_fn((dim, dim), |(y, x)| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        [0.3, 0.7].iter().any(|&cx| {
            let u = (px - cx * d) / (0.17 * d);
            let v = (py - 0.5 * d) / (0.36 * d);
            u * u + v * v <= 1.0
        })
    })
}

/// Image `i` of the fixture set. The same `(cfg.seed, i)` always yields the
/// same record.
pub fn synth_record(cfg: &SynthConfig, i: usize) -> ImageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, i as u64));
    let d = cfg.dim as f64;
    let lungs = lung_fields(cfg.dim);
    let r = rng.random_range(cfg.radius_min..=cfg.radius_max) * d;
    // Keep the whole disc inside one lung field.
    let (cx, cy) = loop {
        let cx = rng.random_range(0.0..d);
        let cy = rng.random_range(0.0..d);
        let inside = (0..16).all(|k| {
            let t = k as f64 / 16.0 * std::f64::consts::TAU;
            let (x, y) = (cx + r * t.cos(), cy + r * t.sin());
            x >= 0.0 && y >= 0.0 && x < d && y < d && lungs[[y as usize, x as usize]]
        });
        if inside {
            break (cx, cy);
        }
    };
    let noise = Normal::new(0.0, cfg.noise_sd).expect("finite sd");
    let pixels = Array2::from_shape_fn((cfg.dim, cfg.dim), |(y, x)| {
        let dist = (x as f64 - cx).hypot(y as f64 - cy);
        let disc = cfg.contrast / (1.0 + ((dist - r) / cfg.edge).exp());
        (cfg.background + disc + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
    });
    let id = format!("SYN{i:04}");
    let mut ann = NoduleAnnotation::new(&id, cx, cy, 2.0 * r);
    ann.subtlety = Some(Subtlety::ALL[i % 5]);
    ann.malignancy = if i % 3 == 0 { Malignancy::Benign } else { Malignancy::Malignant };
    ann.side = if cx < d / 2.0 { Side::Right } else { Side::Left };
    ann.lobe = match (cy / d * 3.0) as usize {
        0 => Lobe::Upper,
        1 => Lobe::Middle,
        _ => Lobe::Lower,
    };
    ann.sex = if i % 2 == 0 { Sex::Female } else { Sex::Male };
    ann.diagnosis = ["adenocarcinoma", "Granuloma", "metastasis", "granuloma"][i % 4].into();
    ann.age = Some(40 + (i % 40) as u32);
    ImageRecord::new(id, pixels).with_annotation(ann).with_lung_mask(lungs)
}

pub fn synth_dataset(cfg: &SynthConfig) -> Vec<ImageRecord> {
    (0..cfg.count).map(|i| synth_record(cfg, i)).collect()
}

/// Writes the fixture set in the on-disk layout of a real corpus:
/// `images/{id}.png` (16-bit), `lungs/{id}.png` and a `nodules.csv` with
/// pixel sizes. Returns the matching dataset description.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<DatasetSpec> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["image_id", "x", "y", "size", "subtlety", "malignancy", "side", "lobe", "diagnosis", "sex", "age"])?;
    for i in 0..cfg.count {
        let r = synth_record(cfg, i);
        let a = r.annotation.as_ref().expect("synthetic records are annotated");
        write_png16(dir.join(format!("images/{}.png", r.image_id)), &r.pixels)?;
        write_png_mask(dir.join(format!("lungs/{}.png", r.image_id)), r.lung_mask.as_ref().expect("has lungs"))?;
        let grade = a.subtlety.map_or(0, |s| 5 - Subtlety::ALL.iter().position(|&t| t == s).expect("listed"));
        w.write_record([
            a.image_id.clone(),
            format!("{:.3}", a.center_x),
            format!("{:.3}", a.center_y),
            format!("{:.3}", a.diameter_px),
            grade.to_string(),
            format!("{:?}", a.malignancy).to_lowercase(),
            format!("{:?}", a.side).to_lowercase(),
            format!("{:?}", a.lobe).to_lowercase(),
            a.diagnosis.clone(),
            format!("{:?}", a.sex).to_lowercase(),
            a.age.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {}", e.error())))?;
    write_atomic(&dir.join("nodules.csv"), &bytes)?;
    Ok(DatasetSpec {
        name: "synthetic".into(),
        pixel_spacing_mm: 1.0,
        native_dim: cfg.dim,
        raw_format: RawFormat {
            container: Container::Png,
            bit_depth: 16,
            byte_order: ByteOrder::Big,
            intensity_inverted: false,
        },
        size_units: SizeUnits::Px,
    })
}
