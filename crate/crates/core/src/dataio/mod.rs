//! Dataset ingestion: image loading, annotation parsing, nodule-mask
//! synthesis, the in-lung subset filter, subtlety categories and fold plans.
//!
//! Coordinates follow image conventions throughout: `x` is the column, `y`
//! the row, and arrays are indexed `[y, x]`.

mod annotations;
mod categories;
mod folds;
mod images;
mod masks;
mod nih;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use annotations::{parse_annotations, parse_annotations_str, AnnotationOptions};
pub use categories::{filter_by_category, SubtletyCategory};
pub use folds::{make_folds, FoldPlan};
pub use images::{
    load_image, load_lung_mask, read_png16, read_png_gray, write_png16, write_png_mask,
    write_raw16,
};
pub use masks::{
    jsrt_a_exclusions, make_jsrt_a, nodule_in_lung, rescale_annotation, synthesize_nodule_mask, NoduleMask,
};
pub use nih::{
    bbox_to_annotation, make_nih_annotations, make_nih_masks, parse_bbox_file, parse_bbox_str,
    BboxRow, CurationList,
};

/// Grayscale image with intensities in `[0, 1]`, indexed `[y, x]`.
pub type Image = Array2<f32>;
/// Binary mask indexed `[y, x]`.
pub type Mask = Array2<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Container {
    /// Headerless, row-major, square 16-bit words.
    Raw16,
    /// 8- or 16-bit grayscale PNG.
    Png,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ByteOrder {
    Big,
    Little,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFormat {
    pub container: Container,
    pub bit_depth: u8,
    pub byte_order: ByteOrder,
    pub intensity_inverted: bool,
}

impl Default for RawFormat {
    /// JSRT-style container. These defaults are not published alongside the
    /// corpus; check them against your own copy.
    fn default() -> Self {
        RawFormat {
            container: Container::Raw16,
            bit_depth: 12,
            byte_order: ByteOrder::Big,
            intensity_inverted: true,
        }
    }
}

/// How the `size` column of an annotation file is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeUnits {
    #[default]
    Mm,
    Px,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub pixel_spacing_mm: f64,
    pub native_dim: usize,
    #[serde(default)]
    pub raw_format: RawFormat,
    #[serde(default)]
    pub size_units: SizeUnits,
}

impl DatasetSpec {
    pub const JSRT_PIXEL_SPACING_MM: f64 = 0.175;

    pub fn jsrt() -> Self {
        DatasetSpec {
            name: "jsrt".into(),
            pixel_spacing_mm: Self::JSRT_PIXEL_SPACING_MM,
            native_dim: 2048,
            raw_format: RawFormat::default(),
            size_units: SizeUnits::Mm,
        }
    }

    /// ChestX-ray14 style: 1024² 8-bit PNGs with bounding boxes in pixels.
    pub fn nih() -> Self {
        DatasetSpec {
            name: "nih".into(),
            pixel_spacing_mm: 0.143,
            native_dim: 1024,
            raw_format: RawFormat {
                container: Container::Png,
                bit_depth: 8,
                byte_order: ByteOrder::Big,
                intensity_inverted: false,
            },
            size_units: SizeUnits::Px,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.pixel_spacing_mm > 0.0) {
            return Err(crate::Error::Config(format!(
                "dataset {}: pixel_spacing_mm must be positive",
                self.name
            )));
        }
        if ![512, 1024, 2048].contains(&self.native_dim) {
            return Err(crate::Error::Config(format!(
                "dataset {}: native_dim {} not in {{512, 1024, 2048}}",
                self.name, self.native_dim
            )));
        }
        if !(8..=16).contains(&self.raw_format.bit_depth) {
            return Err(crate::Error::Config(format!(
                "dataset {}: bit_depth {} not in [8, 16]",
                self.name, self.raw_format.bit_depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subtlety {
    Obvious,
    RelativelyObvious,
    Subtle,
    VerySubtle,
    ExtremelySubtle,
}

impl Subtlety {
    pub const ALL: [Subtlety; 5] = [
        Subtlety::Obvious,
        Subtlety::RelativelyObvious,
        Subtlety::Subtle,
        Subtlety::VerySubtle,
        Subtlety::ExtremelySubtle,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Subtlety::Obvious => "Obvious",
            Subtlety::RelativelyObvious => "Relatively Obvious",
            Subtlety::Subtle => "Subtle",
            Subtlety::VerySubtle => "Very subtle",
            Subtlety::ExtremelySubtle => "Extremely subtle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Malignancy {
    Malignant,
    Benign,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Lobe {
    Upper,
    Middle,
    Lower,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
    #[default]
    Unknown,
}

/// Ground truth for one solitary nodule. Coordinates are pixels in the frame
/// of the image the annotation currently belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub image_id: String,
    pub center_x: f64,
    pub center_y: f64,
    pub diameter_px: f64,
    pub subtlety: Option<Subtlety>,
    #[serde(default)]
    pub malignancy: Malignancy,
    #[serde(default)]
    pub side: Side,
    #[serde(default)]
    pub lobe: Lobe,
    #[serde(default)]
    pub diagnosis: String,
    #[serde(default)]
    pub sex: Sex,
    #[serde(default)]
    pub age: Option<u32>,
}

impl NoduleAnnotation {
    pub fn new(image_id: impl Into<String>, center_x: f64, center_y: f64, diameter_px: f64) -> Self {
        NoduleAnnotation {
            image_id: image_id.into(),
            center_x,
            center_y,
            diameter_px,
            subtlety: None,
            malignancy: Malignancy::Unknown,
            side: Side::Unknown,
            lobe: Lobe::Unknown,
            diagnosis: String::new(),
            sex: Sex::Unknown,
            age: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub pixels: Image,
    pub dim: usize,
    pub annotation: Option<NoduleAnnotation>,
    pub lung_mask: Option<Mask>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, pixels: Image) -> Self {
        let dim = pixels.nrows();
        ImageRecord {
            image_id: image_id.into(),
            pixels,
            dim,
            annotation: None,
            lung_mask: None,
        }
    }

    pub fn with_annotation(mut self, ann: NoduleAnnotation) -> Self {
        self.annotation = Some(ann);
        self
    }

    pub fn with_lung_mask(mut self, mask: Mask) -> Self {
        self.lung_mask = Some(mask);
        self
    }

    /// Checks the record invariants: square pixels in `[0, 1]` and a lung
    /// mask of matching shape.
    pub fn check(&self) -> crate::Result<()> {
        let (h, w) = self.pixels.dim();
        if h != w || h != self.dim {
            return Err(crate::Error::ShapeMismatch(format!(
                "{}: pixels are {h}x{w}, dim is {}",
                self.image_id, self.dim
            )));
        }
        if self.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(crate::Error::ShapeMismatch(format!(
                "{}: pixel values outside [0, 1]",
                self.image_id
            )));
        }
        if let Some(mask) = &self.lung_mask {
            if mask.dim() != (h, w) {
                return Err(crate::Error::ShapeMismatch(format!(
                    "{}: lung mask {:?} vs pixels {:?}",
                    self.image_id,
                    mask.dim(),
                    (h, w)
                )));
            }
        }
        Ok(())
    }
}
