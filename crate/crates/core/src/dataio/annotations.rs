use std::collections::HashMap;
use std::path::Path;

use super::{DatasetSpec, Lobe, Malignancy, NoduleAnnotation, Sex, Side, SizeUnits, Subtlety};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AnnotationOptions {
    pub delimiter: u8,
}

impl Default for AnnotationOptions {
    fn default() -> Self {
        AnnotationOptions { delimiter: b',' }
    }
}

/// Parses a delimited annotation file with a header row.
///
/// Mandatory columns: `image_id`, `x`, `y`, `size`. Optional columns:
/// `subtlety`, `malignancy`, `side`, `lobe`, `diagnosis`, `sex`, `age`.
/// Header matching is case-insensitive. Sizes are converted to pixels with
/// the dataset's pixel spacing unless the dataset declares pixel units.
pub fn parse_annotations(
    path: impl AsRef<Path>,
    spec: &DatasetSpec,
    opts: AnnotationOptions,
) -> Result<Vec<NoduleAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text, spec, opts)
}

pub fn parse_annotations_str(
    text: &str,
    spec: &DatasetSpec,
    opts: AnnotationOptions,
) -> Result<Vec<NoduleAnnotation>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());

    let columns: HashMap<String, usize> = reader
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_ascii_lowercase(), i))
        .collect();
    let required = |name: &str| {
        columns
            .get(name)
            .copied()
            .ok_or_else(|| Error::SchemaError(format!("missing mandatory column `{name}`")))
    };
    let id_col = required("image_id")?;
    let x_col = required("x")?;
    let y_col = required("y")?;
    let size_col = required("size")?;
    let optional = |name: &str| columns.get(name).copied();
    let subtlety_col = optional("subtlety");
    let malignancy_col = optional("malignancy");
    let side_col = optional("side");
    let lobe_col = optional("lobe");
    let diagnosis_col = optional("diagnosis");
    let sex_col = optional("sex");
    let age_col = optional("age");

    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |col: Option<usize>| col.and_then(|c| record.get(c)).unwrap_or("");
        let image_id = cell(Some(id_col)).to_string();
        if image_id.is_empty() {
            return Err(Error::SchemaError(format!("row {}: empty image_id", row + 1)));
        }
        let number = |col: usize, name: &str| -> Result<f64> {
            let raw = cell(Some(col));
            let trimmed = raw.trim_end_matches(|c: char| c.is_ascii_alphabetic()).trim();
            trimmed.parse::<f64>().map_err(|_| {
                Error::SchemaError(format!("row {}: `{name}` is not a number: {raw:?}", row + 1))
            })
        };
        let x = number(x_col, "x")?;
        let y = number(y_col, "y")?;
        let size = number(size_col, "size")?;
        for (what, value) in [("x", x), ("y", y)] {
            if !(0.0..spec.native_dim as f64).contains(&value) {
                return Err(Error::RangeError {
                    image_id,
                    what,
                    value,
                    limit: spec.native_dim,
                });
            }
        }
        let diameter_px = match spec.size_units {
            SizeUnits::Mm => size / spec.pixel_spacing_mm,
            SizeUnits::Px => size,
        };
        if !(diameter_px > 0.0) {
            return Err(Error::SchemaError(format!(
                "row {}: nodule size must be positive, got {size}",
                row + 1
            )));
        }
        out.push(NoduleAnnotation {
            image_id,
            center_x: x,
            center_y: y,
            diameter_px,
            subtlety: parse_subtlety(cell(subtlety_col)),
            malignancy: parse_malignancy(cell(malignancy_col)),
            side: parse_side(cell(side_col)),
            lobe: parse_lobe(cell(lobe_col)),
            diagnosis: cell(diagnosis_col).to_string(),
            sex: parse_sex(cell(sex_col)),
            age: cell(age_col).parse().ok(),
        });
    }
    Ok(out)
}

fn normalized(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Accepts the JSRT numeric grades (5 = obvious … 1 = extremely subtle) or
/// the spelled-out names.
pub(crate) fn parse_subtlety(s: &str) -> Option<Subtlety> {
    match normalized(s).as_str() {
        "5" | "obvious" => Some(Subtlety::Obvious),
        "4" | "relativelyobvious" | "relobvious" => Some(Subtlety::RelativelyObvious),
        "3" | "subtle" => Some(Subtlety::Subtle),
        "2" | "verysubtle" | "vsubtle" => Some(Subtlety::VerySubtle),
        "1" | "extremelysubtle" | "esubtle" => Some(Subtlety::ExtremelySubtle),
        _ => None,
    }
}

fn parse_malignancy(s: &str) -> Malignancy {
    match normalized(s).as_str() {
        "malignant" | "m" => Malignancy::Malignant,
        "benign" | "b" => Malignancy::Benign,
        _ => Malignancy::Unknown,
    }
}

fn parse_side(s: &str) -> Side {
    match normalized(s).as_str() {
        "left" | "l" => Side::Left,
        "right" | "r" => Side::Right,
        _ => Side::Unknown,
    }
}

fn parse_lobe(s: &str) -> Lobe {
    let n = normalized(s);
    if n.contains("upper") || n == "u" {
        Lobe::Upper
    } else if n.contains("middle") || n == "m" {
        Lobe::Middle
    } else if n.contains("lower") || n == "l" {
        Lobe::Lower
    } else {
        Lobe::Unknown
    }
}

fn parse_sex(s: &str) -> Sex {
    match normalized(s).as_str() {
        "female" | "f" => Sex::Female,
        "male" | "m" => Sex::Male,
        _ => Sex::Unknown,
    }
}
