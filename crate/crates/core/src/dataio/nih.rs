use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::{synthesize_nodule_mask, Mask, NoduleAnnotation};
use crate::{Error, Result};

/// One row of a bounding-box file, coordinates in native pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BboxRow {
    pub image_id: String,
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub fn parse_bbox_file(path: impl AsRef<Path>) -> Result<Vec<BboxRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bbox_str(&text)
}

/// Parses `image_id,label,x,y,w,h` with a header row. The ChestX-ray14
/// distribution header (`Image Index,Finding Label,Bbox [x,y,w,h],,,`) is
/// also accepted and read positionally.
pub fn parse_bbox_str(text: &str) -> Result<Vec<BboxRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers: HashMap<String, usize> = reader
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_ascii_lowercase(), i))
        .collect();
    let positional = headers.contains_key("image index");
    let cols: Vec<usize> = if positional {
        (0..6).collect()
    } else {
        ["image_id", "label", "x", "y", "w", "h"]
            .iter()
            .map(|name| {
                headers
                    .get(*name)
                    .copied()
                    .ok_or_else(|| Error::SchemaError(format!("bbox file: missing column `{name}`")))
            })
            .collect::<Result<_>>()?
    };

    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |i: usize| record.get(cols[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            cell(i).parse().map_err(|_| {
                Error::SchemaError(format!("bbox row {}: bad number {:?}", n + 1, cell(i)))
            })
        };
        rows.push(BboxRow {
            image_id: cell(0).to_string(),
            label: cell(1).to_string(),
            x: num(2)?,
            y: num(3)?,
            w: num(4)?,
            h: num(5)?,
        });
    }
    Ok(rows)
}

/// Explicit list of usable image ids. Curation of the external set is a
/// human decision, so it is always read from a file and never recomputed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CurationList {
    pub ids: BTreeSet<String>,
}

impl CurationList {
    /// One id per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> CurationList {
        let ids = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        CurationList { ids }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CurationList> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::CurationListMissing(path.display().to_string()))?;
        let list = Self::parse(&text);
        if list.ids.is_empty() {
            return Err(Error::CurationListMissing(format!(
                "{} lists no image ids",
                path.display()
            )));
        }
        Ok(list)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }
}

/// Circle annotation for a nodule bounding box: centered on the box, with
/// diameter equal to the larger box side.
pub fn bbox_to_annotation(row: &BboxRow) -> Result<NoduleAnnotation> {
    if !row.label.eq_ignore_ascii_case("nodule") {
        return Err(Error::LabelError {
            image_id: row.image_id.clone(),
            label: row.label.clone(),
        });
    }
    let mut ann = NoduleAnnotation::new(
        row.image_id.clone(),
        row.x + row.w / 2.0,
        row.y + row.h / 2.0,
        row.w.max(row.h),
    );
    ann.diagnosis = "Nodule".into();
    Ok(ann)
}

/// Nodule rows restricted to the curated ids, in file order.
pub fn make_nih_annotations(rows: &[BboxRow], curation: &CurationList) -> Result<Vec<NoduleAnnotation>> {
    let nodules: Vec<&BboxRow> = rows
        .iter()
        .filter(|r| r.label.eq_ignore_ascii_case("nodule"))
        .collect();
    log::info!("{} nodule rows before curation", nodules.len());
    let mut out = Vec::new();
    for row in nodules {
        if curation.contains(&row.image_id) {
            out.push(bbox_to_annotation(row)?);
        }
    }
    let found: BTreeSet<&str> = out.iter().map(|a| a.image_id.as_str()).collect();
    for missing in curation.ids.iter().filter(|id| !found.contains(id.as_str())) {
        log::warn!("curated id {missing} has no nodule bounding box");
    }
    Ok(out)
}

/// Curated annotations paired with their circle masks at `native_dim`.
pub fn make_nih_masks(
    rows: &[BboxRow],
    curation: &CurationList,
    native_dim: usize,
) -> Result<Vec<(NoduleAnnotation, Mask)>> {
    Ok(make_nih_annotations(rows, curation)?
        .into_iter()
        .map(|ann| {
            let mask = synthesize_nodule_mask(&ann, native_dim, native_dim).mask;
            (ann, mask)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_center_and_diameter() {
        let row = BboxRow {
            image_id: "00000001_000.png".into(),
            label: "Nodule".into(),
            x: 100.0,
            y: 200.0,
            w: 40.0,
            h: 60.0,
        };
        let a = bbox_to_annotation(&row).unwrap();
        assert_eq!((a.center_x, a.center_y, a.diameter_px), (120.0, 230.0, 60.0));
    }

    #[test]
    fn non_nodule_rows_are_rejected() {
        let row = BboxRow {
            image_id: "x".into(),
            label: "Mass".into(),
            x: 0.0,
            y: 0.0,
            w: 1.0,
            h: 1.0,
        };
        assert!(matches!(bbox_to_annotation(&row), Err(Error::LabelError { .. })));
    }

    #[test]
    fn original_distribution_header_is_read_positionally() {
        let text = "Image Index,Finding Label,Bbox [x,y,w,h],,,\n\
                    a.png,Nodule,10,20,30,40\n\
                    b.png,Mass,1,2,3,4\n";
        let rows = parse_bbox_str(text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].h, 40.0);
        assert_eq!(rows[1].label, "Mass");
    }

    #[test]
    fn curation_filters_and_skips_other_labels() {
        let text = "image_id,label,x,y,w,h\n\
                    a.png,Nodule,10,20,30,40\n\
                    b.png,Nodule,1,2,3,4\n\
                    c.png,Atelectasis,1,2,3,4\n";
        let rows = parse_bbox_str(text).unwrap();
        let curation = CurationList::parse("# usable\na.png\nc.png # not a nodule row\n");
        let anns = make_nih_annotations(&rows, &curation).unwrap();
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].image_id, "a.png");
        let masks = make_nih_masks(&rows, &curation, 64).unwrap();
        assert_eq!(masks[0].1.dim(), (64, 64));
    }

    #[test]
    fn missing_or_empty_curation_list_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.txt");
        assert!(matches!(CurationList::load(&missing), Err(Error::CurationListMissing(_))));
        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, "# nothing yet\n").unwrap();
        assert!(matches!(CurationList::load(&empty), Err(Error::CurationListMissing(_))));
    }
}
