//! Stratified result tables, cross-fold statistics and artifact emission.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{Lobe, Malignancy, NoduleAnnotation, Sex, Side, Subtlety, SubtletyCategory};
use crate::fpsweep::RocPoint;
use crate::provenance::{write_atomic, Provenance};
use crate::rater::{aggregate, RatingResult};
use crate::{Error, Result};

pub const SUMMARY_SCHEMA: u32 = 1;
pub const UNKNOWN: &str = "Unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratifier {
    Subtlety,
    Malignancy,
    Location,
    Sex,
    Diagnosis,
    Category,
    None,
}

impl Stratifier {
    pub const ALL: [Stratifier; 7] = [
        Stratifier::Subtlety,
        Stratifier::Malignancy,
        Stratifier::Location,
        Stratifier::Sex,
        Stratifier::Diagnosis,
        Stratifier::Category,
        Stratifier::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stratifier::Subtlety => "subtlety",
            Stratifier::Malignancy => "malignancy",
            Stratifier::Location => "location",
            Stratifier::Sex => "sex",
            Stratifier::Diagnosis => "diagnosis",
            Stratifier::Category => "category",
            Stratifier::None => "none",
        }
    }

    /// Grouping key and display label of one image. Images without an
    /// annotation, or missing the field, land in [`UNKNOWN`].
    fn key(self, ann: Option<&NoduleAnnotation>) -> (String, String) {
        let same = |s: &str| (s.to_string(), s.to_string());
        if self == Stratifier::None {
            return same("All");
        }
        let Some(a) = ann else { return same(UNKNOWN) };
        match self {
            Stratifier::Subtlety => same(a.subtlety.map_or(UNKNOWN, Subtlety::label)),
            Stratifier::Malignancy => same(match a.malignancy {
                Malignancy::Malignant => "Malignant",
                Malignancy::Benign => "Benign",
                Malignancy::Unknown => UNKNOWN,
            }),
            Stratifier::Location => {
                let side = match a.side {
                    Side::Left => "Left",
                    Side::Right => "Right",
                    Side::Unknown => return same(UNKNOWN),
                };
                let lobe = match a.lobe {
                    Lobe::Upper => "upper",
                    Lobe::Middle => "middle",
                    Lobe::Lower => "lower",
                    Lobe::Unknown => return same(UNKNOWN),
                };
                same(&format!("{side} {lobe}"))
            }
            Stratifier::Sex => same(match a.sex {
                Sex::Female => "Female",
                Sex::Male => "Male",
                Sex::Unknown => UNKNOWN,
            }),
            Stratifier::Diagnosis => {
                let d = a.diagnosis.trim();
                if d.is_empty() {
                    same(UNKNOWN)
                } else {
                    (d.to_lowercase(), d.to_string())
                }
            }
            // Categories are nested, so each image is counted once under
            // the strictest category that still includes it.
            Stratifier::Category => match a.subtlety {
                Some(s) => same(
                    SubtletyCategory::ALL
                        .iter()
                        .rev()
                        .find(|c| c.includes(s))
                        .expect("category A includes every subtlety")
                        .label(),
                ),
                None => same(UNKNOWN),
            },
            Stratifier::None => unreachable!(),
        }
    }
}

impl fmt::Display for Stratifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stratifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stratifier::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stratifier {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub label: String,
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub sensitivity: f64,
    pub fp_per_image: f64,
    pub sensitivity_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedTable {
    pub stratifier: Stratifier,
    /// Sorted by label.
    pub rows: Vec<StratumRow>,
}

impl StratifiedTable {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.n).sum()
    }

    /// Fills `sensitivity_sd` from per-fold statistics with matching labels.
    pub fn attach_sd(&mut self, stats: &[FoldStat]) {
        for row in &mut self.rows {
            row.sensitivity_sd = stats.iter().find(|s| s.label == row.label).and_then(|s| s.sd);
        }
    }
}

/// Aggregates `results` per stratum. Annotations are looked up by image id.
pub fn stratify(results: &[RatingResult], annotations: &[NoduleAnnotation], stratifier: Stratifier) -> Result<StratifiedTable> {
    if results.is_empty() {
        return Err(Error::EmptySet);
    }
    let by_id: HashMap<&str, &NoduleAnnotation> = annotations.iter().map(|a| (a.image_id.as_str(), a)).collect();
    // key -> (verbatim labels seen, results)
    let mut groups: BTreeMap<String, (Vec<String>, Vec<&RatingResult>)> = BTreeMap::new();
    for r in results {
        let (key, label) = stratifier.key(by_id.get(r.image_id.as_str()).copied());
        let g = groups.entry(key).or_default();
        g.0.push(label);
        g.1.push(r);
    }
    let mut rows = groups
        .into_values()
        .map(|(labels, members)| {
            let label = labels.into_iter().min().expect("nonempty group");
            let a = aggregate(members)?;
            Ok(StratumRow {
                label,
                n: a.n,
                tp: a.tp,
                fp: a.fp,
                sensitivity: a.sensitivity,
                fp_per_image: a.fp_per_image,
                sensitivity_sd: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(StratifiedTable { stratifier, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStat {
    pub label: String,
    /// Number of folds in which the stratum occurs.
    pub folds: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` when the stratum occurs in one fold.
    pub sd: Option<f64>,
}

/// Mean and sample standard deviation of each stratum's sensitivity across
/// folds.
pub fn fold_statistics(per_fold: &[StratifiedTable]) -> Result<Vec<FoldStat>> {
    if per_fold.len() < 2 {
        return Err(Error::Config(format!(
            "fold statistics need at least 2 folds, got {}",
            per_fold.len()
        )));
    }
    let mut by_label: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for t in per_fold {
        for r in &t.rows {
            by_label.entry(&r.label).or_default().push(r.sensitivity);
        }
    }
    Ok(by_label
        .into_iter()
        .map(|(label, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.len() >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            FoldStat {
                label: label.to_string(),
                folds: v.len(),
                mean,
                sd,
            }
        })
        .collect())
}

pub fn table_csv(table: &StratifiedTable) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["stratum", "n", "tp", "fp", "sensitivity", "fp_per_image", "sensitivity_sd"])?;
    for r in &table.rows {
        w.write_record([
            r.label.clone(),
            r.n.to_string(),
            r.tp.to_string(),
            r.fp.to_string(),
            format!("{:.6}", r.sensitivity),
            format!("{:.6}", r.fp_per_image),
            r.sensitivity_sd.map_or(String::new(), |s| format!("{s:.6}")),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {}", e.error())))
}

/// Sensitivity against FP/image as a small standalone SVG.
pub fn roc_svg(points: &[RocPoint]) -> String {
    let (w, h, m) = (480.0, 360.0, 40.0);
    let max_fp = points.iter().map(|p| p.fp_per_image).fold(1.0f64, f64::max);
    let sx = |fp: f64| m + fp / max_fp * (w - 2.0 * m);
    let sy = |s: f64| h - m - s / 100.0 * (h - 2.0 * m);
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (sx(p.fp_per_image), sy(p.sensitivity))).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let line: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    s += &format!(
        "<path d=\"M{m},{m} V{} H{}\" fill=\"none\" stroke=\"black\"/>\n",
        h - m,
        w - m
    );
    s += &format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">FP per image (max {max_fp:.2})</text>\n",
        w / 2.0,
        h - 10.0
    );
    s += &format!("<text x=\"10\" y=\"{}\" font-size=\"12\">Sens. %</text>\n", m - 10.0);
    s += &format!("<polyline points=\"{}\" fill=\"none\" stroke=\"#c03030\"/>\n", line.join(" "));
    for p in points {
        s += &format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\"><title>k={}</title></circle>\n",
            sx(p.fp_per_image),
            sy(p.sensitivity),
            p.kernel_size
        );
    }
    s + "</svg>\n"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub stratifier: Stratifier,
    pub file: String,
    pub rows: Vec<StratumRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub tables: Vec<TableEntry>,
    pub roc_file: Option<String>,
    pub notes: Vec<String>,
    pub overlays: Vec<String>,
    /// Caller-specific content such as the experiment cells.
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Default)]
pub struct EmitOptions {
    pub roc_svg: bool,
}

/// Writes `table_{stratifier}.csv` per table, `roc.csv` (and `roc.svg`) when
/// there are ROC points, and `summary.json`. Returns the written paths.
/// Overlay paths are recorded relative to `dest` when possible.
pub fn emit(
    dest: &Path,
    provenance: &Provenance,
    tables: &[StratifiedTable],
    roc: &[RocPoint],
    overlays: &[PathBuf],
    details: serde_json::Value,
    opts: &EmitOptions,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for t in tables {
        let file = format!("table_{}.csv", t.stratifier);
        let path = dest.join(&file);
        write_atomic(&path, &table_csv(t)?)?;
        written.push(path);
        entries.push(TableEntry {
            stratifier: t.stratifier,
            file,
            rows: t.rows.clone(),
        });
    }
    let mut notes = Vec::new();
    let roc_file = if roc.is_empty() {
        notes.push("no ROC points: the morphology sweep produced no output".to_string());
        None
    } else {
        let path = dest.join("roc.csv");
        crate::fpsweep::write_roc_csv(&path, roc)?;
        written.push(path);
        if opts.roc_svg {
            let path = dest.join("roc.svg");
            write_atomic(&path, roc_svg(roc).as_bytes())?;
            written.push(path);
        }
        Some("roc.csv".to_string())
    };
    let mut overlays: Vec<String> = overlays
        .iter()
        .map(|p| p.strip_prefix(dest).unwrap_or(p).to_string_lossy().replace('\\', "/"))
        .collect();
    overlays.sort();
    let summary = Summary {
        schema_version: SUMMARY_SCHEMA,
        provenance: provenance.clone(),
        tables: entries,
        roc_file,
        notes,
        overlays,
        details,
    };
    let path = dest.join("summary.json");
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    write_atomic(&path, &bytes)?;
    written.push(path);
    Ok(written)
}
