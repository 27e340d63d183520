use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{find_image, lung_mask_path, stratified_tables, Pipeline};
use crate::dataio::{load_image, load_lung_mask, make_nih_annotations, parse_bbox_file, CurationList, Image};
use crate::ensemble::EpochTriplet;
use crate::parallel::par_map;
use crate::preprocess::{run_pipeline, PreprocessConfig, Variant};
use crate::rater::{aggregate, rate_image, write_ratings_csv, Aggregate, RatingResult};
use crate::report::{emit, EmitOptions};
use crate::trainer::{CellKey, Manifest};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalReport {
    pub experiment: String,
    pub dataset: String,
    pub aggregate: Aggregate,
    /// True when the images were upsampled beyond their native resolution.
    pub interpolated_input: bool,
    pub folds: usize,
    pub lung_masks: String,
    pub out_dir: PathBuf,
}

/// Evaluates the he-seg models named by `[external]` on the external set.
/// Each image's composite is the mean of the fold ensembles' composites.
/// `manifest` defaults to the pipeline's training manifest; its checkpoint
/// paths are taken relative to the manifest's directory.
pub fn external_test(pipeline: &Pipeline, manifest: Option<&Path>) -> Result<ExternalReport> {
    let cfg = pipeline.config();
    let ext = cfg
        .external
        .as_ref()
        .ok_or_else(|| Error::Config("no [external] section in the config".into()))?;
    let manifest_path = manifest.map_or_else(|| pipeline.manifest_path(), Path::to_path_buf);
    if !manifest_path.is_file() {
        return Err(Error::StageDependency {
            stage: "external-test".into(),
            missing: format!("train manifest {}", manifest_path.display()),
        });
    }
    let manifest = Manifest::load(&manifest_path)?;
    let train_root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();

    let rows = parse_bbox_file(&ext.bbox_file)?;
    let curation = CurationList::load(&ext.curation_list)?;
    let mut seen = BTreeSet::new();
    let anns: Vec<_> = make_nih_annotations(&rows, &curation)?
        .into_iter()
        .filter(|a| {
            let first = seen.insert(a.image_id.clone());
            if !first {
                log::warn!("{}: several nodule boxes, keeping the first", a.image_id);
            }
            first
        })
        .collect();
    if anns.is_empty() {
        return Err(Error::EmptySet);
    }

    let dim = ext.resolution;
    let pcfg = PreprocessConfig::new(Variant::HeSeg, dim);
    let records = par_map(&anns, |a| -> Result<_> {
        let path = find_image(&ext.image_dir, &a.image_id, Some("png")).ok_or_else(|| {
            Error::io(ext.image_dir.join(&a.image_id), std::io::ErrorKind::NotFound.into())
        })?;
        let mut rec = load_image(&path, &ext.spec)?;
        rec.image_id = a.image_id.clone();
        let lung = load_lung_mask(lung_mask_path(&ext.lung_mask_dir, &a.image_id), ext.spec.native_dim)?;
        run_pipeline(&rec.with_annotation(a.clone()).with_lung_mask(lung), &pcfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let exp = CellKey {
        depth: ext.depth,
        dim,
        variant: Variant::HeSeg,
        fold: 0,
    };
    let mut sums: Vec<Image> = records.iter().map(|r| Image::zeros(r.pixels.dim())).collect();
    let mut folds = 0;
    for fold in 0..cfg.folds {
        let id = CellKey { fold, ..exp }.id();
        let Some(cell) = manifest.cells.get(&id) else {
            return Err(Error::StageDependency {
                stage: "external-test".into(),
                missing: format!("trained cell {id}"),
            });
        };
        let triplet = EpochTriplet::load(cell.optimal_epoch, |e| manifest.checkpoint(&train_root, &id, e))?;
        let composites = par_map(&records, |r| triplet.predict(&r.pixels));
        for (sum, c) in sums.iter_mut().zip(composites) {
            *sum += &c?;
        }
        folds += 1;
    }
    let results: Vec<RatingResult> = records
        .iter()
        .zip(&sums)
        .map(|(r, sum)| rate_image(&r.image_id, &(sum / folds as f32), r.annotation.as_ref(), &cfg.rater))
        .collect();

    let name = exp.experiment();
    let out_dir = pipeline.root().join("external").join(&name);
    let rated_anns: Vec<_> = records.iter().filter_map(|r| r.annotation.clone()).collect();
    let ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    // A single pseudo-fold: every external image is scored by all folds.
    let plan = crate::dataio::FoldPlan {
        seed: cfg.seed,
        k: 1,
        assignments: ids.iter().map(|id| (id.to_string(), 0)).collect(),
    };
    let (tables, _) = stratified_tables(&results, &rated_anns, &plan, &cfg.report.stratifiers)?;
    let report = ExternalReport {
        experiment: name,
        dataset: ext.spec.name.clone(),
        aggregate: aggregate(&results)?,
        interpolated_input: dim > ext.spec.native_dim,
        folds,
        lung_masks: format!("externally supplied ({})", ext.lung_mask_dir.display()),
        out_dir: out_dir.clone(),
    };
    write_ratings_csv(&out_dir.join("ratings.csv"), &results)?;
    emit(
        &out_dir,
        pipeline.provenance(),
        &tables,
        &[],
        &[],
        serde_json::to_value(&report)?,
        &EmitOptions::default(),
    )?;
    log::info!("external test written to {}", out_dir.display());
    Ok(report)
}
