//! Declarative experiment runs: one config file drives ingestion,
//! preprocessing, the training matrix, ensembling, rating, the morphology
//! sweep and the report.
//!
//! Every stage writes into its own directory under the output root and
//! finishes by writing a `stage.json` marker holding the hash of its inputs.
//! A stage whose marker matches and whose listed files exist is skipped,
//! so a repeated run performs no work and leaves every byte in place.
//!
//! ```text
//! {root}/ingest/dataset.json, images/{id}.png, lungs/{id}.png
//! {root}/preprocess/{variant}_{dim}/{id}.png, targets_{dim}/{id}.png
//! {root}/train/manifest.json, {experiment}/{fold}/epoch_{NN}.ckpt
//! {root}/ensemble/{experiment}/{id}.png
//! {root}/rate/{experiment}/ratings.json, ratings.csv
//! {root}/sweep/{experiment}/roc.csv
//! {root}/report/summary.json, {experiment}/table_*.csv
//! ```

mod config;
mod external;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{
    DatasetConfig, ExperimentConfig, ExternalConfig, ReportConfig, SweepSection, ENV_DATA_ROOT, ENV_OUTPUT_ROOT,
};
pub use external::{external_test, ExternalReport};

use crate::dataio::{
    load_image, load_lung_mask, make_folds, nodule_in_lung, parse_annotations, read_png16, read_png_gray,
    rescale_annotation, synthesize_nodule_mask, write_png16, write_png_mask, AnnotationOptions, FoldPlan,
    ImageRecord, NoduleAnnotation, SubtletyCategory,
};
use crate::ensemble::{save_composite, EpochTriplet};
use crate::fpsweep::{sweep, write_roc_csv, RocPoint, SweepItem};
use crate::parallel::par_map;
use crate::preprocess::{run_pipeline, PreprocessConfig, Variant};
use crate::provenance::{hash_json, write_atomic, Hasher, Provenance};
use crate::rater::{aggregate, rate_image, write_overlay, write_ratings_csv, Aggregate, RatingResult};
use crate::report::{emit, fold_statistics, stratify, EmitOptions, FoldStat, Stratifier, StratifiedTable};
use crate::synth::synth_record;
use crate::trainer::{run_matrix, CellKey, CellRecord, Dataset, Manifest, Sample};
use crate::{Error, Result};

pub const MARKER: &str = "stage.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Preprocess,
    Train,
    Ensemble,
    Rate,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Preprocess,
        Stage::Train,
        Stage::Ensemble,
        Stage::Rate,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Ensemble => "ensemble",
            Stage::Rate => "rate",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }

    /// `all` expands to every stage in order.
    pub fn parse_selector(s: &str) -> Result<Vec<Stage>> {
        if s == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        Ok(vec![s.parse()?])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Marker {
    stage: Stage,
    hash: String,
    provenance: Provenance,
    /// Outputs relative to the marker's directory.
    files: Vec<String>,
}

/// One image that survived ingestion, with its annotation in the native frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestEntry {
    pub image_id: String,
    pub annotation: NoduleAnnotation,
    pub has_lung_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    pub native_dim: usize,
    pub entries: Vec<IngestEntry>,
    pub plan: FoldPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// True when the stage found its outputs up to date.
    pub skipped: bool,
    /// Training cells trained in this run.
    pub trained: Vec<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCount {
    pub name: String,
    pub annotated: usize,
    /// Images that pass the category and in-lung filters.
    pub positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub cells: Vec<String>,
    pub experiments: usize,
    pub datasets: Vec<DatasetCount>,
    pub problems: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.problems.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "experiments: {}", self.experiments)?;
        writeln!(f, "training cells: {}", self.cells.len())?;
        for d in &self.datasets {
            writeln!(f, "dataset {}: {} annotated, {} positive images", d.name, d.annotated, d.positive)?;
        }
        if self.problems.is_empty() {
            writeln!(f, "valid")
        } else {
            for p in &self.problems {
                writeln!(f, "problem: {p}")?;
            }
            writeln!(f, "invalid ({} problems)", self.problems.len())
        }
    }
}

fn keep_category(cat: SubtletyCategory, ann: &NoduleAnnotation) -> bool {
    cat == SubtletyCategory::A || ann.subtlety.is_some_and(|s| cat.includes(s))
}

fn stem(id: &str) -> String {
    Path::new(id)
        .file_stem()
        .map_or_else(|| id.to_string(), |s| s.to_string_lossy().into_owned())
}

fn find_image(dir: &Path, id: &str, ext: Option<&str>) -> Option<PathBuf> {
    let direct = dir.join(id);
    if direct.is_file() {
        return Some(direct);
    }
    let with_ext = dir.join(format!("{id}.{}", ext?));
    with_ext.is_file().then_some(with_ext)
}

/// Annotations of a real dataset with their image paths, duplicates rejected.
fn real_annotations(d: &DatasetConfig) -> Result<Vec<(NoduleAnnotation, Option<PathBuf>)>> {
    let ann_path = d.annotations.as_ref().ok_or_else(|| Error::Config("dataset.annotations is not set".into()))?;
    let image_dir = d.image_dir.as_ref().ok_or_else(|| Error::Config("dataset.image_dir is not set".into()))?;
    let anns = parse_annotations(ann_path, &d.spec, AnnotationOptions::default())?;
    let mut seen = std::collections::BTreeSet::new();
    anns.into_iter()
        .map(|a| {
            if !seen.insert(a.image_id.clone()) {
                return Err(Error::DuplicateId(a.image_id.clone()));
            }
            let path = find_image(image_dir, &a.image_id, d.image_extension.as_deref());
            Ok((a, path))
        })
        .collect()
}

fn lung_mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{}.png", stem(id)))
}

/// Resolves the grid and checks the config, the referenced paths and the
/// dataset. Never fails; problems are listed in the report.
pub fn validate(cfg: &ExperimentConfig) -> ValidationReport {
    let grid = cfg.grid();
    let mut problems = cfg.check_schema();
    problems.extend(cfg.missing_paths().into_iter().map(|p| format!("missing path: {}", p.display())));
    let mut datasets = Vec::new();
    let d = &cfg.dataset;
    if let Some(s) = &d.synthetic {
        let positive = (0..s.count)
            .filter(|&i| keep_category(d.category, synth_record(s, i).annotation.as_ref().expect("annotated")))
            .count();
        datasets.push(DatasetCount {
            name: d.spec.name.clone(),
            annotated: s.count,
            positive,
        });
    } else if problems.is_empty() {
        match count_real(d) {
            Ok((count, missing)) => {
                problems.extend(missing);
                datasets.push(count);
            }
            Err(e) => problems.push(e.to_string()),
        }
    }
    if let Some(ds) = datasets.first() {
        if ds.positive < cfg.folds {
            problems.push(format!("{} positive images cannot fill {} folds", ds.positive, cfg.folds));
        }
    }
    ValidationReport {
        cells: grid.cells().iter().map(CellKey::id).collect(),
        experiments: grid.experiment_count(),
        datasets,
        problems,
    }
}

fn count_real(d: &DatasetConfig) -> Result<(DatasetCount, Vec<String>)> {
    let anns = real_annotations(d)?;
    let mut missing = Vec::new();
    let mut positive = 0;
    for (a, path) in &anns {
        if path.is_none() {
            missing.push(format!("image for {} not found", a.image_id));
            continue;
        }
        if !keep_category(d.category, a) {
            continue;
        }
        if d.in_lung_only {
            let dir = d.lung_mask_dir.as_ref().expect("checked by check_schema");
            let mpath = lung_mask_path(dir, &a.image_id);
            if !mpath.is_file() {
                missing.push(format!("missing lung mask: {}", mpath.display()));
                continue;
            }
            if !nodule_in_lung(a, &load_lung_mask(&mpath, d.spec.native_dim)?) {
                continue;
            }
        }
        positive += 1;
    }
    Ok((
        DatasetCount {
            name: d.spec.name.clone(),
            annotated: anns.len(),
            positive,
        },
        missing,
    ))
}

/// Hash of the config as it affects results; the output root is excluded
/// so a relocated run reports the same hash.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output_root = PathBuf::new();
    hash_json(&c)
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    root: PathBuf,
    provenance: Provenance,
    resume: bool,
}

impl Pipeline {
    /// Fails with a configuration error listing every schema problem.
    pub fn new(cfg: ExperimentConfig, resume: bool) -> Result<Pipeline> {
        let problems = cfg.check_schema();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        Ok(Pipeline {
            root: cfg.output_root.clone(),
            provenance: Provenance::new(config_hash(&cfg), cfg.seed),
            cfg,
            resume,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.as_str())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.stage_dir(Stage::Train).join("manifest.json")
    }

    pub fn run(&self, stages: &[Stage]) -> Result<Vec<StageOutcome>> {
        stages.iter().map(|&s| self.run_stage(s)).collect()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        log::info!("stage {stage}");
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Preprocess => self.preprocess(),
            Stage::Train => self.train(),
            Stage::Ensemble => self.ensemble(),
            Stage::Rate => self.rate(),
            Stage::Sweep => self.sweep(),
            Stage::Report => self.report(),
        }
    }

    fn read_marker(dir: &Path) -> Option<Marker> {
        let bytes = std::fs::read(dir.join(MARKER)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn up_to_date(&self, dir: &Path, hash: &str) -> bool {
        self.resume
            && Self::read_marker(dir).is_some_and(|m| m.hash == hash && m.files.iter().all(|f| dir.join(f).is_file()))
    }

    fn write_marker(&self, dir: &Path, stage: Stage, hash: &str, mut files: Vec<String>) -> Result<()> {
        files.sort();
        let m = Marker {
            stage,
            hash: hash.to_string(),
            provenance: self.provenance.clone(),
            files,
        };
        write_atomic(&dir.join(MARKER), &serde_json::to_vec_pretty(&m)?)
    }

    /// Marker of an upstream stage output, or a dependency error naming it.
    fn require(&self, stage: Stage, upstream: Stage, dir: &Path) -> Result<Marker> {
        Self::read_marker(dir).filter(|m| m.stage == upstream).ok_or_else(|| Error::StageDependency {
            stage: stage.to_string(),
            missing: format!("{upstream} output {}", dir.join(MARKER).display()),
        })
    }

    fn skipped(stage: Stage, message: impl Into<String>) -> StageOutcome {
        StageOutcome {
            stage,
            skipped: true,
            trained: Vec::new(),
            message: message.into(),
        }
    }

    fn done(stage: Stage, message: impl Into<String>) -> StageOutcome {
        StageOutcome {
            stage,
            skipped: false,
            trained: Vec::new(),
            message: message.into(),
        }
    }

    fn ingest_hash(&self) -> Result<String> {
        let d = &self.cfg.dataset;
        let mut h = Hasher::new();
        h.update_str(&hash_json(&(d, self.cfg.folds, self.cfg.seed)));
        if d.synthetic.is_none() {
            // File names and sizes stand in for the content of the corpus.
            for dir in [&d.image_dir, &d.lung_mask_dir].into_iter().flatten() {
                let mut listing: Vec<(String, u64)> = std::fs::read_dir(dir)
                    .map_err(|e| Error::io(dir, e))?
                    .filter_map(|e| e.ok())
                    .filter_map(|e| Some((e.file_name().to_string_lossy().into_owned(), e.metadata().ok()?.len())))
                    .collect();
                listing.sort();
                h.update_str(&hash_json(&listing));
            }
            if let Some(a) = &d.annotations {
                h.update(&std::fs::read(a).map_err(|e| Error::io(a, e))?);
            }
        }
        Ok(h.finish())
    }

    /// The ingest output, or a dependency error on behalf of `stage`.
    pub fn load_ingested(&self, stage: Stage) -> Result<Ingested> {
        self.require(stage, Stage::Ingest, &self.stage_dir(Stage::Ingest))?;
        let path = self.stage_dir(Stage::Ingest).join("dataset.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn ingest(&self) -> Result<StageOutcome> {
        let dir = self.stage_dir(Stage::Ingest);
        let hash = self.ingest_hash()?;
        if self.up_to_date(&dir, &hash) {
            return Ok(Self::skipped(Stage::Ingest, "up to date"));
        }
        let d = &self.cfg.dataset;
        let mut entries = Vec::new();
        let mut files = Vec::new();
        let mut store = |rec: ImageRecord, files: &mut Vec<String>| -> Result<()> {
            let ann = rec.annotation.clone().expect("ingested records are annotated");
            if !keep_category(d.category, &ann) {
                return Ok(());
            }
            if d.in_lung_only {
                let lung = rec.lung_mask.as_ref().ok_or_else(|| Error::MissingMask(rec.image_id.clone()))?;
                if !nodule_in_lung(&ann, lung) {
                    log::info!("excluding {}: nodule centroid outside the lung field", rec.image_id);
                    return Ok(());
                }
            }
            rec.check()?;
            let img = format!("images/{}.png", rec.image_id);
            write_png16(dir.join(&img), &rec.pixels)?;
            files.push(img);
            if let Some(lung) = &rec.lung_mask {
                let m = format!("lungs/{}.png", rec.image_id);
                write_png_mask(dir.join(&m), lung)?;
                files.push(m);
            }
            entries.push(IngestEntry {
                image_id: rec.image_id,
                annotation: ann,
                has_lung_mask: rec.lung_mask.is_some(),
            });
            Ok(())
        };
        let native_dim = match &d.synthetic {
            Some(s) => {
                for i in 0..s.count {
                    store(synth_record(s, i), &mut files)?;
                }
                s.dim
            }
            None => {
                for (ann, path) in real_annotations(d)? {
                    let path = path.ok_or_else(|| {
                        Error::io(
                            d.image_dir.as_ref().expect("checked").join(&ann.image_id),
                            std::io::ErrorKind::NotFound.into(),
                        )
                    })?;
                    let mut rec = load_image(&path, &d.spec)?;
                    rec.image_id = ann.image_id.clone();
                    if let Some(mdir) = &d.lung_mask_dir {
                        let mpath = lung_mask_path(mdir, &ann.image_id);
                        if mpath.is_file() {
                            rec.lung_mask = Some(load_lung_mask(&mpath, d.spec.native_dim)?);
                        }
                    }
                    store(rec.with_annotation(ann), &mut files)?;
                }
                d.spec.native_dim
            }
        };
        let ids: Vec<&str> = entries.iter().map(|e| e.image_id.as_str()).collect();
        let plan = make_folds(&ids, self.cfg.folds, self.cfg.seed)?;
        let n = entries.len();
        let ingested = Ingested {
            native_dim,
            entries,
            plan,
        };
        write_atomic(&dir.join("dataset.json"), &serde_json::to_vec_pretty(&ingested)?)?;
        files.push("dataset.json".into());
        self.write_marker(&dir, Stage::Ingest, &hash, files)?;
        Ok(Self::done(Stage::Ingest, format!("{n} images")))
    }

    fn variant_dir(&self, variant: Variant, dim: usize) -> PathBuf {
        self.stage_dir(Stage::Preprocess).join(format!("{variant}_{dim}"))
    }

    fn target_dir(&self, dim: usize) -> PathBuf {
        self.stage_dir(Stage::Preprocess).join(format!("targets_{dim}"))
    }

    fn preprocess(&self) -> Result<StageOutcome> {
        let up = self.require(Stage::Preprocess, Stage::Ingest, &self.stage_dir(Stage::Ingest))?;
        let dir = self.stage_dir(Stage::Preprocess);
        let hash = hash_json(&(&up.hash, &self.cfg.variants, &self.cfg.resolutions));
        if self.up_to_date(&dir, &hash) {
            return Ok(Self::skipped(Stage::Preprocess, "up to date"));
        }
        let ing = self.load_ingested(Stage::Preprocess)?;
        let idir = self.stage_dir(Stage::Ingest);
        let outputs = par_map(&ing.entries, |e| -> Result<Vec<String>> {
            let mut rec = ImageRecord::new(&e.image_id, read_png16(idir.join(format!("images/{}.png", e.image_id)))?)
                .with_annotation(e.annotation.clone());
            if e.has_lung_mask {
                let m = read_png_gray(idir.join(format!("lungs/{}.png", e.image_id)))?;
                rec = rec.with_lung_mask(m.mapv(|v| v > 0.5));
            }
            let mut files = Vec::new();
            for &dim in &self.cfg.resolutions {
                let target = synthesize_nodule_mask(&e.annotation, ing.native_dim, dim).mask;
                let t = format!("targets_{dim}/{}.png", e.image_id);
                write_png_mask(dir.join(&t), &target)?;
                files.push(t);
                for &v in &self.cfg.variants {
                    let out = run_pipeline(&rec, &PreprocessConfig::new(v, dim))?;
                    let p = format!("{v}_{dim}/{}.png", e.image_id);
                    write_png16(dir.join(&p), &out.pixels)?;
                    files.push(p);
                }
            }
            Ok(files)
        });
        let mut files = Vec::new();
        for o in outputs {
            files.extend(o?);
        }
        let n = files.len();
        self.write_marker(&dir, Stage::Preprocess, &hash, files)?;
        Ok(Self::done(Stage::Preprocess, format!("{n} files")))
    }

    fn load_dataset(&self, ing: &Ingested, dim: usize, variant: Variant) -> Result<Arc<Dataset>> {
        let vdir = self.variant_dir(variant, dim);
        let tdir = self.target_dir(dim);
        let samples = ing
            .entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    image_id: e.image_id.clone(),
                    image: read_png16(vdir.join(format!("{}.png", e.image_id)))?,
                    target: read_png_gray(tdir.join(format!("{}.png", e.image_id)))?.mapv(|v| v > 0.5),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(Dataset::new(samples)))
    }

    fn train(&self) -> Result<StageOutcome> {
        self.require(Stage::Train, Stage::Preprocess, &self.stage_dir(Stage::Preprocess))?;
        let ing = self.load_ingested(Stage::Train)?;
        let report = run_matrix(
            &self.cfg.grid(),
            |k| self.cfg.spec_for(k),
            |dim, v| self.load_dataset(&ing, dim, v),
            &ing.plan,
            &self.cfg.train_config(),
            &self.stage_dir(Stage::Train),
            self.resume,
        )?;
        Ok(StageOutcome {
            stage: Stage::Train,
            skipped: report.trained.is_empty(),
            message: format!("{} cells trained, {} up to date", report.trained.len(), report.skipped.len()),
            trained: report.trained,
        })
    }

    /// Experiments of the grid as (depth, dim, variant) keys with fold 0.
    fn experiments(&self) -> Vec<CellKey> {
        let mut g = self.cfg.grid();
        g.folds = vec![0];
        g.cells()
    }

    fn load_manifest(&self, stage: Stage) -> Result<Manifest> {
        let path = self.manifest_path();
        if !path.is_file() {
            return Err(Error::StageDependency {
                stage: stage.to_string(),
                missing: format!("train manifest {}", path.display()),
            });
        }
        Manifest::load(&path)
    }

    /// Manifest records of every fold of an experiment.
    fn experiment_cells<'m>(&self, stage: Stage, manifest: &'m Manifest, exp: &CellKey) -> Result<Vec<&'m CellRecord>> {
        (0..self.cfg.folds)
            .map(|fold| {
                let id = CellKey { fold, ..*exp }.id();
                manifest.cells.get(&id).ok_or_else(|| Error::StageDependency {
                    stage: stage.to_string(),
                    missing: format!("trained cell {id}"),
                })
            })
            .collect()
    }

    fn ensemble(&self) -> Result<StageOutcome> {
        let manifest = self.load_manifest(Stage::Ensemble)?;
        let train_root = self.stage_dir(Stage::Train);
        let mut ran = 0;
        for exp in self.experiments() {
            let name = exp.experiment();
            let cells = self.experiment_cells(Stage::Ensemble, &manifest, &exp)?;
            let dir = self.stage_dir(Stage::Ensemble).join(&name);
            let fingerprint: Vec<(&str, usize)> = cells.iter().map(|c| (c.input_hash.as_str(), c.optimal_epoch)).collect();
            let hash = hash_json(&fingerprint);
            if self.up_to_date(&dir, &hash) {
                continue;
            }
            let vdir = self.variant_dir(exp.variant, exp.dim);
            let mut files = Vec::new();
            for cell in cells {
                let id = cell.key.id();
                let triplet = EpochTriplet::load(cell.optimal_epoch, |e| manifest.checkpoint(&train_root, &id, e))?;
                let written = par_map(&cell.split.test, |img_id| -> Result<String> {
                    let img = read_png16(vdir.join(format!("{img_id}.png")))?;
                    let composite = triplet.predict(&img)?;
                    let f = format!("{img_id}.png");
                    save_composite(&dir.join(&f), &composite)?;
                    Ok(f)
                });
                for w in written {
                    files.push(w?);
                }
            }
            self.write_marker(&dir, Stage::Ensemble, &hash, files)?;
            ran += 1;
        }
        Ok(self.outcome(Stage::Ensemble, ran))
    }

    fn outcome(&self, stage: Stage, ran: usize) -> StageOutcome {
        let total = self.experiments().len();
        let message = format!("{ran} of {total} experiments processed");
        if ran == 0 {
            Self::skipped(stage, message)
        } else {
            Self::done(stage, message)
        }
    }

    /// Annotations at training resolution, keyed by image id.
    fn annotations_at(&self, ing: &Ingested, dim: usize) -> BTreeMap<String, NoduleAnnotation> {
        ing.entries
            .iter()
            .map(|e| (e.image_id.clone(), rescale_annotation(&e.annotation, ing.native_dim, dim)))
            .collect()
    }

    fn rate(&self) -> Result<StageOutcome> {
        let ing = self.load_ingested(Stage::Rate)?;
        let mut ran = 0;
        for exp in self.experiments() {
            let name = exp.experiment();
            let edir = self.stage_dir(Stage::Ensemble).join(&name);
            let up = self.require(Stage::Rate, Stage::Ensemble, &edir)?;
            let dir = self.stage_dir(Stage::Rate).join(&name);
            let hash = hash_json(&(&up.hash, &self.cfg.rater, self.cfg.report.overlays));
            if self.up_to_date(&dir, &hash) {
                continue;
            }
            let anns = self.annotations_at(&ing, exp.dim);
            let rated = par_map(&ing.entries, |e| -> Result<(RatingResult, Option<String>)> {
                let composite = read_png16(edir.join(format!("{}.png", e.image_id)))?;
                let gt = anns.get(&e.image_id);
                let r = rate_image(&e.image_id, &composite, gt, &self.cfg.rater);
                let overlay = if self.cfg.report.overlays {
                    let f = format!("overlays/{}.png", e.image_id);
                    write_overlay(&dir.join(&f), &composite, &r, gt)?;
                    Some(f)
                } else {
                    None
                };
                Ok((r, overlay))
            });
            let mut results = Vec::new();
            let mut files = vec!["ratings.json".to_string(), "ratings.csv".to_string()];
            for r in rated {
                let (r, o) = r?;
                results.push(r);
                files.extend(o);
            }
            write_atomic(&dir.join("ratings.json"), &serde_json::to_vec_pretty(&results)?)?;
            write_ratings_csv(&dir.join("ratings.csv"), &results)?;
            self.write_marker(&dir, Stage::Rate, &hash, files)?;
            ran += 1;
        }
        Ok(self.outcome(Stage::Rate, ran))
    }

    fn sweep(&self) -> Result<StageOutcome> {
        let ing = self.load_ingested(Stage::Sweep)?;
        let mut ran = 0;
        for exp in self.experiments() {
            let name = exp.experiment();
            let edir = self.stage_dir(Stage::Ensemble).join(&name);
            let up = self.require(Stage::Sweep, Stage::Ensemble, &edir)?;
            let dir = self.stage_dir(Stage::Sweep).join(&name);
            let hash = hash_json(&(&up.hash, &self.cfg.rater, &self.cfg.sweep));
            if self.up_to_date(&dir, &hash) {
                continue;
            }
            let points = if self.cfg.sweep.enabled {
                let anns = self.annotations_at(&ing, exp.dim);
                let items = ing
                    .entries
                    .iter()
                    .map(|e| {
                        Ok(SweepItem {
                            image_id: e.image_id.clone(),
                            composite: read_png16(edir.join(format!("{}.png", e.image_id)))?,
                            gt: anns.get(&e.image_id).cloned(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                sweep(&items, &self.cfg.sweep.config, &self.cfg.rater)?
            } else {
                Vec::new()
            };
            write_atomic(&dir.join("roc.json"), &serde_json::to_vec_pretty(&points)?)?;
            write_roc_csv(&dir.join("roc.csv"), &points)?;
            self.write_marker(&dir, Stage::Sweep, &hash, vec!["roc.json".into(), "roc.csv".into()])?;
            ran += 1;
        }
        Ok(self.outcome(Stage::Sweep, ran))
    }

    fn report(&self) -> Result<StageOutcome> {
        let manifest = self.load_manifest(Stage::Report)?;
        let ing = self.load_ingested(Stage::Report)?;
        let dir = self.stage_dir(Stage::Report);
        let mut upstream = Vec::new();
        for exp in self.experiments() {
            let name = exp.experiment();
            upstream.push(self.require(Stage::Report, Stage::Rate, &self.stage_dir(Stage::Rate).join(&name))?.hash);
            upstream.push(self.require(Stage::Report, Stage::Sweep, &self.stage_dir(Stage::Sweep).join(&name))?.hash);
        }
        let hash = hash_json(&(&upstream, &self.cfg.report, &self.provenance));
        if self.up_to_date(&dir, &hash) {
            return Ok(Self::skipped(Stage::Report, "up to date"));
        }
        let mut files = Vec::new();
        let mut experiments = BTreeMap::new();
        for exp in self.experiments() {
            let name = exp.experiment();
            let rdir = self.stage_dir(Stage::Rate).join(&name);
            let results: Vec<RatingResult> = read_json(&rdir.join("ratings.json"))?;
            let roc: Vec<RocPoint> = read_json(&self.stage_dir(Stage::Sweep).join(&name).join("roc.json"))?;
            let anns: Vec<NoduleAnnotation> = self.annotations_at(&ing, exp.dim).into_values().collect();
            let (tables, overall) = stratified_tables(&results, &anns, &ing.plan, &self.cfg.report.stratifiers)?;
            let cells = self.experiment_cells(Stage::Report, &manifest, &exp)?;
            let summary = ExperimentSummary {
                experiment: name.clone(),
                aggregate: aggregate(&results)?,
                sensitivity_mean_over_folds: overall.mean,
                sensitivity_sd_over_folds: overall.sd,
                optimal_epochs: cells.iter().map(|c| c.optimal_epoch).collect(),
                cells: cells.iter().map(|c| c.key.id()).collect(),
                roc: roc.clone(),
            };
            let overlays: Vec<PathBuf> = if self.cfg.report.overlays {
                results.iter().map(|r| rdir.join(format!("overlays/{}.png", r.image_id))).collect()
            } else {
                Vec::new()
            };
            let edir = dir.join(&name);
            let written = emit(
                &edir,
                &self.provenance,
                &tables,
                &roc,
                &overlays,
                serde_json::to_value(&summary)?,
                &EmitOptions {
                    roc_svg: self.cfg.report.roc_svg,
                },
            )?;
            files.extend(written.iter().map(|p| rel(p, &dir)));
            experiments.insert(name, summary);
        }
        let top = RunSummary {
            schema_version: crate::report::SUMMARY_SCHEMA,
            provenance: self.provenance.clone(),
            images: ing.entries.len(),
            experiments,
            cells: manifest
                .cells
                .iter()
                .map(|(id, c)| {
                    (
                        id.clone(),
                        CellSummary {
                            input_hash: c.input_hash.clone(),
                            optimal_epoch: c.optimal_epoch,
                            test_images: c.split.test.len(),
                        },
                    )
                })
                .collect(),
        };
        let mut bytes = serde_json::to_vec_pretty(&top)?;
        bytes.push(b'\n');
        write_atomic(&dir.join("summary.json"), &bytes)?;
        files.push("summary.json".into());
        self.write_marker(&dir, Stage::Report, &hash, files)?;
        Ok(Self::done(Stage::Report, format!("summary at {}", dir.join("summary.json").display())))
    }
}

fn rel(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Pooled tables for each stratifier with the across-fold standard deviation
/// attached, plus the unstratified fold statistic.
pub fn stratified_tables(
    results: &[RatingResult],
    annotations: &[NoduleAnnotation],
    plan: &FoldPlan,
    stratifiers: &[Stratifier],
) -> Result<(Vec<StratifiedTable>, FoldStat)> {
    let mut by_fold: BTreeMap<usize, Vec<RatingResult>> = BTreeMap::new();
    for r in results {
        let fold = plan.fold_of(&r.image_id).unwrap_or(usize::MAX);
        by_fold.entry(fold).or_default().push(r.clone());
    }
    let fold_tables = |s: Stratifier| -> Result<Vec<StratifiedTable>> {
        by_fold.values().map(|rs| stratify(rs, annotations, s)).collect()
    };
    let mut tables = Vec::new();
    for &s in stratifiers {
        let mut t = stratify(results, annotations, s)?;
        if by_fold.len() >= 2 {
            t.attach_sd(&fold_statistics(&fold_tables(s)?)?);
        }
        tables.push(t);
    }
    let overall = if by_fold.len() >= 2 {
        fold_statistics(&fold_tables(Stratifier::None)?)?.remove(0)
    } else {
        let a = aggregate(results)?;
        FoldStat {
            label: "All".into(),
            folds: by_fold.len(),
            mean: a.sensitivity,
            sd: None,
        }
    };
    Ok((tables, overall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment: String,
    pub aggregate: Aggregate,
    pub sensitivity_mean_over_folds: f64,
    pub sensitivity_sd_over_folds: Option<f64>,
    pub optimal_epochs: Vec<usize>,
    pub cells: Vec<String>,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub input_hash: String,
    pub optimal_epoch: usize,
    pub test_images: usize,
}

/// Top-level `report/summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub images: usize,
    pub experiments: BTreeMap<String, ExperimentSummary>,
    pub cells: BTreeMap<String, CellSummary>,
}
