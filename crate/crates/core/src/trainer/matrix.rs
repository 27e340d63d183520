use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{train_fold, EpochMetrics, FoldSplit, Sample, TrainConfig};
use crate::dataio::FoldPlan;
use crate::ednet::ModelSpec;
use crate::preprocess::Variant;
use crate::provenance::{hash_json, write_atomic, Hasher};
use crate::{Error, Result};

pub const MANIFEST_SCHEMA: u32 = 1;

/// One training cell of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub depth: usize,
    pub dim: usize,
    pub variant: Variant,
    pub fold: usize,
}

impl CellKey {
    /// Experiment directory name shared by all folds, e.g. `ed6_2048_he-seg`.
    pub fn experiment(&self) -> String {
        format!("ed{}_{}_{}", self.depth, self.dim, self.variant)
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.experiment(), self.fold)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    pub variants: Vec<Variant>,
    pub folds: Vec<usize>,
}

impl Grid {
    /// Cells ordered by resolution, variant, depth, then fold, so each
    /// preprocessed dataset is needed for one contiguous stretch.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &dim in &self.dims {
            for &variant in &self.variants {
                for &depth in &self.depths {
                    for &fold in &self.folds {
                        out.push(CellKey {
                            depth,
                            dim,
                            variant,
                            fold,
                        });
                    }
                }
            }
        }
        out
    }

    /// Number of distinct (depth, resolution, variant) experiments.
    pub fn experiment_count(&self) -> usize {
        self.depths.len() * self.dims.len() * self.variants.len()
    }
}

/// Preprocessed samples for one (resolution, variant) pair with a content
/// fingerprint used for resume checks.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub fingerprint: String,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        let mut sorted: Vec<&Sample> = samples.iter().collect();
        sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut h = Hasher::new();
        for s in sorted {
            h.update_str(&s.image_id);
            let px: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
            h.update(&px);
            let m: Vec<u8> = s.target.iter().map(|&b| b as u8).collect();
            h.update(&m);
        }
        let fingerprint = h.finish();
        Dataset { samples, fingerprint }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: CellKey,
    pub input_hash: String,
    pub seed: u64,
    pub model_seed: u64,
    pub spec: ModelSpec,
    /// Checkpoint paths relative to the training root, in epoch order.
    pub checkpoints: Vec<String>,
    pub metrics: Vec<EpochMetrics>,
    pub optimal_epoch: usize,
    pub split: FoldSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub cells: BTreeMap<String, CellRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            schema_version: MANIFEST_SCHEMA,
            cells: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_slice(&bytes)?;
        if m.schema_version != MANIFEST_SCHEMA {
            return Err(Error::Config(format!(
                "{}: manifest schema {} (expected {MANIFEST_SCHEMA})",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn load_or_default(path: &Path) -> Result<Manifest> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Manifest::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    /// Absolute checkpoint path of `epoch` for a cell.
    pub fn checkpoint(&self, root: &Path, cell: &str, epoch: usize) -> Option<PathBuf> {
        let rec = self.cells.get(cell)?;
        rec.checkpoints.get(epoch.checked_sub(1)?).map(|p| root.join(p))
    }
}

#[derive(Debug, Clone)]
pub struct MatrixReport {
    pub manifest: Manifest,
    pub trained: Vec<String>,
    pub skipped: Vec<String>,
}

fn cell_hash(spec: &ModelSpec, cfg: &TrainConfig, plan: &FoldPlan, key: &CellKey, data: &str) -> String {
    let mut h = Hasher::new();
    h.update_str(&hash_json(spec))
        .update_str(&hash_json(cfg))
        .update_str(&hash_json(plan))
        .update_str(&hash_json(key))
        .update_str(data);
    h.finish()
}

fn is_complete(rec: &CellRecord, root: &Path, hash: &str) -> bool {
    rec.input_hash == hash && rec.checkpoints.iter().all(|p| root.join(p).is_file())
}

/// Trains every cell of `grid`, skipping cells whose manifest entry has the
/// same input hash and intact checkpoints when `resume` is set. The manifest
/// is rewritten after each cell. Cell failures are collected and reported
/// together once the remaining cells have run.
pub fn run_matrix(
    grid: &Grid,
    spec_for: impl Fn(&CellKey) -> ModelSpec,
    mut data: impl FnMut(usize, Variant) -> Result<std::sync::Arc<Dataset>>,
    plan: &FoldPlan,
    cfg: &TrainConfig,
    root: &Path,
    resume: bool,
) -> Result<MatrixReport> {
    cfg.validate()?;
    let manifest_path = root.join("manifest.json");
    let mut manifest = if resume {
        Manifest::load_or_default(&manifest_path)?
    } else {
        Manifest::default()
    };
    let mut trained = Vec::new();
    let mut skipped = Vec::new();
    let mut failures = Vec::new();
    let mut current: Option<((usize, Variant), std::sync::Arc<Dataset>)> = None;

    for key in grid.cells() {
        let id = key.id();
        let spec = spec_for(&key);
        let slot = (key.dim, key.variant);
        let dataset = match &current {
            Some((s, d)) if *s == slot => d.clone(),
            _ => match data(key.dim, key.variant) {
                Ok(d) => {
                    current = Some((slot, d.clone()));
                    d
                }
                Err(e) => {
                    failures.push((id, e.to_string()));
                    continue;
                }
            },
        };
        let hash = cell_hash(&spec, cfg, plan, &key, &dataset.fingerprint);
        if resume && manifest.cells.get(&id).is_some_and(|r| is_complete(r, root, &hash)) {
            log::info!("{id}: up to date, skipping");
            skipped.push(id);
            continue;
        }
        log::info!("{id}: training");
        match train_fold(&spec, &dataset.samples, plan, key.fold, cfg, root, &key.experiment()) {
            Ok(run) => {
                let rel = |p: &PathBuf| {
                    p.strip_prefix(root)
                        .unwrap_or(p)
                        .to_string_lossy()
                        .replace('\\', "/")
                };
                manifest.cells.insert(
                    id.clone(),
                    CellRecord {
                        key,
                        input_hash: hash,
                        seed: cfg.seed,
                        model_seed: run.model_seed,
                        spec,
                        checkpoints: run.checkpoints.iter().map(rel).collect(),
                        metrics: run.metrics,
                        optimal_epoch: run.optimal_epoch,
                        split: run.split,
                    },
                );
                manifest.save(&manifest_path)?;
                trained.push(id);
            }
            Err(e) => {
                log::error!("{id}: {e}");
                failures.push((id, e.to_string()));
            }
        }
    }
    manifest.save(&manifest_path)?;
    if !failures.is_empty() {
        return Err(Error::PartialFailure(failures));
    }
    Ok(MatrixReport {
        manifest,
        trained,
        skipped,
    })
}
