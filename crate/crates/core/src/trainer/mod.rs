//! Cross-validated training with per-epoch checkpoints, validation-based
//! epoch selection and the experiment-matrix runner.

mod loss;
mod matrix;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{loss_and_grad, loss_value, pixel_accuracy, LossKind};
pub use matrix::{run_matrix, CellKey, CellRecord, Dataset, Grid, Manifest, MatrixReport, MANIFEST_SCHEMA};

use crate::dataio::{FoldPlan, Image, Mask};
use crate::ednet::{checkpoint_path, save_checkpoint, EdNet, ModelSpec, Optimizer, OptimizerKind, Tensor};
use crate::provenance::{mix_seed, write_atomic};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// `None` picks by resolution: 2 at 2048², 4 at 1024², 8 below.
    pub batch_size: Option<usize>,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            max_epochs: 25,
            batch_size: None,
            loss: LossKind::Bce,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.max_epochs < 3 {
            return err(format!("max_epochs {} < 3; the ensemble needs three epochs", self.max_epochs));
        }
        if self.batch_size == Some(0) {
            return err("batch_size must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return err(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        Ok(())
    }

    pub fn batch_size_for(&self, dim: usize) -> usize {
        self.batch_size.unwrap_or(match dim {
            d if d >= 2048 => 2,
            d if d >= 1024 => 4,
            _ => 8,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Picks the centre `n` of the ensemble triple: the epoch whose centred
/// three-epoch mean validation loss is lowest (the first and last epochs
/// average over two), clamped to `[2, max − 1]`. Ties go to the earlier epoch.
pub fn select_optimal_epoch(metrics: &[EpochMetrics]) -> Result<usize> {
    let n = metrics.len();
    if n < 3 {
        return Err(Error::InsufficientHistory(n));
    }
    let mut sorted = metrics.to_vec();
    sorted.sort_by_key(|m| m.epoch);
    let v: Vec<f64> = sorted.iter().map(|m| m.val_loss).collect();
    let mut best = (f64::INFINITY, 0);
    for i in 0..n {
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(n - 1);
        let avg = v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
        if avg < best.0 {
            best = (avg, i);
        }
    }
    let epoch = sorted[best.1].epoch;
    let first = sorted[0].epoch;
    let last = sorted[n - 1].epoch;
    Ok(epoch.clamp(first + 1, last - 1))
}

/// One training image and its nodule target at training resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub image: Image,
    pub target: Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl FoldSplit {
    /// True when no id is shared between the three parts.
    pub fn is_disjoint(&self) -> bool {
        let test: BTreeSet<&String> = self.test.iter().collect();
        let val: BTreeSet<&String> = self.val.iter().collect();
        self.train.iter().all(|id| !test.contains(id) && !val.contains(id))
            && self.val.iter().all(|id| !test.contains(id))
    }
}

/// Test fold from the plan; the validation carve-out is a seeded sample of
/// the remaining folds.
pub fn split_fold(plan: &FoldPlan, fold: usize, val_fraction: f64, seed: u64) -> Result<FoldSplit> {
    if fold >= plan.k {
        return Err(Error::Config(format!("fold {fold} outside 0..{}", plan.k)));
    }
    let test = plan.test_ids(fold);
    let mut rest = plan.train_ids(fold);
    if rest.len() < 2 {
        return Err(Error::Config(format!(
            "fold {fold}: {} training ids leave no room for validation",
            rest.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, fold as u64));
    rest.shuffle(&mut rng);
    let n_val = ((rest.len() as f64 * val_fraction).round() as usize).clamp(1, rest.len() - 1);
    let mut val = rest.split_off(rest.len() - n_val);
    rest.sort();
    val.sort();
    Ok(FoldSplit { train: rest, val, test })
}

/// Result of one training cell.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<EpochMetrics>,
    pub optimal_epoch: usize,
    pub split: FoldSplit,
    pub model_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FoldSidecar {
    spec: ModelSpec,
    seed: u64,
    model_seed: u64,
    config: TrainConfig,
    metrics: Vec<EpochMetrics>,
    optimal_epoch: usize,
    split: FoldSplit,
}

fn batch_tensors(samples: &[&Sample]) -> (Tensor<f32>, Tensor<f32>) {
    let (h, w) = samples[0].image.dim();
    let mut x = Vec::with_capacity(samples.len() * h * w);
    let mut t = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        x.extend(s.image.iter().copied());
        t.extend(s.target.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
    }
    (
        Tensor::from_vec(samples.len(), 1, h, w, x),
        Tensor::from_vec(samples.len(), 1, h, w, t),
    )
}

fn evaluate(model: &EdNet<f32>, samples: &[&Sample], batch: usize, loss: LossKind) -> Result<(f64, f64)> {
    let (mut l, mut a) = (0.0, 0.0);
    for chunk in samples.chunks(batch) {
        let (x, t) = batch_tensors(chunk);
        let z = model.forward_logits(&x)?;
        l += loss_value(loss, &z, &t) * chunk.len() as f64;
        a += pixel_accuracy(&z, &t) * chunk.len() as f64;
    }
    let n = samples.len() as f64;
    Ok((l / n, a / n))
}

fn lookup<'a>(samples: &'a [Sample], ids: &[String]) -> Result<Vec<&'a Sample>> {
    let by_id: std::collections::HashMap<&str, &Sample> =
        samples.iter().map(|s| (s.image_id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Config(format!("fold plan names {id}, which has no sample")))
        })
        .collect()
}

/// Trains one cross-validation cell and writes `max_epochs` checkpoints
/// under `{root}/{experiment}/{fold}/` plus a `manifest.json` sidecar and a
/// `metrics.csv`.
pub fn train_fold(
    spec: &ModelSpec,
    samples: &[Sample],
    plan: &FoldPlan,
    fold: usize,
    cfg: &TrainConfig,
    root: &Path,
    experiment: &str,
) -> Result<FoldRun> {
    cfg.validate()?;
    spec.validate()?;
    let split = split_fold(plan, fold, cfg.val_fraction, cfg.seed)?;
    if !split.is_disjoint() {
        return Err(Error::Config(format!("fold {fold}: training and test ids overlap")));
    }
    let train = lookup(samples, &split.train)?;
    let val = lookup(samples, &split.val)?;
    if let Some(s) = train.iter().chain(&val).find(|s| s.image.dim() != (spec.input_dim, spec.input_dim)) {
        return Err(Error::ShapeError(format!(
            "{} is {:?}, model expects {}²",
            s.image_id,
            s.image.dim(),
            spec.input_dim
        )));
    }
    let model_seed = mix_seed(cfg.seed, fold as u64);
    let mut model = EdNet::<f32>::build(spec, model_seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let batch = cfg.batch_size_for(spec.input_dim);
    let mut metrics = Vec::with_capacity(cfg.max_epochs);
    let mut checkpoints = Vec::with_capacity(cfg.max_epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(model_seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut tl, mut ta) = (0.0, 0.0);
        for (bi, idx) in order.chunks(batch).enumerate() {
            let chunk: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let (x, t) = batch_tensors(&chunk);
            let z = model.forward_train(&x)?;
            let (loss, grad) = loss_and_grad(cfg.loss, &z, &t);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    value: loss,
                });
            }
            tl += loss * chunk.len() as f64;
            ta += pixel_accuracy(&z, &t) * chunk.len() as f64;
            model.backward(&grad);
            opt.step(&mut model);
        }
        let n = train.len() as f64;
        let (vl, va) = evaluate(&model, &val, batch, cfg.loss)?;
        let m = EpochMetrics {
            epoch,
            train_loss: tl / n,
            val_loss: vl,
            train_acc: ta / n,
            val_acc: va,
        };
        log::info!(
            "{experiment}/{fold} epoch {epoch}: train {:.5} val {:.5} acc {:.4}/{:.4}",
            m.train_loss,
            m.val_loss,
            m.train_acc,
            m.val_acc
        );
        metrics.push(m);
        let path = checkpoint_path(root, experiment, fold, epoch);
        save_checkpoint(&model, epoch, &path)?;
        checkpoints.push(path);
    }

    let optimal_epoch = select_optimal_epoch(&metrics)?;
    let dir = root.join(experiment).join(fold.to_string());
    let sidecar = FoldSidecar {
        spec: spec.clone(),
        seed: cfg.seed,
        model_seed,
        config: cfg.clone(),
        metrics: metrics.clone(),
        optimal_epoch,
        split: split.clone(),
    };
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&sidecar)?)?;
    write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    Ok(FoldRun {
        checkpoints,
        metrics,
        optimal_epoch,
        split,
        model_seed,
    })
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss", "train_acc", "val_acc"])?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.val_loss.to_string(),
            m.train_acc.to_string(),
            m.val_acc.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}
