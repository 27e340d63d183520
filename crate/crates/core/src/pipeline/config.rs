use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetSpec, SubtletyCategory};
use crate::ednet::{ModelSpec, NormMode};
use crate::fpsweep::SweepConfig;
use crate::preprocess::Variant;
use crate::rater::RaterConfig;
use crate::report::Stratifier;
use crate::synth::SynthConfig;
use crate::trainer::{CellKey, Grid, TrainConfig};
use crate::{Error, Result};

pub const ENV_DATA_ROOT: &str = "NODULE_DATA_ROOT";
pub const ENV_OUTPUT_ROOT: &str = "NODULE_OUTPUT_ROOT";

/// The training corpus. Either `synthetic` is set, or `image_dir` and
/// `annotations` point at real data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub spec: DatasetSpec,
    #[serde(default)]
    pub image_dir: Option<PathBuf>,
    /// Appended to annotation ids that do not name an existing file.
    #[serde(default)]
    pub image_extension: Option<String>,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    /// Directory of `{stem}.png` lung masks.
    #[serde(default)]
    pub lung_mask_dir: Option<PathBuf>,
    /// Drop images whose nodule centroid lies outside the lung field.
    #[serde(default = "yes")]
    pub in_lung_only: bool,
    #[serde(default)]
    pub category: SubtletyCategory,
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
}

fn yes() -> bool {
    true
}

/// External test set given as bounding boxes plus a curation list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    #[serde(flatten)]
    pub spec: DatasetSpec,
    pub image_dir: PathBuf,
    pub bbox_file: PathBuf,
    pub curation_list: PathBuf,
    pub lung_mask_dir: PathBuf,
    /// Trained experiment to evaluate.
    pub depth: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub stratifiers: Vec<Stratifier>,
    pub overlays: bool,
    pub roc_svg: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            stratifiers: Stratifier::ALL.to_vec(),
            overlays: false,
            roc_svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub config: SweepConfig,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            enabled: true,
            config: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_root: PathBuf,
    #[serde(default = "ten")]
    pub folds: usize,
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "standard_depths")]
    pub depths: Vec<usize>,
    #[serde(default = "standard_dims")]
    pub resolutions: Vec<usize>,
    #[serde(default)]
    pub norm_mode: NormMode,
    /// Filters of the first level; `None` is the full-size ladder starting at 16.
    #[serde(default)]
    pub base_filters: Option<usize>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub external: Option<ExternalConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub rater: RaterConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub report: ReportConfig,
}

fn ten() -> usize {
    10
}
fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn standard_depths() -> Vec<usize> {
    vec![5, 6, 7]
}
fn standard_dims() -> Vec<usize> {
    vec![512, 1024, 2048]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves relative paths: data paths against
    /// `NODULE_DATA_ROOT` (or the file's directory), the output root against
    /// `NODULE_OUTPUT_ROOT` when set (or the file's directory).
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let data_root = std::env::var_os(ENV_DATA_ROOT).map(PathBuf::from).unwrap_or_else(|| base.clone());
        cfg.resolve_paths(&data_root);
        if let Some(out) = std::env::var_os(ENV_OUTPUT_ROOT) {
            cfg.output_root = PathBuf::from(out);
        } else if cfg.output_root.is_relative() {
            cfg.output_root = base.join(&cfg.output_root);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, data_root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = data_root.join(&*p);
            }
        };
        let d = &mut self.dataset;
        for p in [&mut d.image_dir, &mut d.annotations, &mut d.lung_mask_dir].into_iter().flatten() {
            fix(p);
        }
        if let Some(e) = &mut self.external {
            for p in [&mut e.image_dir, &mut e.bbox_file, &mut e.curation_list, &mut e.lung_mask_dir] {
                fix(p);
            }
        }
    }

    /// Training settings with the top-level seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn grid(&self) -> Grid {
        Grid {
            depths: self.depths.clone(),
            dims: self.resolutions.clone(),
            variants: self.variants.clone(),
            folds: (0..self.folds).collect(),
        }
    }

    pub fn model_spec(&self, depth: usize, dim: usize) -> ModelSpec {
        match self.base_filters {
            Some(b) => ModelSpec::scaled(depth, b, self.norm_mode, dim),
            None => ModelSpec::standard(depth, self.norm_mode, dim),
        }
    }

    pub fn spec_for(&self, key: &CellKey) -> ModelSpec {
        self.model_spec(key.depth, key.dim)
    }

    /// Structural checks that need no file access.
    pub fn check_schema(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, empty) in [
            ("variants", self.variants.is_empty()),
            ("depths", self.depths.is_empty()),
            ("resolutions", self.resolutions.is_empty()),
        ] {
            if empty {
                problems.push(format!("grid axis `{name}` is empty"));
            }
        }
        if self.folds < 2 {
            problems.push(format!("folds = {} (need at least 2)", self.folds));
        }
        for &depth in &self.depths {
            for &dim in &self.resolutions {
                if let Err(e) = self.model_spec(depth, dim).validate() {
                    problems.push(e.to_string());
                }
            }
        }
        let results = [
            match &self.dataset.synthetic {
                None => self.dataset.spec.validate(),
                Some(_) => Ok(()),
            },
            self.train.validate(),
            self.rater.validate(),
            self.sweep.config.validate(),
        ];
        problems.extend(results.into_iter().filter_map(|r| r.err()).map(|e| e.to_string()));
        let d = &self.dataset;
        if d.synthetic.is_none() {
            if d.image_dir.is_none() {
                problems.push("dataset.image_dir is required unless dataset.synthetic is set".into());
            }
            if d.annotations.is_none() {
                problems.push("dataset.annotations is required unless dataset.synthetic is set".into());
            }
            let needs_masks = d.in_lung_only || self.variants.iter().any(|v| v.segment_lung());
            if needs_masks && d.lung_mask_dir.is_none() {
                problems.push("dataset.lung_mask_dir is required for in-lung filtering and -seg variants".into());
            }
        }
        if let Some(s) = &d.synthetic {
            if s.dim != d.spec.native_dim {
                problems.push(format!(
                    "synthetic dim {} differs from dataset native_dim {}",
                    s.dim, d.spec.native_dim
                ));
            }
            if s.count < self.folds {
                problems.push(format!("synthetic count {} < folds {}", s.count, self.folds));
            }
        }
        if let Some(e) = &self.external {
            if let Err(err) = e.spec.validate() {
                problems.push(err.to_string());
            }
            if !self.depths.contains(&e.depth) || !self.resolutions.contains(&e.resolution) {
                problems.push(format!(
                    "external test names ed{}_{}, which is not in the training grid",
                    e.depth, e.resolution
                ));
            }
            if !self.variants.contains(&Variant::HeSeg) {
                problems.push("external tests use he-seg models, but `he-seg` is not a trained variant".into());
            }
        }
        problems
    }

    /// Referenced paths that do not exist.
    pub fn missing_paths(&self) -> Vec<PathBuf> {
        let d = &self.dataset;
        let mut paths: Vec<&PathBuf> = Vec::new();
        if d.synthetic.is_none() {
            paths.extend([&d.image_dir, &d.annotations, &d.lung_mask_dir].into_iter().flatten());
        }
        if let Some(e) = &self.external {
            paths.extend([&e.image_dir, &e.bbox_file, &e.curation_list, &e.lung_mask_dir]);
        }
        paths.into_iter().filter(|p| !p.exists()).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_root = "out"

[dataset]
name = "jsrt"
pixel_spacing_mm = 0.175
native_dim = 2048
size_units = "mm"
image_dir = "images"
annotations = "nodules.csv"
lung_mask_dir = "masks"
"#;

    #[test]
    fn defaults_give_the_full_grid() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.grid().experiment_count(), 36);
        assert_eq!(cfg.grid().cells().len(), 360);
        assert_eq!(cfg.dataset.spec, DatasetSpec::jsrt());
        assert!(cfg.check_schema().is_empty(), "{:?}", cfg.check_schema());
    }

    #[test]
    fn empty_axis_and_unknown_keys_are_reported() {
        let cfg = ExperimentConfig::from_toml(&format!("depths = []\n{MINIMAL}")).unwrap();
        assert!(cfg.check_schema().iter().any(|p| p.contains("depths")));
        assert!(ExperimentConfig::from_toml(&format!("colour = 1\n{MINIMAL}")).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_data_root() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/data"));
        assert_eq!(cfg.dataset.image_dir.as_deref(), Some(Path::new("/data/images")));
        assert_eq!(cfg.missing_paths().len(), 3);
    }
}
