//! `cxr-nodule`: validate an experiment config, run pipeline stages, test
//! trained models on an external set, and a few utilities.
//!
//! Exit codes: 0 success, 1 validation error, 2 stage dependency error,
//! 3 runtime failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use cxr_nodule::dataio::Image;
use cxr_nodule::ednet::{
    param_dump, predict, EdNet, ModelSpec, NormMode,
};
use cxr_nodule::pipeline::{external_test, validate, ExperimentConfig, Pipeline, Stage};
use cxr_nodule::synth::{write_corpus, SynthConfig};
use cxr_nodule::Error;

#[derive(Parser)]
#[command(name = "cxr-nodule", version, about = "Lung-nodule localization experiments on chest radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output root (takes precedence over NODULE_OUTPUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for inference, rating and sweeps; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    devices: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config: resolved grid, dataset counts, schema problems.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one stage, or `all`, skipping work whose inputs are unchanged.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// ingest, preprocess, train, ensemble, rate, sweep, report or all.
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long, overrides_with = "no_resume")]
        resume: bool,
        /// Redo every stage and retrain every cell.
        #[arg(long)]
        no_resume: bool,
    },
    /// Evaluate trained he-seg models on the `[external]` dataset.
    ExternalTest {
        #[command(flatten)]
        args: RunArgs,
        /// Training manifest; defaults to `{output_root}/train/manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write a synthetic corpus (images, lung masks, nodules.csv) and a
    /// matching experiment config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-layer trainable parameter counts.
    ParamDump {
        #[arg(long, value_delimiter = ',', default_values_t = [5usize, 6, 7])]
        depth: Vec<usize>,
        #[arg(long, default_value_t = 2048)]
        dim: usize,
    },
    /// Wall-clock inference time per image with random weights.
    Bench {
        #[arg(long, default_value_t = 5)]
        depth: usize,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        /// First-level filters; the full-size model uses 16.
        #[arg(long, default_value_t = 16)]
        base: usize,
        #[arg(long, default_value_t = 3)]
        images: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::StageDependency { .. } => 2,
        Error::Config(_)
        | Error::SchemaError(_)
        | Error::SpecError(_)
        | Error::SpecMismatch { .. }
        | Error::CurationListMissing(_)
        | Error::DuplicateId(_)
        | Error::RangeError { .. }
        | Error::LabelError { .. } => 1,
        _ => 3,
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_root = out.clone();
    }
    cxr_nodule::parallel::set_max_threads(args.devices);
    Ok(cfg)
}

fn synth_config_toml(dim: usize, count: usize) -> String {
    format!(
        r#"# Synthetic corpus written by `cxr-nodule synth`.
seed = 0
output_root = "out"
folds = 10
variants = ["raw", "he", "seg", "he-seg"]
depths = [5]
resolutions = [{dim}]
base_filters = 4

[dataset]
name = "synthetic"
pixel_spacing_mm = 1.0
native_dim = {dim}
size_units = "px"
raw_format = {{ container = "png", bit_depth = 16, byte_order = "big", intensity_inverted = false }}
image_dir = "images"
image_extension = "png"
annotations = "nodules.csv"
lung_mask_dir = "lungs"

[train]
learning_rate = 0.001
max_epochs = 12
batch_size = 4

[sweep]
kernel_min = 3
kernel_max = 30
kernel_step = 3

# {count} images
"#
    )
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = validate(&cfg);
            print!("{report}");
            if !report.is_valid() {
                return Err(Error::Config(format!("{} problems", report.problems.len())));
            }
        }
        Command::Run {
            args,
            stage,
            resume: _,
            no_resume,
        } => {
            let cfg = load_config(&args)?;
            let stages = Stage::parse_selector(&stage)?;
            let pipeline = Pipeline::new(cfg, !no_resume)?;
            for s in stages {
                let outcome = pipeline.run_stage(s)?;
                let state = if outcome.skipped { "up to date" } else { "done" };
                println!("{s}: {state} ({})", outcome.message);
            }
        }
        Command::ExternalTest { args, manifest } => {
            let cfg = load_config(&args)?;
            let pipeline = Pipeline::new(cfg, true)?;
            let r = external_test(&pipeline, manifest.as_deref())?;
            println!(
                "{} on {}: sensitivity {:.1}% at {:.2} FP/image over {} images ({} folds){}",
                r.experiment,
                r.dataset,
                r.aggregate.sensitivity,
                r.aggregate.fp_per_image,
                r.aggregate.n,
                r.folds,
                if r.interpolated_input { ", interpolated input" } else { "" }
            );
            println!("written to {}", r.out_dir.display());
        }
        Command::Synth { out, count, dim, seed } => {
            let cfg = SynthConfig {
                count,
                dim,
                seed,
                ..Default::default()
            };
            write_corpus(&out, &cfg)?;
            let path = out.join("experiment.toml");
            std::fs::write(&path, synth_config_toml(dim, count)).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            println!("{count} images at {dim}² in {}; config {}", out.display(), path.display());
        }
        Command::ParamDump { depth, dim } => {
            let text = param_dump(&depth, dim)?;
            // A closed pipe (`| head`) is not an error worth reporting.
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
        Command::Bench { depth, dim, base, images } => {
            let spec = ModelSpec::scaled(depth, base, NormMode::Instance, dim);
            let net = EdNet::<f32>::build(&spec, 0)?;
            let img = Image::from_shape_fn((dim, dim), |(y, x)| ((x ^ y) % 17) as f32 / 17.0);
            predict(&net, &img)?;
            let t = Instant::now();
            for _ in 0..images {
                predict(&net, &img)?;
            }
            let per = t.elapsed().as_secs_f64() * 1000.0 / images.max(1) as f64;
            println!(
                "{} ({} parameters) at {dim}²: {per:.1} ms per image (hardware-dependent, not a contract)",
                spec.name(),
                net.count_parameters()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
