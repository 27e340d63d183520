use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxr-nodule"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("NODULE_DATA_ROOT")
        .env_remove("NODULE_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
seed = 1
output_root = "out"
folds = 2
variants = ["he-seg"]
depths = [5]
resolutions = [64]
base_filters = 2

[dataset]
name = "synthetic"
pixel_spacing_mm = 1.0
native_dim = 64

[dataset.synthetic]
count = 6
dim = 64

[train]
learning_rate = 0.001
max_epochs = 3

[sweep]
kernel_min = 3
kernel_max = 6
kernel_step = 3
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn validate_reports_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = cli(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("experiments: 1") && out.contains("training cells: 2"), "{out}");
    assert!(out.contains("6 positive images"), "{out}");
}

#[test]
fn validate_names_a_missing_image_dir() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("[dataset.synthetic]\ncount = 6\ndim = 64\n", "")
        .replace("native_dim = 64", "native_dim = 512\nimage_dir = \"absent-images\"\nannotations = \"n.csv\"\nlung_mask_dir = \"lungs\"")
        .replace("resolutions = [64]", "resolutions = [512]");
    let cfg = write_config(dir.path(), &text);
    let o = cli(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("absent-images"), "{}", stdout(&o));
}

#[test]
fn unknown_stage_and_bad_usage_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(cli(&["run", "--config", &cfg, "--stage", "polish"]).status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn downstream_stage_first_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = cli(&["run", "--config", &cfg, "--stage", "rate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("run the upstream stage first"));
}

#[test]
fn repeated_full_run_trains_nothing_and_keeps_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("elsewhere");
    let out_s = out.to_string_lossy().into_owned();
    let first = cli(&["run", "--config", &cfg, "--out", &out_s, "--devices", "1"]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(stdout(&first).contains("train: done (2 cells trained, 0 up to date)"), "{}", stdout(&first));
    let summary = out.join("report/summary.json");
    let before = std::fs::read(&summary).unwrap();
    let second = cli(&["run", "--config", &cfg, "--out", &out_s, "--stage", "all", "--resume"]);
    assert_eq!(second.status.code(), Some(0));
    let text = stdout(&second);
    assert!(text.contains("train: up to date (0 cells trained, 2 up to date)"), "{text}");
    assert_eq!(text.matches("up to date (").count(), 7, "{text}");
    assert_eq!(std::fs::read(&summary).unwrap(), before);
    let json = String::from_utf8(before).unwrap();
    assert!(json.contains("\"config_hash\"") && json.contains("\"code_version\""));
}

#[test]
fn external_test_without_section_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(cli(&["external-test", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn synth_output_validates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let o = cli(&["synth", "--out", &out.to_string_lossy(), "--count", "10", "--dim", "512"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = cli(&["validate", "--config", &out.join("experiment.toml").to_string_lossy()]);
    assert_eq!(v.status.code(), Some(0), "{}", stdout(&v));
    assert!(stdout(&v).contains("10 annotated, 10 positive images"), "{}", stdout(&v));
}

#[test]
fn param_dump_matches_the_calibrated_count() {
    let o = cli(&["param-dump", "--depth", "5"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("total 4718321"));
}
