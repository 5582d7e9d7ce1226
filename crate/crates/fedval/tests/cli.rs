//! End-to-end tests of the `fedval` binary: config parsing, output files,
//! sweep corruption accounting, and error exit codes.

use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn fedval() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedval"))
}

fn smoke_config(out_dir: &Path) -> String {
    format!(
        r#"
schemes = ["fedavg", "dvw_gmean"]
output_dir = "{}"

[dataset]
kind = "synthetic"
n = 600
num_features = 6
num_classes = 3
class_separation = 3.0
test_examples = 300

[partition]
kind = "uniform"

[attack]
kind = "uniform_shuffle"
corrupted_learner_ids = [0]

[baselines]
no_corruption = true
exclusion = true

[federation]
n_learners = 3
rounds = 2
local_epochs = 1
batch_size = 32
learning_rate = 0.05
validation_fraction = 0.1
master_seed = 7
"#,
        out_dir.display()
    )
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, smoke_config(&out)).unwrap();

    let result = fedval().arg("run").arg(&config).output().unwrap();
    assert!(result.status.success(), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8(result.stdout).unwrap();
    for label in ["fedavg:", "dvw_gmean:", "fedavg_no_corruption:", "fedavg_exclusion:"] {
        assert!(stdout.contains(label), "missing {label} in:\n{stdout}");
    }
    for file in ["rounds.csv", "weights.csv", "per_class.csv", "manifest.json"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let rounds = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert!(rounds.starts_with("round,scheme,test_accuracy\n"));

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["master_seed"], 7);
    assert_eq!(manifest["corruption"]["total_ratio"].as_f64().unwrap(), 1.0 / 3.0);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, smoke_config(&out)).unwrap();

    let result = fedval().arg("run").arg(&config).arg("--seed").arg("99").output().unwrap();
    assert!(result.status.success());
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["master_seed"], 99);
}

fn sweep_config(out_dir: &Path, partition: &str, n: usize, learners: usize) -> String {
    format!(
        r#"
schemes = ["fedavg"]
output_dir = "{}"

[dataset]
kind = "synthetic"
n = {n}
num_features = 4
num_classes = 10
class_separation = 3.0
test_examples = 500

{partition}

[attack]
kind = "uniform_shuffle"

[federation]
n_learners = {learners}
rounds = 1
local_epochs = 1
master_seed = 3
"#,
        out_dir.display()
    )
}

fn sweep_totals(config_text: &str, dir: &Path, counts: &str) -> Vec<f64> {
    let config = dir.join("sweep.toml");
    std::fs::write(&config, config_text).unwrap();
    let result =
        fedval().arg("sweep").arg(&config).arg("--corrupted").arg(counts).output().unwrap();
    assert!(result.status.success(), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    counts
        .split(',')
        .map(|m| {
            let path = dir.join("out").join(format!("corrupted_{m}")).join("manifest.json");
            let manifest: Value =
                serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
            manifest["corruption"]["total_ratio"].as_f64().unwrap()
        })
        .collect()
}

#[test]
fn uniform_sweep_reports_exact_corruption_totals() {
    let dir = tempfile::tempdir().unwrap();
    let text = sweep_config(&dir.path().join("out"), "[partition]\nkind = \"uniform\"", 5000, 10);
    let totals = sweep_totals(&text, dir.path(), "1,3,5,6,8");
    assert_eq!(totals, vec![0.1, 0.3, 0.5, 0.6, 0.8]);
}

#[test]
fn powerlaw_sweep_matches_reference_totals_within_a_point() {
    let dir = tempfile::tempdir().unwrap();
    let partition = "[partition]\n\
                     kind = \"explicit\"\n\
                     counts = [16964, 11314, 7537, 5023, 3348, 2232, 1488, 992, 661, 441]";
    let text = sweep_config(&dir.path().join("out"), partition, 50_000, 10);
    let totals = sweep_totals(&text, dir.path(), "1,3,5");
    for (total, expected) in totals.iter().zip([0.33, 0.71, 0.88]) {
        assert!((total - expected).abs() <= 0.01, "total {total} vs {expected}");
    }
}

#[test]
fn sweep_of_zero_corrupted_learners_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let text = sweep_config(&dir.path().join("out"), "[partition]\nkind = \"uniform\"", 600, 3);
    let totals = sweep_totals(&text, dir.path(), "0");
    assert_eq!(totals, vec![0.0]);
}

#[test]
fn bad_configs_exit_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");

    std::fs::write(&config, "unknown_key = 1\n").unwrap();
    let result = fedval().arg("run").arg(&config).output().unwrap();
    assert_eq!(result.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&result.stderr).contains("error:"));

    let result = fedval().arg("run").arg(dir.path().join("missing.toml")).output().unwrap();
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn serve_learner_rejects_out_of_range_ids() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("exp.toml");
    // distributed mode requires exactly one scheme
    let text = smoke_config(&out)
        .replace("schemes = [\"fedavg\", \"dvw_gmean\"]", "schemes = [\"dvw_gmean\"]");
    std::fs::write(&config, text).unwrap();
    let result = fedval()
        .arg("serve-learner")
        .arg("--config")
        .arg(&config)
        .arg("--listen")
        .arg("127.0.0.1:0")
        .arg("--learner-id")
        .arg("9")
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn shipped_example_configs_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(configs).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            fedval::experiment::ExperimentSpec::from_file(&path)
                .unwrap_or_else(|e| panic!("{} does not parse: {e}", path.display()));
            seen += 1;
        }
    }
    assert_eq!(seen, 3);
}
