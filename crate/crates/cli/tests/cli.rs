use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SYNTH: &str = r#"
name = "cli-smoke"

[data]
target = { dir = "data/t" }
sources = [{ dir = "data/s" }]

[pipeline]
normalize = true
seeds = [0]

[pipeline.imputer]
window = { window_samples = 1, stride_samples = 1 }
net = { hidden = [8] }
train = { learning_rate = 0.01, epochs = 3 }

[pipeline.detector]
window = { window_samples = 4, stride_samples = 4 }
net = { hidden = [8] }
train = { learning_rate = 0.01, epochs = 5 }

[synth]
labels = 2
subjects = 4
block_length = 200
persistence = 0.95
rate = 32.0
seed = 7

[[synth.channels]]
name = "HR"
modality = "HR"
noise_std = 1.0
response = { kind = "affine", offset = 0.0, gain = 1.0 }

[[synth.channels]]
name = "EEG"
modality = "EEG"
noise_std = 1.0
response = { kind = "affine", offset = 0.0, gain = 1.0 }

[synth.target]
domain_id = "t"
channels = ["HR"]

[[synth.sources]]
domain_id = "s"
channels = ["HR", "EEG"]
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fatigue-fusion"))
        .current_dir(dir)
        .args(args)
        .env("FATIGUE_FUSION_LOG", "off")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A temp dir holding `exp.toml` and the synthetic datasets under `data/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), SYNTH).unwrap();
    let out = run(dir.path(), &["--config", "exp.toml", "--out", "data", "synth"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    dir
}

fn body(path: &Path) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["body"].clone()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["validate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--config"), "{}", stderr(&out));
}

#[test]
fn validate_accepts_well_formed_data() {
    let dir = workspace();
    let out = run(dir.path(), &["--config", "exp.toml", "--out", "v", "validate"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = body(&dir.path().join("v/validation.json"));
    let domains = report.as_array().unwrap();
    assert_eq!(domains.len(), 2);
    for d in domains {
        assert_eq!(d["violations"], serde_json::json!([]));
    }
    assert!(dir.path().join("v/manifest.json").is_file());
}

#[test]
fn header_mismatch_fails_with_a_diagnostic() {
    let dir = workspace();
    let csv = dir.path().join("data/t/block_0000.csv");
    let text = fs::read_to_string(&csv).unwrap().replacen("HR", "PULSE", 1);
    fs::write(&csv, text).unwrap();
    let out = run(dir.path(), &["--config", "exp.toml", "--out", "v", "validate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("block_0000.csv"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = workspace();
    fs::write(dir.path().join("bad.toml"), SYNTH.replace("seed = 7", "seed = 7\nwindow_size = 3")).unwrap();
    let out = run(dir.path(), &["--config", "bad.toml", "--out", "v", "validate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("window_size"), "{}", stderr(&out));
}

#[test]
fn split_is_byte_reproducible() {
    let dir = workspace();
    for out_dir in ["a", "b"] {
        let out = run(dir.path(), &["--config", "exp.toml", "--out", out_dir, "split"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for file in ["manifest.json", "split/manifest.json", "split/test/block_0002.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn train_then_eval_agree() {
    let dir = workspace();
    let out = run(dir.path(), &["--config", "exp.toml", "--out", "r", "--seed", "3", "train"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let manifest = || -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/manifest.json")).unwrap()).unwrap()
    };
    assert_eq!(manifest()["command"], "train");
    assert_eq!(manifest()["seeds"], serde_json::json!([3, 3]));
    let out = run(dir.path(), &["--config", "exp.toml", "--out", "r", "eval"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let train = body(&dir.path().join("r/train_report.json"));
    let eval = body(&dir.path().join("r/metrics.json"));
    assert_eq!(train["metrics"]["accuracy"], eval["accuracy"]);
    assert_eq!(manifest()["command"], "eval");
}

#[test]
fn synth_reports_the_oracle() {
    let dir = workspace();
    let truth = body(&dir.path().join("data/truth.json"));
    let oracle = truth["oracle_accuracy"].as_f64().unwrap();
    assert!(oracle > 0.5 && oracle < 1.0, "oracle {oracle}");
    assert_eq!(truth["hidden_channels"], serde_json::json!(["EEG"]));
}
