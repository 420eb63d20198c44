use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bayes_cl::tasks::{encode_idx_images, encode_idx_labels};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayes-cl")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_mnist(dir: &Path, per_class: usize, prefix: &str) {
    let side = 4;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * 10 {
        let label = (i % 10) as u8;
        labels.push(label);
        for p in 0..side * side {
            // one bright pixel per class plus a little texture
            pixels.push(if p == label as usize { 250 } else { ((i * 7 + p * 13) % 40) as u8 });
        }
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), encode_idx_images(side, side, &pixels)).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx_labels(&labels)).unwrap();
}

const SMALL: &str = r#"
schema_version = 1
num_tasks = 3
seeds = [0, 1]
hidden = [8]
init_sigma = 0.05
epochs = 3
mle_epochs = 3
batch_policy = "fixed"
batch_size = 16
replay_per_class = 10
generator_kind = "class-gaussian"
coreset_size = 2
finetune_epochs = 2
eval_samples = 5
mi_samples = 5
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_config_is_a_validation_error() {
    let o = bin(&["run", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config not found"), "{}", stderr(&o));
}

#[test]
fn unknown_method_lists_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "benchmark = \"synth\"\n");
    let o = bin(&["run", "--config", &cfg, "--method", "ewc"]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("unknown method"), "{msg}");
    for m in ["plain", "vcl", "vcl-coreset", "coreset-only", "vgr", "hybrid"] {
        assert!(msg.contains(m), "{msg}");
    }
}

#[test]
fn unknown_key_and_bad_version_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "benchmark = \"synth\"\nlearning_rat = 0.1\n");
    let o = bin(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));

    let path = dir.path().join("v2.toml");
    fs::write(&path, SMALL.replace("schema_version = 1", "schema_version = 2")).unwrap();
    let o = bin(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "benchmark = \"split-single\"\n");
    let o = bin(&["run", "--config", &cfg, "--data-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn divergent_training_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "benchmark = \"synth\"\nmethods = [\"vcl\"]\nlearning_rate = 1e300\n");
    let out = dir.path().join("out");
    let o = bin(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn run_mi_and_report_on_split_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    fs::create_dir(&data).unwrap();
    write_mnist(&data, 8, "train");
    write_mnist(&data, 3, "t10k");
    let cfg = write_config(dir.path(), "benchmark = \"split-single\"\nmethods = [\"vcl\", \"vgr\", \"vcl-coreset\"]\nmi = true\n");
    let out = dir.path().join("out");
    let args = ["--config", &cfg, "--data-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap()];

    let o = bin(&[&["run"][..], &args[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("method,seed,task_trained,task_evaluated,accuracy"));
    // 3 methods x 2 seeds x (1 + 2 + 3) cells
    assert_eq!(metrics.lines().count(), 1 + 3 * 2 * 6);
    let mi = fs::read_to_string(out.join("runs/vgr/seed0/mi_scaled.csv")).unwrap();
    assert_eq!(mi.lines().next(), Some("posterior_task,test_task,value"));
    assert_eq!(mi.lines().count(), 1 + 9);
    assert!(out.join("runs/vgr/seed1/posterior_task3.bcls").exists());

    let o = bin(&[&["mi"][..], &args[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rows separate"));

    let o = bin(&["report", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("fig3_average_accuracy.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("method,task,mean_accuracy,stderr,seeds"));
    for m in ["vcl", "vgr", "vcl-coreset"] {
        assert_eq!(table.lines().filter(|l| l.starts_with(&format!("{m},"))).count(), 3, "{table}");
    }
}

#[test]
fn seed_override_runs_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "benchmark = \"synth\"\nmethods = [\"plain\"]\n");
    let out = dir.path().join("out");
    let o = bin(&["run", "--config", &cfg, "--seed", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.starts_with("plain,1,")), "{metrics}");
}
