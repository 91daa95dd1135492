use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use uanet::io::parse_predictions;

const TINY: &str = r#"
seed = 3

[data]
dev_size = 8
test_size = 8

[synthetic]
sentences = 40
min_len = 4
max_len = 9
words_per_state = 10
ambiguous_words = 4

[encoder]
word_dim = 4
char_dim = 3
char_filters = 3
hidden = 4

[refiner]
d_model = 4
heads = 1
head_dim = 4
layers = 1
ff_dim = 8
max_len = 16

[decode]
samples = 2

[train]
stage1_epochs = 1
stage2_epochs = 1
batch_size = 8
gamma_step = 0.5
"#;

fn uanet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uanet"))
        .args(args)
        .current_dir(dir)
        .env("UANET_LOG", "error")
        .output()
        .expect("binary runs")
}

fn tiny(dir: &Path) {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    tiny(dir.path());
    for out in ["a", "b"] {
        let o = uanet(dir.path(), &["synth", "--config", "tiny.toml", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["train.txt", "dev.txt", "test.txt", "config.resolved.toml"] {
        assert_eq!(read(&dir.path().join("a"), f), read(&dir.path().join("b"), f), "{f}");
    }
}

#[test]
fn seed_flag_changes_the_corpus() {
    let dir = TempDir::new().unwrap();
    tiny(dir.path());
    uanet(dir.path(), &["synth", "--config", "tiny.toml", "--out", "a"]);
    uanet(dir.path(), &["synth", "--config", "tiny.toml", "--set", "synthetic.seed=99", "--out", "b"]);
    assert_ne!(read(&dir.path().join("a"), "train.txt"), read(&dir.path().join("b"), "train.txt"));
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = uanet(dir.path(), &["predict", "--checkpoint", "nowhere/ckpt.json", "--input", "in.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere/ckpt.json"));
}

#[test]
fn unknown_config_key_names_its_path() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[encoder]\nhiden = 3\n").unwrap();
    let o = uanet(dir.path(), &["synth", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("encoder.hiden"));
}

#[test]
fn bad_override_value_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = uanet(dir.path(), &["synth", "--set", "refiner.heads=many"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("refiner.heads"));
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(uanet(dir.path(), &["fly"]).status.code(), Some(2));
}

/// Train once, then predict on the test split with one and with three
/// workers: the outputs must match and parse back.
#[test]
fn train_then_predict_is_worker_independent() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    tiny(d);
    for cmd in ["synth", "train"] {
        let o = uanet(d, &[cmd, "--config", "tiny.toml", "--out", "run"]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let input = d.join("run/test.txt");
    let input = input.to_str().unwrap();
    for (out, workers) in [("p1", "1"), ("p3", "3")] {
        let o = uanet(
            d,
            &[
                "predict", "--config", "tiny.toml", "--checkpoint", "run/checkpoint.json", "--input", input,
                "--labeled", "--set", "data.label_column=1", "--set", "data.scheme=bioes", "--workers", workers,
                "--out", out,
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let one = read(&d.join("p1"), "predictions.txt");
    assert_eq!(one, read(&d.join("p3"), "predictions.txt"));
    let rows = parse_predictions(&String::from_utf8(one).unwrap()).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().flatten().all(|r| r.gold.is_some() && r.uncertainty >= 0.0));

    let o = uanet(d, &["eval", "--config", "tiny.toml", "--out", "run", "--decoder", "softmax"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = parse_predictions(&String::from_utf8(read(&d.join("run"), "predictions.txt")).unwrap()).unwrap();
    assert!(rows.iter().flatten().all(|r| r.source == "draft"));
}
