//! End-to-end pipeline through the binary: corpus generation, pretraining,
//! fine-tuning, sampling, evaluation, verification, and exit codes.

use std::path::Path;
use std::process::Command;

use flowtune::model::load_checkpoint;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowtune"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "\
[space]
d = 6
vocab = 3
mask = true

[scheduler]
kind = linear
horizon = 1.0

[grid]
dt = 0.25

[model]
backend = neural
embed_dim = 4
hidden_dim = 16
time_features = 4

[corpus_gen]
generator = iid-categorical
probs = 0.5 0.3 0.2

[pretrain]
corpus = corpus.txt
steps = 120
batch_size = 16
lr = 0.003

[reward]
name = motif_count
args = 2 3

[finetune]
algorithm = reinforce
iterations = 3
batch_size = 8
lr = 0.002
init_checkpoint = pretrained.ckpt

[run]
seed = 5
",
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = write_config(out);
    let run = |args: &[&str]| {
        let output = bin()
            .args(args)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "command {args:?} failed:\n{}\n{}",
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr)
        );
        output
    };

    run(&["make-corpus", "--n", "200"]);
    let corpus_text = std::fs::read_to_string(out.join("corpus.txt")).unwrap();
    assert!(corpus_text.starts_with("# config_hash="));
    assert_eq!(corpus_text.lines().count(), 201);

    run(&["pretrain"]);
    assert!(out.join("pretrained.ckpt").exists());
    let metrics = std::fs::read_to_string(out.join("pretrain_metrics.log")).unwrap();
    assert!(metrics.lines().all(|l| l.contains("config_hash=")));

    // iterations = 0 must reproduce the input checkpoint exactly
    let zero_cfg = out.join("zero.cfg");
    std::fs::write(
        &zero_cfg,
        std::fs::read_to_string(&cfg)
            .unwrap()
            .replace("iterations = 3", "iterations = 0"),
    )
    .unwrap();
    let output = bin()
        .args(["finetune", "--config"])
        .arg(&zero_cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let (a, _) = load_checkpoint(&out.join("pretrained.ckpt")).unwrap();
    let (b, _) = load_checkpoint(&out.join("finetuned.ckpt")).unwrap();
    assert_eq!(a.params(), b.params(), "K=0 fine-tuning must be identity");

    run(&["finetune"]);
    let metrics = std::fs::read_to_string(out.join("finetune_metrics.log")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.contains("reward_mean="));

    // sampling is deterministic per seed
    run(&["sample", "--n", "25"]);
    let first = std::fs::read_to_string(out.join("samples.txt")).unwrap();
    run(&["sample", "--n", "25"]);
    let second = std::fs::read_to_string(out.join("samples.txt")).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.lines().count(), 26);

    let output = run(&["eval"]);
    let line = String::from_utf8_lossy(&output.stdout);
    assert!(line.contains("mean_reward="), "eval output: {line}");
    assert!(line.contains("kmer_corr="), "eval output: {line}");
    assert!(out.join("eval.txt").exists());
}

/// Rerunning a config reproduces the metrics stream bit-identically apart
/// from wall-clock fields.
#[test]
fn rerun_reproduces_metrics_exactly() {
    let strip_wall = |text: &str| -> String {
        text.lines()
            .map(|l| {
                l.split_whitespace()
                    .filter(|f| !f.starts_with("wall_ms="))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let run_once = || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = write_config(out);
        for args in [
            vec!["make-corpus", "--n", "150"],
            vec!["pretrain"],
            vec!["finetune"],
        ] {
            let output = bin()
                .args(&args)
                .arg("--config")
                .arg(&cfg)
                .arg("--out")
                .arg(out)
                .output()
                .unwrap();
            assert!(output.status.success(), "{args:?} failed");
        }
        (
            strip_wall(&std::fs::read_to_string(out.join("pretrain_metrics.log")).unwrap()),
            strip_wall(&std::fs::read_to_string(out.join("finetune_metrics.log")).unwrap()),
        )
    };
    let (pre_a, fine_a) = run_once();
    let (pre_b, fine_b) = run_once();
    assert_eq!(pre_a, pre_b, "pretraining metrics must reproduce exactly");
    assert_eq!(fine_a, fine_b, "fine-tuning metrics must reproduce exactly");
}

#[test]
fn verify_subcommand_writes_reports_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = write_config(out);
    let output = bin()
        .args(["verify", "--check", "estimator_oracle", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let report = std::fs::read_to_string(out.join("estimator_oracle.report")).unwrap();
    assert!(report.contains("pass=true"), "{report}");
    assert!(report.contains("config_hash="));

    // unknown check name fails validation (exit 1)
    let output = bin()
        .args(["verify", "--check", "nonsense", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn usage_and_validation_exit_codes() {
    // missing required --config: clap usage error, exit 2
    let output = bin().args(["pretrain"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));

    // malformed config: validation failure, exit 1, message names the line
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "d = 4\n").unwrap();
    let output = bin()
        .args(["pretrain", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("line 1"), "stderr: {err}");

    // missing checkpoint for finetune: exit 1
    let cfg = write_config(dir.path());
    let output = bin()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}
