//! End-to-end tests for the `oclf` binary: every subcommand on a tiny
//! synthetic dataset, plus exit codes on the documented failure modes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn oclf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_oclf"))
}

fn run(args: &[&str]) -> Output {
    oclf().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A 16-pixel model small enough to train in well under a second.
const TINY_CONFIG: &str = r#"{
  "model": {
    "input_side": 16,
    "base_channels": 4,
    "stem_kernel": 3,
    "stage_blocks": [1, 1, 1, 1],
    "gram_channels": 4,
    "gram_out_dim": 2,
    "backbone_out_dim": 8
  },
  "train": { "epochs": 2, "lr": 0.01, "batch_size": 8, "seed": 7 }
}"#;

/// One dataset + trained run shared by the read-only tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    results: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path();
        let data_dir = root.join("data");
        assert_ok(&run(&[
            "synth",
            "--out",
            data_dir.to_str().unwrap(),
            "--train",
            "8",
            "--val",
            "4",
            "--test",
            "4",
            "--side",
            "64",
            "--seed",
            "5",
        ]));
        let config = root.join("tiny.json");
        std::fs::write(&config, TINY_CONFIG).unwrap();
        let run_dir = root.join("run");
        let data = data_dir.join("manifest.jsonl");
        assert_ok(&run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ]));
        let results = root.join("results.jsonl");
        assert_ok(&run(&[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--models",
            run_dir.to_str().unwrap(),
            "--split",
            "test",
            "--out",
            results.to_str().unwrap(),
        ]));
        Fixture {
            _dir: dir,
            data,
            run: run_dir,
            results,
        }
    })
}

#[test]
fn synth_same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert_ok(&run(&[
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--train",
            "2",
            "--val",
            "1",
            "--test",
            "1",
            "--side",
            "32",
            "--seed",
            seed,
        ]));
        out
    };
    let a = mk("a", "9");
    let b = mk("b", "9");
    let c = mk("c", "10");
    let manifest = |p: &Path| std::fs::read(p.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    assert_ne!(manifest(&a), manifest(&c));
    let png = |p: &Path| std::fs::read(p.join("train").join("fake_0000.png")).unwrap();
    assert_eq!(png(&a), png(&b));
}

#[test]
fn train_writes_checkpoints_histories_and_run_manifest() {
    let fx = fixture();
    for name in [
        "whole.oclf",
        "patch.oclf",
        "concat.oclf",
        "whole_history.csv",
        "patch_history.csv",
        "concat_history.csv",
        "run.json",
    ] {
        assert!(fx.run.join(name).is_file(), "missing {name}");
    }
    let run_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.run.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_json["train_config"]["epochs"], 2);
    assert_eq!(run_json["model_config"]["input_side"], 16);
    let sha = run_json["checkpoints"]["whole"]["sha256"].as_str().unwrap();
    assert_eq!(sha.len(), 64);
    // History CSV has a header plus one row per epoch.
    let csv = std::fs::read_to_string(fx.run.join("whole_history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,train_loss,train_acc,val_acc"));
}

#[test]
fn eval_writes_parseable_results() {
    let fx = fixture();
    let text = std::fs::read_to_string(&fx.results).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8, "4 real + 4 fake test records");
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["id"].is_string());
        assert!(v["fused"].is_string());
        assert_eq!(v["per_patch"].as_array().unwrap().len(), 7);
        assert!(v["whole_face"].is_object(), "no early exit by default");
    }
}

#[test]
fn eval_early_exit_reports_skipped_forwards() {
    let fx = fixture();
    let out = run(&[
        "eval",
        "--data",
        fx.data.to_str().unwrap(),
        "--models",
        fx.run.to_str().unwrap(),
        "--split",
        "test",
        "--early-exit",
    ]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(
        text.contains("whole-face forwards:"),
        "missing counter line in:\n{text}"
    );
}

#[test]
fn eval_accepts_weight_overrides() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.json");
    std::fs::write(&weights, r#"{"mouth": 3, "nose": 2}"#).unwrap();
    assert_ok(&run(&[
        "eval",
        "--data",
        fx.data.to_str().unwrap(),
        "--models",
        fx.run.to_str().unwrap(),
        "--split",
        "test",
        "--weights",
        weights.to_str().unwrap(),
    ]));
    // Zero weights are rejected as malformed weight data.
    std::fs::write(&weights, r#"{"mouth": 0}"#).unwrap();
    let out = run(&[
        "eval",
        "--data",
        fx.data.to_str().unwrap(),
        "--models",
        fx.run.to_str().unwrap(),
        "--split",
        "test",
        "--weights",
        weights.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 5, "stderr: {}", stderr(&out));
}

#[test]
fn predict_emits_json_decision() {
    let fx = fixture();
    // Pull one record's image path and landmarks out of the manifest.
    let manifest = std::fs::read_to_string(&fx.data).unwrap();
    let record: serde_json::Value =
        serde_json::from_str(manifest.lines().nth(1).unwrap()).unwrap();
    let image = fx
        .data
        .parent()
        .unwrap()
        .join(record["path"].as_str().unwrap());
    let dir = tempfile::tempdir().unwrap();
    let landmarks = dir.path().join("landmarks.json");
    std::fs::write(&landmarks, record["landmarks"].to_string()).unwrap();
    let out = run(&[
        "predict",
        "--models",
        fx.run.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--landmarks",
        landmarks.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(matches!(v["fused"].as_str(), Some("real") | Some("fake")));
    assert_eq!(v["per_patch"].as_array().unwrap().len(), 7);
}

#[test]
fn sweep_ranks_candidates() {
    let fx = fixture();
    let out = run(&[
        "sweep",
        "--results",
        fx.results.to_str().unwrap(),
        "--top",
        "3",
    ]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("15 candidates over 8 results"), "{text}");
    assert!(text.contains("uniform"), "{text}");

    // Custom candidate file plus JSON output.
    let dir = tempfile::tempdir().unwrap();
    let cands = dir.path().join("cands.json");
    std::fs::write(&cands, r#"[{}, {"mouth": 2}, {"left_eye": 4}]"#).unwrap();
    let ranking = dir.path().join("ranking.json");
    let out = run(&[
        "sweep",
        "--results",
        fx.results.to_str().unwrap(),
        "--candidates",
        cands.to_str().unwrap(),
        "--out",
        ranking.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(stdout(&out).contains("3 candidates"));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ranking).unwrap()).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 3);
}

#[test]
fn report_renders_charts_and_markdown() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("report");
    assert_ok(&run(&[
        "report",
        "--run",
        fx.run.to_str().unwrap(),
        "--results",
        fx.results.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    for name in [
        "whole_curves.png",
        "patch_curves.png",
        "concat_curves.png",
        "per_patch_accuracy.png",
        "report.md",
    ] {
        assert!(out_dir.join(name).is_file(), "missing {name}");
    }
    let md = std::fs::read_to_string(out_dir.join("report.md")).unwrap();
    assert!(md.contains("## whole"));
    assert!(md.contains("## Evaluation"));
}

#[test]
fn missing_data_exits_2() {
    let out = run(&[
        "train",
        "--data",
        "/definitely/not/here/manifest.jsonl",
        "--out",
        "/tmp/ignored-oclf-test",
    ]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn single_class_data_exits_3() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    // Keep the header and only the REAL records; images stay where the
    // original manifest's root points after we rewrite it.
    let text = std::fs::read_to_string(&fx.data).unwrap();
    let mut lines = text.lines();
    let _header = lines.next().unwrap();
    let data_root = fx.data.parent().unwrap().to_str().unwrap();
    let mut filtered = format!("{{\"manifest_version\":1,\"root\":{}}}\n",
        serde_json::to_string(data_root).unwrap());
    for line in lines {
        if line.contains("\"label\":\"real\"") {
            filtered.push_str(line);
            filtered.push('\n');
        }
    }
    let one_class = dir.path().join("manifest.jsonl");
    std::fs::write(&one_class, filtered).unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--data",
        one_class.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3, "stderr: {}", stderr(&out));
}

#[test]
fn missing_models_exit_4() {
    let fx = fixture();
    let out = run(&[
        "eval",
        "--data",
        fx.data.to_str().unwrap(),
        "--models",
        "/definitely/not/here",
        "--split",
        "test",
    ]);
    assert_eq!(exit_code(&out), 4, "stderr: {}", stderr(&out));
}

#[test]
fn corrupt_checkpoint_exits_5() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    for name in ["whole.oclf", "patch.oclf", "concat.oclf"] {
        std::fs::copy(fx.run.join(name), dir.path().join(name)).unwrap();
    }
    let victim = dir.path().join("patch.oclf");
    let mut bytes = std::fs::read(&victim).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&victim, bytes).unwrap();
    let out = run(&[
        "eval",
        "--data",
        fx.data.to_str().unwrap(),
        "--models",
        dir.path().to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_eq!(exit_code(&out), 5, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("checkpoint corrupt"));
}

#[test]
fn malformed_history_csv_exits_6() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(
        run_dir.join("whole_history.csv"),
        "epoch,train_loss,train_acc,val_acc\n0,not_a_number,0.5,0.5\n",
    )
    .unwrap();
    let out = run(&[
        "report",
        "--run",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 6, "stderr: {}", stderr(&out));
}

#[test]
fn empty_run_dir_report_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["report", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
}
