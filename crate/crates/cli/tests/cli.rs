use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_casa-nlu"));
    c.env_remove("CASA_SEED").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn casa-nlu")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 10-conversation corpus and a CASA model trained to memorise it.
struct Trained {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
    elapsed: Duration,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("tiny.jsonl");
        ok(&run(&["gen-data", "--seed", "11", "--n", "10", "--out", s(&data)]));
        let out_dir = dir.path().join("run");
        let start = Instant::now();
        ok(&run(&[
            "train",
            "--train",
            s(&data),
            "--val",
            s(&data),
            "--out_dir",
            s(&out_dir),
            "--seed",
            "1",
            "--max_epochs",
            "50",
            "--patience",
            "50",
        ]));
        let elapsed = start.elapsed();
        Trained {
            ckpt: out_dir.join("seed-1.ckpt.json"),
            data,
            elapsed,
            _dir: dir,
        }
    })
}

#[test]
fn gen_data_with_zero_conversations_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.jsonl");
    ok(&run(&["gen-data", "--n", "0", "--out", s(&out)]));
    assert_eq!(std::fs::read(&out).unwrap(), b"");
}

#[test]
fn gen_data_is_deterministic_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&run(&["gen-data", "--seed", "4", "--n", "25", "--profile", "booking-like", "--out", s(&a)]));
    ok(&run(&["gen-data", "--seed", "4", "--n", "25", "--profile", "booking-like", "--out", s(&b)]));
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let records = casa_nlu::data::read_conversational_jsonl(&a).unwrap();
    assert_eq!(records, casa_nlu::data::generate_records(4, 25, casa_nlu::data::Profile::BookingLike));
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&bin()
        .args(["gen-data", "--seed", "1", "--n", "5", "--out", s(&a)])
        .env("CASA_SEED", "9")
        .output()
        .unwrap());
    ok(&run(&["gen-data", "--seed", "9", "--n", "5", "--out", s(&b)]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn training_is_reproducible_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&run(&["gen-data", "--seed", "2", "--n", "12", "--out", s(&data)]));
    // a tight clip makes every update depend on the global gradient norm
    let ckpt = |name: &str| {
        let out_dir = dir.path().join(name);
        let args = ["--seed", "3", "--max_epochs", "3", "--clip_norm", "0.05"];
        ok(&run(&[&["train", "--train", s(&data), "--out_dir", s(&out_dir)][..], &args].concat()));
        std::fs::read(out_dir.join("seed-3.ckpt.json")).unwrap()
    };
    assert!(ckpt("a") == ckpt("b"), "checkpoints differ between identical runs");
}

#[test]
fn config_file_is_read_and_unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    let conf = dir.path().join("gen.conf");
    std::fs::write(&conf, format!("# corpus\nn = 3\nout = {}\n", s(&out))).unwrap();
    ok(&run(&["gen-data", "--config", s(&conf)]));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);

    std::fs::write(&conf, "n = 3\ncolour = blue\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&conf)]).status.code(), Some(2));
    assert_eq!(run(&["gen-data", "--n", "3"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--bogus", "1"]).status.code(), Some(2));
}

#[test]
fn missing_training_data_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let missing = dir.path().join("nope.jsonl");
    let out = run(&["train", "--train", s(&missing), "--out_dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out_dir.exists());
}

#[test]
fn malformed_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": \"x\", \"turns\": [{\"text\": \"a b\", \"tokens\": [\"a\", \"b\"], \"intent\": \"I\", \"slots\": [\"O\"], \"dialog_act\": \"Inform\"}]}\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--train", s(&bad), "--out_dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_dir.exists());
}

#[test]
fn smoke_training_run_is_fast_and_complete() {
    let t = trained();
    assert!(t.elapsed < Duration::from_secs(60), "took {:?}", t.elapsed);
    let dir = t.ckpt.parent().unwrap();
    for f in ["seed-1.ckpt.json", "seed-1.log.jsonl", "report.json", "run.conf"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 1);
}

#[test]
fn overfit_model_scores_perfectly_on_its_training_data() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    for history in ["predicted", "gold"] {
        let out = run(&[
            "eval",
            "--checkpoint",
            s(&t.ckpt),
            "--data",
            s(&t.data),
            "--history",
            history,
            "--out",
            s(&report_path),
        ]);
        ok(&out);
        let report: Value = serde_json::from_slice(&out.stdout).unwrap();
        let mean = &report["mean"];
        assert_eq!(mean["ic_accuracy"], 100.0, "{history}: {mean}");
        assert_eq!(mean["sl_token_f1"], 100.0, "{history}: {mean}");
        assert_eq!(mean["ic_first_turn"], 100.0);
        assert_eq!(mean["ic_followup"], 100.0);
        let saved: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        assert_eq!(saved, report);
    }
}

#[test]
fn attention_export_covers_the_window() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("attn.json");
    let png = dir.path().join("attn.png");
    let conv = casa_nlu::data::read_conversational_jsonl(&t.data).unwrap()[0].id.clone();
    ok(&run(&[
        "viz-attention",
        "--checkpoint",
        s(&t.ckpt),
        "--data",
        s(&t.data),
        "--conv",
        &conv,
        "--turn",
        "1",
        "--out",
        s(&json),
        "--heatmap",
        s(&png),
    ]));
    let rec: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(rec["conv"], conv.as_str());
    assert_eq!(rec["turn"], 1);
    for signal in ["utt", "intent", "da"] {
        let w: Vec<f64> = rec["signals"][signal].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(w.len(), 4, "K = 3 gives four window columns");
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{signal}: {w:?}");
        // turn 1 has two pre-conversation pads
        assert_eq!(&w[..2], &[0.0, 0.0]);
    }
    assert_eq!(&std::fs::read(&png).unwrap()[1..4], b"PNG");

    let out = run(&[
        "viz-attention",
        "--checkpoint",
        s(&t.ckpt),
        "--data",
        s(&t.data),
        "--conv",
        "no-such-conversation",
        "--turn",
        "0",
        "--out",
        s(&json),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
