use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

use mimn_core::train::Checkpoint;

fn mimn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimn")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = mimn(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.ends_with(b"\n"));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mimn(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Toy corpus with two trained checkpoints (seeds 0 and 1), shared by tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    seed0: PathBuf,
    seed1: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let toy = root.join("toy");
        ok_json(&["gen-toy", "--out-dir", s(&toy)]);
        let config = toy.join("config.json");
        let mut ckpts = Vec::new();
        for seed in ["0", "1"] {
            let out = root.join(format!("run{seed}"));
            ok_json(&["train", "--config", s(&config), "--seed", seed, "--out-dir", s(&out)]);
            ckpts.push(out.join("model.ckpt"));
        }
        Fixture {
            _dir: dir,
            config,
            seed1: ckpts.pop().unwrap(),
            seed0: ckpts.pop().unwrap(),
            root,
        }
    })
}

#[test]
fn help_lists_flags() {
    let help = String::from_utf8(mimn(&["train", "--help"]).stdout).unwrap();
    for flag in [
        "--config",
        "--seed",
        "--out-dir",
        "--variant",
        "--turns",
        "--precision",
        "--lr",
        "--train-data",
    ] {
        assert!(help.contains(flag), "{flag}");
    }
    assert!(String::from_utf8(mimn(&["eval", "--help"]).stdout)
        .unwrap()
        .contains("--ensemble"));
    assert!(String::from_utf8(mimn(&["gradcheck", "--help"]).stdout)
        .unwrap()
        .contains("--corrupt-backward"));
}

#[test]
fn unknown_flags_and_values_rejected() {
    assert_eq!(code(&["params", "--hiden", "8"]), 2);
    assert_eq!(code(&["params", "--variant", "esim"]), 2);
    assert_eq!(code(&["params", "--precision", "f16"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"learning_rate": 0.1}"#).unwrap();
    assert_eq!(code(&["params", "--config", s(&path)]), 2);
    assert_eq!(code(&["params", "--config", s(&dir.path().join("absent.json"))]), 2);
}

#[test]
fn params_counts() {
    let full = ok_json(&["params"]);
    let total = full["total"].as_u64().unwrap();
    assert!((5_200_000..=5_400_000).contains(&total), "{total}");
    let nm = ok_json(&["params", "--variant", "no_memory"])["total"]
        .as_u64()
        .unwrap();
    assert!((5_600_000..=6_000_000).contains(&nm), "{nm}");
    assert_eq!(code(&["params", "--turns", "2"]), 2);
}

#[test]
fn gradcheck_passes_and_rejects_corruption() {
    let report = ok_json(&["gradcheck"]);
    assert_eq!(report["passed"], true);
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-5);
    let out = mimn(&["gradcheck", "--corrupt-backward", "matmul"]);
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], false);
    assert_eq!(code(&["gradcheck", "--corrupt-backward", "nonsense"]), 2);
}

#[test]
fn train_writes_checkpoint_and_history() {
    let f = fixture();
    assert!(f.seed0.is_file());
    let history: Value =
        serde_json::from_slice(&std::fs::read(f.seed0.with_file_name("history.json")).unwrap()).unwrap();
    assert_eq!(history["variant"], "full");
    assert_eq!(history["epochs"].as_array().unwrap().len(), 30);
    assert!(history["epochs"][0]["train_loss"].as_f64().unwrap() > 0.0);
}

#[test]
fn variant_override_recorded() {
    let f = fixture();
    let out = f.root.join("nm");
    let summary = ok_json(&[
        "train",
        "--config",
        s(&f.config),
        "--variant",
        "no_memory",
        "--max-epochs",
        "1",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(summary["variant"], "no_memory");
    let history: Value = serde_json::from_slice(&std::fs::read(out.join("history.json")).unwrap()).unwrap();
    assert_eq!(history["variant"], "no_memory");
}

#[test]
fn missing_data_is_a_config_error() {
    let f = fixture();
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&f.config),
            "--train-data",
            "/nonexistent/train.jsonl"
        ]),
        2
    );
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["eval", "--checkpoint", s(&f.seed0)]), 2);
}

#[test]
fn divergence_exits_3() {
    let f = fixture();
    let out = f.root.join("diverge");
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&f.config),
            "--lr",
            "1e38",
            "--max-epochs",
            "2",
            "--out-dir",
            s(&out)
        ]),
        3
    );
}

#[test]
fn training_is_deterministic() {
    let f = fixture();
    let runs: Vec<PathBuf> = ["det_a", "det_b"].iter().map(|d| f.root.join(d)).collect();
    for out in &runs {
        ok_json(&[
            "train",
            "--config",
            s(&f.config),
            "--seed",
            "5",
            "--max-epochs",
            "2",
            "--out-dir",
            s(out),
        ]);
    }
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(runs[0].join("history.json")), read(runs[1].join("history.json")));
    assert_eq!(read(runs[0].join("model.ckpt")), read(runs[1].join("model.ckpt")));
    let eval = |out: &Path| {
        mimn(&[
            "eval",
            "--config",
            s(&f.config),
            "--checkpoint",
            s(&out.join("model.ckpt")),
        ])
        .stdout
    };
    assert_eq!(eval(&runs[0]), eval(&runs[1]));
}

#[test]
fn eval_reports_accuracy() {
    let f = fixture();
    let plain = mimn(&["eval", "--config", s(&f.config), "--checkpoint", s(&f.seed0)]);
    assert!(plain.status.success());
    let report: Value = serde_json::from_slice(&plain.stdout).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["per_label"].as_array().unwrap().len(), 3);

    let one = mimn(&["eval", "--config", s(&f.config), "--ensemble", s(&f.seed0)]);
    assert_eq!(one.stdout, plain.stdout);
}

#[test]
fn ensemble_of_two_seeds() {
    let f = fixture();
    let acc = |args: &[&str]| {
        let mut all = vec!["eval", "--config", s(&f.config)];
        all.extend_from_slice(args);
        ok_json(&all)["accuracy"].as_f64().unwrap()
    };
    let a = acc(&["--checkpoint", s(&f.seed0)]);
    let b = acc(&["--checkpoint", s(&f.seed1)]);
    let both = format!("{},{}", s(&f.seed0), s(&f.seed1));
    let e = acc(&["--ensemble", &both]);
    assert!(e >= a.min(b) - 0.05, "ensemble {e} vs members {a} {b}");
}

#[test]
fn eval_rejects_label_mismatch() {
    let f = fixture();
    let path = f.root.join("two_way.jsonl");
    std::fs::write(
        &path,
        "{\"premise\": \"cat dog\", \"hypothesis\": \"cat\", \"label\": \"entails\"}\n\
         {\"premise\": \"cat dog\", \"hypothesis\": \"fish\", \"label\": \"neutral\"}\n",
    )
    .unwrap();
    assert_eq!(
        code(&[
            "eval",
            "--config",
            s(&f.config),
            "--checkpoint",
            s(&f.seed0),
            "--test-data",
            s(&path)
        ]),
        2
    );
}

fn distribution(v: &Value) -> Vec<f64> {
    v["distribution"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["probability"].as_f64().unwrap())
        .collect()
}

#[test]
fn predict_entailment_after_training() {
    let f = fixture();
    let v = ok_json(&[
        "predict",
        "--checkpoint",
        s(&f.seed0),
        "--premise",
        "cat dog park river",
        "--hypothesis",
        "dog park",
    ]);
    let p = distribution(&v);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(v["label"], "entailment");
    assert!(p[1] > 0.5, "{p:?}");
}

#[test]
fn predict_rejects_empty_sentence() {
    let f = fixture();
    assert_eq!(
        code(&[
            "predict",
            "--checkpoint",
            s(&f.seed0),
            "--premise",
            "  ",
            "--hypothesis",
            "dog"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "predict",
            "--checkpoint",
            s(&f.seed0),
            "--premise",
            "dog",
            "--hypothesis",
            ""
        ]),
        2
    );
}

#[test]
fn zero_output_layer_predicts_uniform() {
    let f = fixture();
    let mut ckpt = Checkpoint::load(&f.seed0).unwrap();
    for name in ["mlp.out.w", "mlp.out.b"] {
        let id = ckpt.store.id(name).unwrap();
        ckpt.store.get_mut(id).data_mut().fill(0.0);
    }
    let path = f.root.join("zero.ckpt");
    ckpt.save(&path).unwrap();
    for precision in ["f32", "f64"] {
        let v = ok_json(&[
            "predict",
            "--checkpoint",
            s(&path),
            "--precision",
            precision,
            "--premise",
            "red fish",
            "--hypothesis",
            "not blue",
        ]);
        assert_eq!(v["label"], "neutral");
        assert!(distribution(&v).iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-6));
    }
}

#[test]
fn gen_toy_rejects_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["gen-toy", "--size", "10", "--out-dir", s(dir.path())]), 2);
}
