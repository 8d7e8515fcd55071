use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rulkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rulkit"))
        .args(args)
        .output()
        .expect("spawn rulkit")
}

fn ok(args: &[&str]) -> Output {
    let out = rulkit(args);
    assert!(
        out.status.success(),
        "rulkit {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, seed: &str) -> PathBuf {
    let raw = dir.join("raw");
    ok(&[
        "generate", "--out-dir", s(&raw), "--engines", "6", "--min-life", "60", "--max-life", "80", "--seed", seed,
    ]);
    raw
}

fn preprocess(raw: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "preprocess".to_string(),
        "--train".into(),
        s(&raw.join("train.txt")).into(),
        "--test".into(),
        s(&raw.join("test.txt")).into(),
        "--truth".into(),
        s(&raw.join("RUL.txt")).into(),
        "--out-dir".into(),
        s(out).into(),
    ];
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs);
}

fn train(data: &Path, out: &Path, seed: &str) {
    ok(&[
        "train", "--data", s(data), "--out-dir", s(out), "--model", "reduced", "--max-epochs", "1",
        "--batch-size", "32", "--seed", seed, "--quiet",
    ]);
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    raw: PathBuf,
    data: PathBuf,
    model: PathBuf,
}

fn trained() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let raw = generate(&root, "5");
    let data = root.join("data");
    preprocess(&raw, &data, &[]);
    let model = root.join("model");
    train(&data, &model, "3");
    Fixture {
        _dir: dir,
        root,
        raw,
        data,
        model,
    }
}

#[test]
fn generate_is_parseable_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(&dir.path().join("a"), "9");
    let b = generate(&dir.path().join("b"), "9");
    for name in ["train.txt", "test.txt", "RUL.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let first = fs::read_to_string(a.join("train.txt")).unwrap();
    let fields = first.lines().next().unwrap().split_whitespace().count();
    assert_eq!(fields, 26);
    let truth = fs::read_to_string(a.join("RUL.txt")).unwrap();
    assert_eq!(truth.lines().count(), 6);
    assert!(a.join("manifest.json").exists());
}

#[test]
fn invalid_flag_is_rejected() {
    let out = rulkit(&["train", "--no-such-flag"]);
    assert!(!out.status.success());
    let out = rulkit(&["generate", "--out-dir", "x", "--noise", "banana"]);
    assert!(!out.status.success());
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = rulkit(&[
        "preprocess", "--train", s(&missing), "--test", s(&missing), "--truth", s(&missing), "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.txt"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn stride_one_gives_more_windows() {
    let dir = tempfile::tempdir().unwrap();
    let raw = generate(dir.path(), "2");
    let (d3, d1) = (dir.path().join("d3"), dir.path().join("d1"));
    preprocess(&raw, &d3, &[]);
    preprocess(&raw, &d1, &["--stride", "1"]);
    let shape = |d: &Path| {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("preprocess.json")).unwrap()).unwrap();
        v["train_shape"][0].as_u64().unwrap()
    };
    assert!(shape(&d1) > 2 * shape(&d3), "{} vs {}", shape(&d1), shape(&d3));
}

#[test]
fn training_is_reproducible_per_seed() {
    let f = trained();
    for name in ["model.ckpt", "history.csv", "manifest.json"] {
        assert!(f.model.join(name).exists(), "{name}");
    }
    let again = f.root.join("again");
    train(&f.data, &again, "3");
    assert_eq!(
        fs::read(f.model.join("model.ckpt")).unwrap(),
        fs::read(again.join("model.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(f.model.join("history.csv")).unwrap(),
        fs::read(again.join("history.csv")).unwrap()
    );

    let eval = f.root.join("eval");
    ok(&[
        "evaluate", "--checkpoint", s(&f.model.join("model.ckpt")), "--data", s(&f.data), "--out-dir", s(&eval),
    ]);
    let preds = fs::read_to_string(eval.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 6);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["rmse"].as_f64().unwrap().is_finite());
}

#[test]
fn evaluate_rejects_mismatched_preprocessing() {
    let f = trained();
    let other = f.root.join("other");
    preprocess(&f.raw, &other, &["--window", "20"]);
    let eval = f.root.join("eval");
    let out = rulkit(&[
        "evaluate", "--checkpoint", s(&f.model.join("model.ckpt")), "--data", s(&other), "--out-dir", s(&eval),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("window"));
    assert!(!eval.exists());
}

#[test]
fn explain_writes_every_table_and_validates_units() {
    let f = trained();
    let ckpt = f.model.join("model.ckpt");
    let train_txt = f.raw.join("train.txt");
    let all = f.root.join("explain");
    ok(&[
        "explain", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--train", s(&train_txt), "--out-dir", s(&all),
    ]);
    for name in [
        "attention.csv",
        "residuals.csv",
        "correlation.csv",
        "profiles_engines.csv",
        "profiles_global.csv",
        "manifest.json",
    ] {
        assert!(all.join(name).exists(), "{name}");
    }
    let rows = |p: &Path| fs::read_to_string(p).unwrap().lines().count() - 1;
    assert_eq!(rows(&all.join("attention.csv")), 5);
    assert_eq!(rows(&all.join("residuals.csv")), 6);

    let some = f.root.join("some");
    ok(&[
        "explain", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--train", s(&train_txt), "--out-dir", s(&some),
        "--units", "2,4",
    ]);
    assert_eq!(rows(&some.join("attention.csv")), 2);

    let bad = f.root.join("bad");
    let out = rulkit(&[
        "explain", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--train", s(&train_txt), "--out-dir", s(&bad),
        "--units", "99",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("99") && err.contains("1,2,3,4,5,6"), "{err}");
    assert!(!bad.exists());
}
