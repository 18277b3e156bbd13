use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fdia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdia")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn case57_path() -> String {
    format!("{}/../core/data/case57.m", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn parse_case_prints_summary() {
    let o = fdia(&["parse-case", &case57_path()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "57 buses, 80 branches, 7 generators");
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(fdia(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fdia(&[]).status.code(), Some(1));
    assert_eq!(fdia(&["attack-demo", "--scale", "abc"]).status.code(), Some(1));
    assert_eq!(fdia(&["--help"]).status.code(), Some(0));
    assert_eq!(fdia(&["parse-case", "/nonexistent/case.m"]).status.code(), Some(2));
    assert_eq!(fdia(&["attack-demo", "--target", "1"]).status.code(), Some(2));
    assert_eq!(fdia(&["gen-data", "--config", "desk", "--set", "train.bogus=1"]).status.code(), Some(2));
}

#[test]
fn attack_demo_reports_invariance() {
    let o = fdia(&["attack-demo", "--target", "25", "--scale", "1.1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let delta: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("residual delta:"))
        .expect("delta line")
        .trim()
        .parse()
        .unwrap();
    assert!(delta < 1e-8);
}

fn small_overrides(dir: &Path) -> Vec<String> {
    vec![
        "profiles.steps=60".into(),
        "attack.targets=[25, 31, 43]".into(),
        "attack.window_start=30".into(),
        "attack.window_end=60".into(),
        "encoder.image_size=16".into(),
        "network.dense_units=16".into(),
        "train.epochs=2".into(),
        "train.batch_size=16".into(),
        format!("output.dir=\"{}\"", dir.display()),
    ]
}

fn with_sets<'a>(base: &[&'a str], sets: &'a [String]) -> Vec<&'a str> {
    let mut v = base.to_vec();
    for s in sets {
        v.push("--set");
        v.push(s);
    }
    v
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let sets = small_overrides(dir.path());
    let run = |base: &[&str]| {
        let o = fdia(&with_sets(base, &sets));
        assert_eq!(o.status.code(), Some(0), "{base:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let d = |name: &str| dir.path().join(name).display().to_string();
    run(&["gen-data"]);
    run(&["encode", "--input", &d("dataset.fdia")]);
    run(&["train", "--input", &d("images.fdia")]);
    run(&["eval", "--input", &d("images.fdia"), "--dataset", &d("dataset.fdia"), "--model", &d("model.fdnn")]);
    for f in ["dataset.fdia", "dataset.json", "images.fdia", "model.fdnn", "model.history.csv", "comparison.csv", "confusion.pgm"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let render = |args: &[&str]| assert_eq!(fdia(args).status.code(), Some(0), "{args:?}");
    render(&["render", "--input", &d("dataset.fdia"), "--index", "3", "--encoder", "gaf", "--out", &d("s.pgm")]);
    assert!(fs::read(d("s.pgm")).unwrap().starts_with(b"P5\n136 136\n255\n"));
    render(&["render", "--confusion", &d("confusion.csv"), "--out", &d("cm.pgm")]);
    assert!(fs::read(d("cm.pgm")).unwrap().starts_with(b"P5\n64 64\n255\n"));
}

#[test]
fn pipeline_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let sets = small_overrides(dir.path());
    let o = fdia(&with_sets(&["pipeline", "--config", "desk"], &sets));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.toml",
        "dataset.fdia",
        "images.fdia",
        "model.fdnn",
        "history.csv",
        "comparison.csv",
        "confusion.csv",
        "confusion.pgm",
        "metrics.json",
        "manifest.json",
        "images/normal_0.pgm",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("config_hash") && manifest.contains("timings"));
}
