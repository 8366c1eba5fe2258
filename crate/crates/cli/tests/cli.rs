use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dcebhm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcebhm")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn table1() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/table1.csv")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a two-patient, three-voxel simulation spec and returns its path.
fn small_spec(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(&path, r#"{"n_patients": 2, "voxels_per_scan": 3}"#).unwrap();
    path
}

#[test]
fn wilcoxon_on_table1() {
    let v = stdout_json(&dcebhm(&["test", "--wilcoxon", s(&table1())]));
    assert_eq!(v["w_plus"], 60.0);
    let p = v["p_value"].as_f64().unwrap();
    assert!((0.050..=0.060).contains(&p), "{p}");
    assert_eq!(v["exact"], true);
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path());
    for run in ["a", "b"] {
        let out = dcebhm(&["simulate", "--spec", s(&spec), "--seed", "7", "--out", s(&dir.path().join(run))]);
        assert!(out.status.success());
    }
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 3, "{names:?}");
    for name in names {
        let a = fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = fs::read(dir.path().join("b").join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}

#[test]
fn simulate_fit_summarize_test() {
    let dir = tempfile::tempdir().unwrap();
    let study_dir = dir.path().join("study");
    let out = dcebhm(&["simulate", "--spec", s(&small_spec(dir.path())), "--seed", "3", "--out", s(&study_dir)]);
    assert!(out.status.success());
    let manifest = String::from_utf8(out.stdout).unwrap().trim().to_owned();

    let chain = dir.path().join("chain.csv");
    let out = dcebhm(&[
        "fit", &manifest, "--out", s(&chain), "--burn-in", "200", "--iterations", "400", "--thin", "4", "--seed", "1", "--quiet",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_to_string(&chain).unwrap().lines().count();
    assert_eq!(rows, 1 + 100);

    let summary = stdout_json(&dcebhm(&["summarize", s(&chain), "--out", s(&dir.path().join("summary"))]));
    assert_eq!(summary["n_draws"], 100);
    let ci = summary["ktrans_baseline"]["ci95"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() <= ci[1].as_f64().unwrap());
    assert!(dir.path().join("summary/summary.json").exists());
    assert!(dir.path().join("summary/density_ktrans_baseline.csv").exists());

    let v = stdout_json(&dcebhm(&["test", s(&chain)]));
    let p = v["prob_positive"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let v = stdout_json(&dcebhm(&["baseline", &manifest, "--out", s(&dir.path().join("nls"))]));
    assert_eq!(v["voxels"], 12);
    let medians = fs::read_to_string(dir.path().join("nls/medians.csv")).unwrap();
    assert!(medians.starts_with("patient,pre,post"));
}

#[test]
fn one_retained_draw() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcebhm(&["simulate", "--spec", s(&small_spec(dir.path())), "--out", s(&dir.path().join("study"))]);
    let manifest = String::from_utf8(out.stdout).unwrap().trim().to_owned();
    let chain = dir.path().join("chain.csv");
    let out = dcebhm(&["fit", &manifest, "--out", s(&chain), "--burn-in", "0", "--iterations", "100", "--thin", "100", "--quiet"]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(&chain).unwrap().lines().count(), 2);
}

#[test]
fn unknown_subcommand_fails() {
    assert!(!dcebhm(&["frobnicate"]).status.success());
}

#[test]
fn bad_input_reports_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "pre,post\n0.1,oops\n").unwrap();
    let out = dcebhm(&["test", "--wilcoxon", s(&bad)]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("row 2"), "{err}");

    let out = dcebhm(&["fit", s(&dir.path().join("missing.json")), "--out", s(&dir.path().join("c.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: "));
}
