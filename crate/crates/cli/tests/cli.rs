use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny/config.toml")
}

fn cmas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmas"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs a pipeline subcommand on the fixture with outputs redirected into `dir`.
fn stage(dir: &Path, name: &str, extra: &[&str]) -> Output {
    let config = fixture_config();
    let out = dir.join("out");
    let cache = dir.join("cache");
    let mut args = vec![
        name,
        "--config",
        config.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "--cache-dir",
        cache.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let output = cmas(&args);
    assert!(
        output.status.success(),
        "{name} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn feature_sets(dir: &Path) -> BTreeMap<String, BTreeSet<String>> {
    let text = std::fs::read_to_string(dir.join("out/trf_sets.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["sets"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(ty, list)| {
            let words = list.as_array().unwrap().iter().map(|w| w.as_str().unwrap().to_string()).collect();
            (ty.clone(), words)
        })
        .collect()
}

#[test]
fn run_all_reports_scores() {
    let dir = tempfile::tempdir().unwrap();
    let output = stage(dir.path(), "run-all", &[]);
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("F1"), "{stdout}");
    assert!(dir.path().join("out/predictions_fold0.jsonl").exists());

    let errors = stage(dir.path(), "analyze-errors", &[]);
    assert!(String::from_utf8(errors.stdout).unwrap().contains("OOD types"));
}

#[test]
fn evaluate_compares_files() {
    let dir = tempfile::tempdir().unwrap();
    stage(dir.path(), "run-all", &[]);
    let gold = dir.path().join("out/test_fold0.jsonl");
    let pred = dir.path().join("out/predictions_fold0.jsonl");
    let output = cmas(&["evaluate", "--gold", gold.to_str().unwrap(), "--pred", pred.to_str().unwrap()]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["true_positives"], 5);
    assert_eq!(report["false_positives"], 1);
    assert_eq!(report["false_negatives"], 2);
    assert!((report["f1"].as_f64().unwrap() - 10.0 / 13.0).abs() < 1e-12);

    let via_config = stage(dir.path(), "evaluate", &[]);
    assert!(String::from_utf8(via_config.stdout).unwrap().contains("F1"));
}

#[test]
fn lower_rho_mines_subsets() {
    let dir = tempfile::tempdir().unwrap();
    stage(dir.path(), "ingest", &[]);
    stage(dir.path(), "annotate", &[]);
    stage(dir.path(), "mine-trf", &["--rho", "5"]);
    let loose = feature_sets(dir.path());
    stage(dir.path(), "mine-trf", &["--rho", "3"]);
    let strict = feature_sets(dir.path());
    assert!(!loose.is_empty());
    for (ty, words) in &strict {
        assert!(words.is_subset(&loose[ty]), "{ty}: {words:?} not within {:?}", loose[ty]);
    }
}

#[test]
fn bad_input_exits_nonzero() {
    let unknown_flag = cmas(&["run-all", "--config", fixture_config().to_str().unwrap(), "--bogus"]);
    assert!(!unknown_flag.status.success());

    let missing = cmas(&["run-all", "--config", "/nonexistent/config.toml"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));

    let bad_rho = cmas(&["mine-trf", "--config", fixture_config().to_str().unwrap(), "--rho", "0.5"]);
    assert!(!bad_rho.status.success());

    let half = cmas(&["evaluate", "--gold", "g.jsonl"]);
    assert!(!half.status.success());
}
