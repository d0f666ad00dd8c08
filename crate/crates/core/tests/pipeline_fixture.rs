use std::path::{Path, PathBuf};

use cmas_core::evaluation::ErrorCategory;
use cmas_core::pipeline::files;
use cmas_core::{Pipeline, PipelineConfig};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny/config.toml")
}

fn config_in(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::load(fixture()).unwrap();
    c.output_dir = dir.join("out");
    c.cache_dir = Some(dir.join("cache"));
    c
}

#[test]
fn tiny_fixture_scores_as_designed() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(config_in(dir.path())).unwrap();
    let report = pipeline.run_all().unwrap();
    assert_eq!(report.folds.len(), 1);
    let fold = &report.folds[0];
    assert_eq!((fold.true_positives, fold.false_positives, fold.false_negatives), (5, 1, 2));
    assert!((report.mean_f1 - 10.0 / 13.0).abs() < 1e-12);

    let errors = pipeline.analyze_errors().unwrap();
    assert_eq!(errors.report.count(ErrorCategory::OodType), 1);
    assert_eq!(errors.report.count(ErrorCategory::OmittedMention), 2);
    assert_eq!(errors.report.total, 3);

    let out = dir.path().join("out");
    for name in [
        files::UNLABELED,
        files::SELF_ANNOTATIONS,
        files::TRF_SETS,
        files::REPORT_JSON,
        files::REPORT_TXT,
        files::ERRORS_JSON,
        files::ERRORS_TXT,
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let demos = std::fs::read_to_string(out.join(files::demonstrations(0))).unwrap();
    assert!(demos.contains("\"helpfulness\":5"));
}

#[test]
fn stages_rerun_from_disk_and_hit_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let first = Pipeline::new(config_in(dir.path())).unwrap();
    first.run_all().unwrap();
    let before = std::fs::read(dir.path().join("out").join(files::predictions(0))).unwrap();

    let second = Pipeline::new(config_in(dir.path())).unwrap();
    second.predict().unwrap();
    second.evaluate().unwrap();
    let stats = second.gateway_stats();
    assert_eq!(stats.backend_calls, 0);
    assert_eq!(stats.cache_hits, stats.requests);
    let after = std::fs::read(dir.path().join("out").join(files::predictions(0))).unwrap();
    assert_eq!(before, after);
}

#[test]
fn changed_settings_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(config_in(dir.path())).unwrap().run_all().unwrap();
    let mut changed = config_in(dir.path());
    changed.rho = 5.0;
    let pipeline = Pipeline::new(changed).unwrap();
    assert!(matches!(pipeline.predict(), Err(cmas_core::Error::DigestMismatch(_))));
    assert!(matches!(pipeline.evaluate(), Err(cmas_core::Error::DigestMismatch(_))));
    pipeline.mine_trf().unwrap();
    pipeline.predict().unwrap();
    pipeline.evaluate().unwrap();
}

#[test]
fn few_shot_uses_gold_demonstrations() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config_in(dir.path());
    c.shots = 3;
    let pipeline = Pipeline::new(c).unwrap();
    pipeline.run_all().unwrap();
    let out = dir.path().join("out");
    assert!(!out.join(files::SELF_ANNOTATIONS).exists());
    let pool = std::fs::read_to_string(out.join(files::gold_pool(0))).unwrap();
    assert_eq!(pool.lines().count(), 3);
    assert!(pool.contains("\"provenance\":\"gold\""));
    let demos = std::fs::read_to_string(out.join(files::demonstrations(0))).unwrap();
    let first: serde_json::Value = serde_json::from_str(demos.lines().next().unwrap()).unwrap();
    assert_eq!(first["demos"].as_array().unwrap().len(), 3);
}
