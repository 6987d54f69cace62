use std::fs;
use std::path::Path;
use std::time::Instant;

use vlb_core::config::PipelineConfig;
use vlb_core::fixture::{write_demo_fixture, Endpoints, DEMO_SAMPLES, PLANTED};
use vlb_core::pipeline::{run_pipeline, Layout, MockConnector, PipelineError, RunOptions, Stage, StageOutcome};

fn fixture(dir: &Path) -> PipelineConfig {
    let path = write_demo_fixture(dir, &Endpoints::InProcess).unwrap();
    PipelineConfig::load(&path).unwrap()
}

#[test]
fn full_mock_run_is_deterministic_and_resumable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = fixture(a.path());
    let cfg_b = fixture(b.path());

    let t = Instant::now();
    let first = run_pipeline(&cfg_a, &MockConnector, &RunOptions { jobs: Some(1), ..Default::default() }).unwrap();
    eprintln!("jobs=1 run: {:?}", t.elapsed());
    let t = Instant::now();
    let second = run_pipeline(&cfg_b, &MockConnector, &RunOptions { jobs: Some(8), ..Default::default() }).unwrap();
    eprintln!("jobs=8 run: {:?}", t.elapsed());
    assert!(first.stages.iter().all(|s| s.outcome == StageOutcome::Ran), "{:?}", first.stages);
    assert!(first.bundle_hash.is_some());
    assert_eq!(first.bundle_hash, second.bundle_hash);

    let la = Layout::new(&cfg_a.output_dir);
    let static_report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(la.static_report()).unwrap()).unwrap();
    assert_eq!(static_report["matches"].as_array().unwrap().len(), PLANTED);
    assert_eq!(static_report["eval_count"], DEMO_SAMPLES);
    for fig in ["delta_heatmap", "radar", "contamination_reduction", "ratio_sweep", "stack_count"] {
        let p = la.report().join(format!("figures/{fig}.csv"));
        assert!(fs::metadata(&p).unwrap().len() > 0, "{fig}");
    }

    fs::remove_dir_all(cfg_a.output_dir.join("eval")).unwrap();
    let again = run_pipeline(&cfg_a, &MockConnector, &RunOptions { jobs: Some(2), ..Default::default() }).unwrap();
    for s in [Stage::Ingest, Stage::Embed, Stage::Contaminate, Stage::Bootstrap, Stage::Recontaminate] {
        assert_eq!(again.outcome(s), Some(StageOutcome::Cached), "{s}");
    }
    assert_eq!(again.outcome(Stage::Eval), Some(StageOutcome::Ran));
    assert_eq!(again.outcome(Stage::Report), Some(StageOutcome::Cached));
    assert_eq!(again.bundle_hash, first.bundle_hash);
}

#[test]
fn missing_judge_fails_validation_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path());
    cfg.roles.judge = None;
    let err = run_pipeline(&cfg, &MockConnector, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
    assert_eq!(err.exit_code(), 2);
    assert!(!cfg.output_dir.exists());
}

#[test]
fn stage_failures_carry_stage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    fs::write(&cfg.benchmark.path, "index\timage\tquestion\n0\tnope.png\tq\n").unwrap();
    let err = run_pipeline(&cfg, &MockConnector, &RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 10, "{err}");

    let mut cfg2 = fixture(dir.path());
    cfg2.output_dir = dir.path().join("out2");
    fs::write(cfg2.corpus.as_ref().unwrap().vectors.clone(), b"garbage").unwrap();
    let err = run_pipeline(&cfg2, &MockConnector, &RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 12, "{err}");
}

