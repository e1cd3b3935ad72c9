mod common;

use common::*;
use slate_lab::experiment::{read_sweep_rows, run_sweep, summarize_bench, ExperimentConfig, Method};
use slate_lab::io::{load_artifact, read_logs};

#[test]
fn every_stage_reproduces_its_outputs() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_pipeline(a.path(), &cfg);
    let second = run_pipeline(b.path(), &cfg);
    assert_eq!(first.len(), second.len());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{name} differs between runs");
    }
    // a different seed changes the data
    let mut other = cfg.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    let third = run_pipeline(c.path(), &other);
    let logs = |run: &[(String, Vec<u8>)]| run.iter().find(|(n, _)| n == "logs.jsonl").unwrap().1.clone();
    assert_ne!(logs(&first), logs(&third));
}

#[test]
fn stage_outputs_read_back() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), &cfg);
    let logs = read_logs(&dir.path().join("logs.jsonl")).unwrap();
    assert_eq!(logs.len(), 3000);
    let bin = load_artifact(&dir.path().join("prr.bin")).unwrap().into_model().unwrap();
    let json = load_artifact(&dir.path().join("prr.json")).unwrap().into_model().unwrap();
    assert_eq!(bin, json);
    let rows = read_sweep_rows(&dir.path().join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * cfg.methods.len());
    assert!(rows.iter().all(|r| r.status == "ok"), "{rows:#?}");
}

#[test]
fn sweep_resumes_without_recomputing() {
    let mut cfg = tiny_config();
    cfg.methods = vec![Method::Logging, Method::Oracle, "prr".parse().unwrap()];
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let first = run_sweep(&cfg, &out, &mut |_, _| {}).unwrap();
    assert_eq!(first.len(), 12);
    let again = run_sweep(&cfg, &out, &mut |_, _| {}).unwrap();
    assert!(again.is_empty());
    assert_eq!(read_sweep_rows(&out).unwrap().len(), 12);

    // extending the grid only runs the new cells
    let mut wider = cfg.clone();
    wider.seed = 7;
    let extra = run_sweep(&wider, &out, &mut |_, _| {}).unwrap();
    assert_eq!(extra.len(), 12);
    assert_eq!(read_sweep_rows(&out).unwrap().len(), 24);
}

#[test]
fn oracle_leads_the_sweep() {
    let mut cfg = tiny_config();
    cfg.methods = vec![Method::Logging, Method::Oracle];
    let dir = tempfile::tempdir().unwrap();
    let rows = run_sweep(&cfg, &dir.path().join("s.csv"), &mut |_, _| {}).unwrap();
    for pair in rows.chunks(2) {
        assert!(pair[1].mean.unwrap() > pair[0].mean.unwrap());
    }
}

#[test]
fn bench_summary_has_one_line_per_method() {
    let cfg = tiny_config();
    let rows = slate_lab::experiment::run_bench(&cfg, &mut |_| {}).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 2);
    let summary = summarize_bench(&rows);
    let names: Vec<&str> = summary.iter().map(|s| s.method.as_str()).collect();
    assert_eq!(names, ["prr", "prr-rank", "ips"]);
    assert!(summary.iter().all(|s| s.mean_epoch_ms > 0.0));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = tiny_config();
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert!(ExperimentConfig::from_toml("bogus_key = 1").is_err());
}
