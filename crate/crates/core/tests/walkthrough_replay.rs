use std::path::PathBuf;

use specpipe::models::{ModelHandle, MultimodalPrefix, ScriptSpec};
use specpipe::pipeline::{
    check_trace, run_concurrent_backend, run_pipeline, EventKind, EventTrace, Mode, Pipeline, PipelineConfig,
    TimingModel,
};
use specpipe::primitives::SeededRng;

fn testdata(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name)
}

fn setup() -> (ScriptSpec, ModelHandle, ModelHandle, MultimodalPrefix, TimingModel, PipelineConfig) {
    let spec = ScriptSpec::load(&testdata("walkthrough_script.json")).unwrap();
    let (draft, target) = ModelHandle::scripted_pair(spec.clone());
    // One draft forward is the time unit; the target is three times slower.
    let timing = TimingModel::constant(1.0, 3.0);
    let config = PipelineConfig::new(3, 0.0, 7);
    (spec, draft, target, MultimodalPrefix::synthetic(16, 4, 0), timing, config)
}

fn words(spec: &ScriptSpec, ids: &[u32]) -> String {
    ids.iter().map(|&i| spec.word(i)).collect::<Vec<_>>().join(" ")
}

#[test]
fn replay_emits_the_sentence_in_three_spans() {
    let (spec, draft, target, prefix, timing, config) = setup();
    let (tokens, stats, trace) = run_pipeline(&draft, &target, &prefix, &timing, &config, &SeededRng::new(0)).unwrap();
    assert_eq!(words(&spec, tokens.ids()), "The video uses Parallel VLM for speedup");
    let summary = check_trace(&trace).unwrap();
    assert_eq!(summary.verification_spans, 3);
    assert_eq!(summary.max_accepted_run, 5);
    assert_eq!(stats.max_accepted_run, 5);
    assert_eq!(stats.decode_ms, 9.0);
    assert_eq!(stats.rollback_count, 2);
    let rollbacks: Vec<_> = trace.of_kind(EventKind::Rollback).map(|e| (e.ts_ms, e.payload["to"].as_u64().unwrap())).collect();
    assert_eq!(rollbacks, vec![(6.0, 6), (9.0, 7)]);
}

#[test]
fn replay_matches_golden_trace() {
    let (_, draft, target, prefix, timing, config) = setup();
    let (_, _, trace) = run_pipeline(&draft, &target, &prefix, &timing, &config, &SeededRng::new(0)).unwrap();
    let path = testdata("walkthrough_trace.jsonl");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, trace.to_jsonl()).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert_eq!(trace.to_jsonl(), golden);
    assert_eq!(EventTrace::from_jsonl(&golden).unwrap(), trace);
}

#[test]
fn stepping_follows_the_walkthrough() {
    let (spec, draft, target, prefix, timing, config) = setup();
    let mut p = Pipeline::start(&draft, &target, &prefix, &timing, &config, &SeededRng::new(0)).unwrap();
    // "The" accepted by the initial Pre-verify.
    assert_eq!(p.state().mode, Mode::PostVerify);
    assert_eq!(words(&spec, p.state().accepted.ids()), "The");
    assert!(p.step_pre_verify().is_err());
    p.step_post_verify().unwrap();
    assert_eq!(p.state().mode, Mode::PostVerify);
    assert_eq!(p.state().clock_target, 3.0);
    p.step_post_verify().unwrap();
    assert_eq!(p.state().mode, Mode::PreVerify);
    assert_eq!(words(&spec, p.state().accepted.ids()), "The video uses Parallel VLM for");
    assert_eq!(p.state().draft_cursor, 6);
    p.step_pre_verify().unwrap();
    assert_eq!(p.state().mode, Mode::PreVerify);
    assert_eq!(p.state().clock_target, 9.0);
    assert!(p.is_done());
}

#[test]
fn concurrent_backend_replays_the_same_sentence() {
    let (spec, draft, target, prefix, timing, config) = setup();
    let (tokens, stats) = run_concurrent_backend(&draft, &target, &prefix, &timing, &config, &SeededRng::new(0)).unwrap();
    assert_eq!(words(&spec, tokens.ids()), "The video uses Parallel VLM for speedup");
    assert!(stats.wall_clock_ms.is_some());
}
