mod common;

use std::fs;
use std::io::Write;

use buildherd::history::{read_history, HistoryError, HistoryFilter, HistoryStore};
use buildherd_core::model::{OutcomeKind, RunOutcome};
use buildherd_core::{BuildRun, Instant};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;

fn sample_runs(n: usize) -> Vec<BuildRun> {
    let mut runner = TestRunner::deterministic();
    common::numbered_runs(n).new_tree(&mut runner).unwrap().current()
}

#[test]
fn empty_store_has_a_header_and_no_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    let store = HistoryStore::open(&path).unwrap();
    assert!(store.runs().unwrap().is_empty());
    assert_eq!(fs::read_to_string(&path).unwrap(), "{\"format\":\"buildherd-history\",\"version\":1}\n");
    assert!(read_history(&dir.path().join("missing.jsonl")).unwrap().is_empty());
}

#[test]
fn append_then_read() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = HistoryStore::open(dir.path().join("h.jsonl")).unwrap();
    let runs = sample_runs(1);
    store.append(&runs[0]).unwrap();
    assert_eq!(store.runs().unwrap(), runs);
}

#[test]
fn run_ids_must_increase() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = HistoryStore::open(dir.path().join("h.jsonl")).unwrap();
    let runs = sample_runs(3);
    store.append(&runs[0]).unwrap();
    store.append(&runs[2]).unwrap();
    assert!(matches!(store.append(&runs[2]), Err(HistoryError::DuplicateRunId(3))));
    assert!(matches!(store.append(&runs[0]), Err(HistoryError::DuplicateRunId(1))));
    assert!(matches!(store.append(&runs[1]), Err(HistoryError::RunIdRegression { run_id: 2, last: 3 })));
    assert_eq!(store.runs().unwrap().len(), 2);
}

#[test]
fn appends_survive_reopening() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    let runs = sample_runs(5);
    {
        let mut store = HistoryStore::open(&path).unwrap();
        for run in &runs[..3] {
            store.append(run).unwrap();
        }
    }
    let mut store = HistoryStore::open(&path).unwrap();
    assert_eq!(store.last_run_id(), Some(3));
    assert!(matches!(store.append(&runs[2]), Err(HistoryError::DuplicateRunId(3))));
    for run in &runs[3..] {
        store.append(run).unwrap();
    }
    assert_eq!(store.runs().unwrap(), runs);
}

#[test]
fn appending_never_rewrites_earlier_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    let mut store = HistoryStore::open(&path).unwrap();
    let mut previous = fs::read(&path).unwrap();
    for run in sample_runs(10) {
        store.append(&run).unwrap();
        let now = fs::read(&path).unwrap();
        assert!(now.starts_with(&previous));
        assert!(now.ends_with(b"\n"));
        previous = now;
    }
}

#[test]
fn query_filters_by_project_outcome_and_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = HistoryStore::open(dir.path().join("h.jsonl")).unwrap();
    let runs = sample_runs(40);
    for run in &runs {
        store.append(run).unwrap();
    }
    assert_eq!(store.query(&HistoryFilter::default()).unwrap(), runs);

    let failed = store.query(&HistoryFilter { outcome: Some(OutcomeKind::Failed), ..Default::default() }).unwrap();
    assert!(failed.iter().all(|r| matches!(r.outcome, RunOutcome::Failed { .. })));
    assert_eq!(failed.len(), runs.iter().filter(|r| r.outcome.kind() == OutcomeKind::Failed).count());

    let p1 = store.query(&HistoryFilter::project("p1")).unwrap();
    assert!(p1.iter().all(|r| r.project_id == "p1"));
    assert!(p1.windows(2).all(|w| w[0].run_id < w[1].run_id));

    let none = HistoryFilter { from: Some(Instant(u64::MAX - 1)), ..Default::default() };
    assert!(store.query(&none).unwrap().is_empty());
    let mid = runs[20].started_at;
    let window = HistoryFilter { from: Some(mid), to: Some(mid), ..Default::default() };
    assert!(store.query(&window).unwrap().iter().all(|r| r.started_at == mid));
    assert!(!store.query(&window).unwrap().is_empty());
}

#[test]
fn binary_output_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    let mut store = HistoryStore::open(&path).unwrap();
    let mut run = sample_runs(1).remove(0);
    run.step_results = vec![buildherd_core::StepResult {
        step_name: "bin".into(),
        status: buildherd_core::StepStatus::Succeeded,
        captured_output: vec![0xff, 0x00, 0xfe, b'a'],
        output_truncated: true,
        duration: buildherd_core::Duration(3),
    }];
    store.append(&run).unwrap();
    assert!(fs::read_to_string(&path).unwrap().contains("\"output_base64\":\"/wD+YQ==\""));
    assert_eq!(store.runs().unwrap(), vec![run]);
}

#[test]
fn a_torn_last_line_is_invisible_and_dropped_on_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    let runs = sample_runs(2);
    {
        let mut store = HistoryStore::open(&path).unwrap();
        store.append(&runs[0]).unwrap();
    }
    fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"run_id\":2,\"proj").unwrap();
    assert_eq!(read_history(&path).unwrap(), runs[..1]);
    let mut store = HistoryStore::open(&path).unwrap();
    store.append(&runs[1]).unwrap();
    assert_eq!(store.runs().unwrap(), runs);
}

#[test]
fn foreign_files_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    fs::write(&path, "{\"format\":\"other\",\"version\":1}\n").unwrap();
    assert!(matches!(HistoryStore::open(&path), Err(HistoryError::BadHeader { .. })));
    fs::write(&path, "{\"format\":\"buildherd-history\",\"version\":1}\nnot json\n").unwrap();
    assert!(matches!(read_history(&path), Err(HistoryError::Corrupt { line: 2, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn append_then_query_returns_equal_runs(runs in common::numbered_runs(12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        let mut store = HistoryStore::open(&path).unwrap();
        for run in &runs {
            store.append(run).unwrap();
        }
        prop_assert_eq!(&HistoryStore::open(&path).unwrap().runs().unwrap(), &runs);
    }
}
