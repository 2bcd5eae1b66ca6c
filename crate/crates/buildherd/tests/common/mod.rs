#![allow(dead_code)]

use buildherd_core::model::{BuildCause, BuildRequest, Change, Revision, RunOutcome};
use buildherd_core::{BuildRun, Duration, Instant, StepResult, StepStatus};
use proptest::prelude::*;

fn cause() -> impl Strategy<Value = BuildCause> {
    prop_oneof![
        "[a-z]{1,8}".prop_map(|actor| BuildCause::Commanded { actor }),
        any::<u32>().prop_map(|t| BuildCause::ScheduleFire { fire_time: Instant(t as u64) }),
        any::<u32>().prop_map(|t| BuildCause::PollDetected { poll_time: Instant(t as u64) }),
        any::<u32>().prop_map(|t| BuildCause::HookNotified { received_time: Instant(t as u64) }),
    ]
}

fn step() -> impl Strategy<Value = StepResult> {
    let output = prop_oneof![
        "[ -~\n]{0,40}".prop_map(String::into_bytes),
        "\\PC{0,10}".prop_map(String::into_bytes),
        prop::collection::vec(any::<u8>(), 0..40),
    ];
    ("[a-z-]{1,10}", prop::option::of(1i32..255), output, any::<bool>(), 0u64..100_000).prop_map(
        |(step_name, failed, captured_output, output_truncated, ms)| StepResult {
            step_name,
            status: failed.map_or(StepStatus::Succeeded, |exit_code| StepStatus::Failed { exit_code }),
            captured_output,
            output_truncated,
            duration: Duration(ms),
        },
    )
}

fn outcome() -> impl Strategy<Value = RunOutcome> {
    prop_oneof![
        Just(RunOutcome::Success),
        "[a-z]{1,8}".prop_map(|step_name| RunOutcome::Failed { step_name }),
        ".{0,20}".prop_map(|reason| RunOutcome::Errored { reason }),
    ]
}

/// A run with arbitrary content; `run_id` is left at 0.
pub fn build_run() -> impl Strategy<Value = BuildRun> {
    let changes = prop::collection::vec(("[a-z]{1,6}", prop::collection::vec("[a-z/._ ]{1,12}", 1..3)), 0..4);
    (
        prop::sample::select(vec!["p1", "p2", "p3"]),
        cause(),
        changes,
        0u64..1_000_000,
        0u64..10_000,
        prop::collection::vec(step(), 0..4),
        outcome(),
    )
        .prop_map(|(project, cause, changes, created, took, step_results, outcome)| {
            let changes: Vec<Change> = changes
                .into_iter()
                .enumerate()
                .map(|(i, (author, changed_paths))| Change {
                    revision: Revision::new(format!("{:016x}", i * 7919), i as u64 + 1),
                    author,
                    timestamp: Instant(i as u64 * 10),
                    changed_paths,
                })
                .collect();
            let target_revision = changes.last().map_or_else(Revision::initial, |c| c.revision.clone());
            BuildRun {
                run_id: 0,
                project_id: project.into(),
                request: BuildRequest { cause, changes, target_revision, created_at: Instant(created) },
                started_at: Instant(created + 1),
                ended_at: Instant(created + 1 + took),
                step_results,
                outcome,
            }
        })
}

/// `n` runs numbered 1..=n.
pub fn numbered_runs(n: usize) -> impl Strategy<Value = Vec<BuildRun>> {
    prop::collection::vec(build_run(), n).prop_map(|mut runs| {
        for (i, run) in runs.iter_mut().enumerate() {
            run.run_id = i as u64 + 1;
        }
        runs
    })
}
