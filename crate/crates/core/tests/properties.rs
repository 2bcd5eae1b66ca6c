use std::collections::BTreeMap;

use buildherd_core::model::{Maturity, Mode, TriggerKind};
use buildherd_core::orchestrator::{drive, Event, Orchestrator, Scripted, Until};
use buildherd_core::pipeline::{run_pipeline, OnFailure, OnSuccess, StubRunner, DEFAULT_OUTPUT_CAP};
use buildherd_core::sim::Simulation;
use buildherd_core::triggers::{next_fire, CoalescerState, DetectionKind};
use buildherd_core::*;
use proptest::prelude::*;

// ---- classification ----

fn policy_strategy() -> impl Strategy<Value = TriggerPolicy> {
    prop_oneof![
        Just(TriggerPolicy::levered()),
        (1u64..100_000).prop_map(|e| TriggerPolicy::Scheduled(Schedule::every(Duration(e)))),
        (1u64..100_000, 0u64..10_000).prop_map(|(i, q)| TriggerPolicy::polled(Duration(i), Duration(q))),
        (0u64..10_000).prop_map(|q| TriggerPolicy::hooked(Duration(q))),
    ]
}

proptest! {
    #[test]
    fn strict_iff_triggered_without_quiet_period(policy in policy_strategy()) {
        let label = classify(&policy);
        let triggered_zero = matches!(policy, TriggerPolicy::Triggered { quiet_period, .. } if quiet_period.is_zero());
        prop_assert_eq!(label.maturity == Maturity::Strict, triggered_zero);
        if label.mode == Mode::OnDemand {
            prop_assert_eq!((label.maturity, label.trigger_kind), (Maturity::None, TriggerKind::None));
        }
        if label.maturity == Maturity::Strict {
            prop_assert!(matches!(label.trigger_kind, TriggerKind::Polled | TriggerKind::Hooked));
        }
        prop_assert_eq!(label, classify(&policy.clone()));
    }
}

// ---- pipeline ----

#[derive(Clone, Debug)]
struct StepPlan {
    fails: bool,
    on_success: u8,
    on_failure: u8,
    jump: usize,
}

fn definition_strategy() -> impl Strategy<Value = BuildDefinition> {
    prop::collection::vec((any::<bool>(), 0u8..3, 0u8..3, 0usize..8), 1..=8).prop_map(|raw| {
        let n = raw.len();
        let plans: Vec<StepPlan> =
            raw.into_iter().map(|(fails, on_success, on_failure, jump)| StepPlan { fails, on_success, on_failure, jump }).collect();
        let steps = plans
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let later = (i + 1 < n).then(|| format!("s{}", i + 1 + p.jump % (n - i - 1)));
                let on_success = match (p.on_success, &later) {
                    (1, Some(t)) => OnSuccess::Goto(t.clone()),
                    (2, _) => OnSuccess::StopSuccess,
                    _ => OnSuccess::Continue,
                };
                let on_failure = match (p.on_failure, &later) {
                    (1, Some(t)) => OnFailure::Goto(t.clone()),
                    (2, _) => OnFailure::ContinueAnyway,
                    _ => OnFailure::Halt,
                };
                let command = if p.fails { Command::Fail { exit_code: 1 } } else { Command::Succeed };
                BuildStep { name: format!("s{i}"), command, on_success, on_failure }
            })
            .collect();
        BuildDefinition { project_id: "p".into(), steps }
    })
}

/// Walks the goto graph by name, one step at a time.
fn naive_walk(def: &BuildDefinition) -> (Vec<String>, Option<String>) {
    let mut visited = Vec::new();
    let mut first_failure = None;
    let mut at = Some(0usize);
    while let Some(i) = at {
        let step = &def.steps[i];
        visited.push(step.name.clone());
        let failed = matches!(step.command, Command::Fail { .. });
        if failed && first_failure.is_none() {
            first_failure = Some(step.name.clone());
        }
        let find = |name: &str| def.steps.iter().position(|s| s.name == name);
        let fallthrough = (i + 1 < def.steps.len()).then_some(i + 1);
        at = if failed {
            match &step.on_failure {
                OnFailure::Halt => None,
                OnFailure::Goto(t) => find(t),
                OnFailure::ContinueAnyway => fallthrough,
            }
        } else {
            match &step.on_success {
                OnSuccess::Continue => fallthrough,
                OnSuccess::Goto(t) => find(t),
                OnSuccess::StopSuccess => None,
            }
        };
    }
    (visited, first_failure)
}

fn request() -> BuildRequest {
    BuildRequest {
        cause: BuildCause::Commanded { actor: "t".into() },
        changes: vec![],
        target_revision: Revision::initial(),
        created_at: Instant(0),
    }
}

fn execute(def: &BuildDefinition) -> BuildRun {
    let clock = ManualClock::new(Instant(0));
    let mut runner = StubRunner::new(&clock);
    run_pipeline(def, 1, request(), &mut runner, &clock, DEFAULT_OUTPUT_CAP)
}

proptest! {
    #[test]
    fn pipeline_matches_naive_goto_walk(def in definition_strategy()) {
        prop_assert!(pipeline::validate_definition(&def).is_ok());
        let run = execute(&def);
        let names: Vec<String> = run.step_results.iter().map(|r| r.step_name.clone()).collect();
        let (expected, first_failure) = naive_walk(&def);
        prop_assert_eq!(&names, &expected);
        prop_assert!(names.len() <= def.steps.len());
        match first_failure {
            Some(step_name) => prop_assert_eq!(&run.outcome, &RunOutcome::Failed { step_name }),
            None => prop_assert_eq!(&run.outcome, &RunOutcome::Success),
        }
        if run.outcome == RunOutcome::Success {
            prop_assert!(run.step_results.iter().all(|r| r.status == StepStatus::Succeeded));
        }
        let again = execute(&def);
        prop_assert_eq!(run, again);
    }
}

// ---- vcs ----

proptest! {
    #[test]
    fn in_memory_history_is_consistent(gaps in prop::collection::vec(0u64..50, 0..40), cut in any::<prop::sample::Index>()) {
        let mut repo = InMemoryRepo::new("r");
        let mut t = 0;
        for gap in &gaps {
            t += gap;
            repo.commit("dev", vec!["f".into()], Instant(t)).unwrap();
        }
        let head = repo.head().unwrap();
        prop_assert_eq!(head.seq, gaps.len() as u64);
        prop_assert!(repo.changes_since(&head).unwrap().is_empty());

        let all = repo.changes_since(&Revision::initial()).unwrap();
        let mid = if all.is_empty() { Revision::initial() } else { all[cut.index(all.len())].revision.clone() };
        let mut joined = repo.changes_since(&Revision::initial()).unwrap();
        joined.truncate(mid.seq as usize);
        joined.extend(repo.changes_since(&mid).unwrap());
        prop_assert_eq!(joined, all);
    }
}

// ---- triggers ----

#[derive(Clone, Debug)]
enum CoalescerOp {
    Commit,
    Ping(u8),
    Tick(u64),
    FinishBuild,
}

fn coalescer_ops() -> impl Strategy<Value = Vec<CoalescerOp>> {
    prop::collection::vec(
        prop_oneof![
            Just(CoalescerOp::Commit),
            (0u8..6).prop_map(CoalescerOp::Ping),
            (0u64..20).prop_map(CoalescerOp::Tick),
            Just(CoalescerOp::FinishBuild),
        ],
        0..80,
    )
}

proptest! {
    #[test]
    fn coalescer_conserves_and_spaces(ops in coalescer_ops(), quiet in 0u64..15, hooked in any::<bool>()) {
        let detection = if hooked { DetectionKind::Hooked } else { DetectionKind::Polled };
        let mut state = CoalescerState::new(detection, Duration(quiet));
        let mut repo = InMemoryRepo::new("r");
        let mut now = 0;
        let mut running = false;
        let mut emitted: Vec<u64> = Vec::new();
        let mut requests = 0;
        let mut watermark = Revision::initial();
        for op in &ops {
            match op {
                CoalescerOp::Commit => {
                    repo.commit("dev", vec!["f".into()], Instant(now)).unwrap();
                }
                CoalescerOp::Ping(n) => {
                    let nonce = format!("n{n}");
                    let ping = HookNotification { repo_id: "r".into(), received_at: Instant(now), claimed_revision: None, nonce };
                    let before = state.clone();
                    let outcome = state.ingest_notification(&ping, &repo, &watermark).unwrap();
                    if outcome == triggers::IngestOutcome::Duplicate {
                        prop_assert_eq!(&state, &before);
                    } else {
                        watermark = repo.head().unwrap();
                    }
                    // Replay is a no-op.
                    let snapshot = state.clone();
                    state.ingest_notification(&ping, &repo, &watermark).unwrap();
                    prop_assert_eq!(&state, &snapshot);
                }
                CoalescerOp::Tick(dt) => now += dt,
                CoalescerOp::FinishBuild => {
                    if running {
                        state.note_build_end(Instant(now));
                        running = false;
                    }
                }
            }
            let pending_seqs: Vec<u64> = state.pending().iter().map(|p| p.change.revision.seq).collect();
            prop_assert!(pending_seqs.windows(2).all(|w| w[0] < w[1]));
            if let Some(req) = state.coalesce(Instant(now), running) {
                if let Some(end) = state.last_build_end() {
                    prop_assert!(now >= end.0 + quiet, "emitted at {} before quiet end {}", now, end.0 + quiet);
                }
                if quiet == 0 && hooked {
                    prop_assert_eq!(req.changes.len(), 1);
                }
                emitted.extend(req.changes.iter().map(|c| c.revision.seq));
                requests += 1;
                running = true;
            }
        }
        // Drain what is left.
        loop {
            now += 1000;
            if std::mem::take(&mut running) {
                state.note_build_end(Instant(now));
            }
            match state.coalesce(Instant(now + 1000), false) {
                Some(req) => {
                    emitted.extend(req.changes.iter().map(|c| c.revision.seq));
                    requests += 1;
                    running = true;
                    now += 1000;
                }
                None => break,
            }
        }
        // Every change pulled by some ping is emitted exactly once, in order.
        let pulled: Vec<u64> = (1..=watermark.seq).collect();
        prop_assert_eq!(&emitted, &pulled);
        if quiet == 0 && hooked {
            prop_assert_eq!(requests, emitted.len());
        }
    }

    #[test]
    fn next_fire_is_strictly_later(every in 1u64..10_000_000, now in 0u64..1_000_000_000, minutes in prop::collection::btree_set(0u16..1440, 0..4)) {
        let daily: Vec<TimeOfDay> = minutes.iter().map(|m| TimeOfDay::new((m / 60) as u8, (m % 60) as u8).unwrap()).collect();
        let with_daily = Schedule { daily_times: daily, every: None };
        if let Some(next) = next_fire(&with_daily, Instant(now)) {
            prop_assert!(next > Instant(now));
            prop_assert!(next.0 - now <= time::DAY_MS);
        }
        let interval = Schedule::every(Duration(every));
        let mut at = Instant(now);
        for k in 1..=5u64 {
            at = next_fire(&interval, at).unwrap();
            prop_assert_eq!(at, Instant(now + k * every));
        }
    }
}

// ---- orchestrator ----

fn script_strategy() -> impl Strategy<Value = Vec<(u64, u8)>> {
    // (gap before the input, kind): 0 commit+hook, 1 commit only, 2 command, 3 clock
    prop::collection::vec((0u64..40, 0u8..4), 0..50)
}

fn to_script(raw: &[(u64, u8)]) -> Vec<Scripted> {
    let mut t = 0;
    let mut script = Vec::new();
    for (i, (gap, kind)) in raw.iter().enumerate() {
        t += gap;
        let commit = Scripted::Commit { project_id: "p".into(), author: "dev".into(), paths: vec!["f".into()], at: Instant(t) };
        let hook = Scripted::Event(Event::HookReceived(HookNotification {
            repo_id: "r".into(),
            received_at: Instant(t),
            claimed_revision: None,
            nonce: format!("h{i}"),
        }));
        match kind {
            0 => script.extend([commit, hook]),
            1 => script.push(commit),
            2 => script.push(Scripted::Event(Event::CommandReceived { actor: "op".into(), project_id: "p".into(), at: Instant(t) })),
            _ => script.push(Scripted::Event(Event::ClockAdvanced { now: Instant(t) })),
        }
    }
    script
}

fn replay(policy: &TriggerPolicy, script: Vec<Scripted>) -> (Vec<BuildRun>, bool, bool) {
    let mut orch = Orchestrator::new(Instant::ZERO);
    let def = BuildDefinition { project_id: "p".into(), steps: vec![BuildStep::new("b", Command::Sleep { duration: Duration(25) })] };
    orch.add_project(policy.clone(), def, InMemoryRepo::new("r")).unwrap();
    let mut serialized = true;
    let mut monotone = true;
    let mut last_seq = 0;
    let runs = drive(
        &mut orch,
        script,
        Some(Instant(100_000)),
        Until::Quiescent,
        |repo, a, p, at| repo.commit(a, p, at).map(|_| ()),
        |orch, _| {
            let p = orch.project("p").unwrap();
            serialized &= p.running.is_none() || p.queue.iter().all(|r| r.created_at <= orch.now());
            monotone &= p.last_integrated.seq >= last_seq;
            last_seq = p.last_integrated.seq;
        },
    );
    (runs, serialized, monotone)
}

proptest! {
    #[test]
    fn orchestrator_serializes_and_replays(raw in script_strategy(), policy in policy_strategy()) {
        let (runs, serialized, monotone) = replay(&policy, to_script(&raw));
        prop_assert!(serialized);
        prop_assert!(monotone);
        // One build at a time: runs never overlap.
        for w in runs.windows(2) {
            prop_assert!(w[0].ended_at <= w[1].started_at);
        }
        let (again, _, _) = replay(&policy, to_script(&raw));
        prop_assert_eq!(runs, again);
    }

    #[test]
    fn strict_hooked_builds_every_commit(gaps in prop::collection::vec(0u64..40, 0..50)) {
        let raw: Vec<(u64, u8)> = gaps.iter().map(|g| (*g, 0)).collect();
        let (runs, _, _) = replay(&TriggerPolicy::hooked(Duration::ZERO), to_script(&raw));
        prop_assert_eq!(runs.len(), gaps.len());
        let seqs: Vec<u64> = runs.iter().map(|r| { assert_eq!(r.request.changes.len(), 1); r.request.changes[0].revision.seq }).collect();
        prop_assert_eq!(seqs, (1..=gaps.len() as u64).collect::<Vec<_>>());
    }
}

// ---- simulator ----

fn trace_strategy() -> impl Strategy<Value = CommitTrace> {
    prop::collection::vec(0u64..3000, 0..=30).prop_map(|gaps| {
        let mut t = 0;
        gaps.into_iter()
            .enumerate()
            .map(|(i, g)| {
                t += g;
                TraceCommit::new(t, &format!("dev{}", i % 3), "src/lib.rs")
            })
            .collect()
    })
}

fn sim_policy_strategy() -> impl Strategy<Value = TriggerPolicy> {
    prop_oneof![
        (0u64..6000).prop_map(|q| TriggerPolicy::hooked(Duration(q))),
        (1u64..4000, 0u64..6000).prop_map(|(i, q)| TriggerPolicy::polled(Duration(i), Duration(q))),
        (100u64..8000).prop_map(|e| TriggerPolicy::Scheduled(Schedule::every(Duration(e)))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn simulator_matches_tick_replay(trace in trace_strategy(), policy in sim_policy_strategy(), dur in 1u64..5000) {
        let sim = Simulation::new(policy.clone(), Duration(dur)).with_horizon(Instant(1_000_000));
        let fast = sim.run(&trace).unwrap();
        prop_assert_eq!(&fast, &sim.brute_force(&trace).unwrap());

        if let TriggerPolicy::Triggered { quiet_period, .. } = policy {
            let mut seen: Vec<u64> = fast.builds.iter().flat_map(|b| b.changes.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (1..=trace.len() as u64).collect::<Vec<_>>());
            prop_assert!(fast.metrics.n_builds <= trace.len());
            for w in fast.builds.windows(2) {
                prop_assert!(w[1].started_at.0 >= w[0].ended_at.0 + quiet_period.0);
            }
        }
        if let (Some(mean), Some(max)) = (fast.metrics.mean_latency, fast.metrics.max_latency) {
            prop_assert!(mean <= max);
        }
    }
}

#[test]
fn classify_covers_exactly_the_taxonomy_leaves() {
    let mut leaves = BTreeMap::new();
    for policy in [
        TriggerPolicy::levered(),
        TriggerPolicy::Scheduled(Schedule::every(Duration(1))),
        TriggerPolicy::polled(Duration(1), Duration::ZERO),
        TriggerPolicy::polled(Duration(1), Duration(1)),
        TriggerPolicy::hooked(Duration::ZERO),
        TriggerPolicy::hooked(Duration(1)),
    ] {
        leaves.insert(classify(&policy).to_string(), ());
    }
    let got: Vec<&str> = leaves.keys().map(String::as_str).collect();
    assert_eq!(
        got,
        [
            "Continual/Strict/Hooked",
            "Continual/Strict/Polled",
            "Continual/Transitional/Hooked",
            "Continual/Transitional/Polled",
            "Continual/Transitional/Scheduled",
            "OnDemand/None/None",
        ]
    );
}
