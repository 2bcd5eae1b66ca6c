//! Tick-by-tick reference replay.
//!
//! Shares no trigger, queue or orchestrator code with the event-driven
//! simulator: the repository is a commit counter, and every rule is checked
//! literally at each millisecond.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use super::{SimBuild, SimError, SimReport, Simulation, TraceCommit};
use crate::metrics::{DepthSample, MetricsReport, Ratio};
use crate::model::{BuildCause, Detection, TriggerPolicy};
use crate::time::{Duration, Instant, DAY_MS};

struct Request {
    cause: BuildCause,
    changes: Vec<u64>,
    target: u64,
}

struct Running {
    run_id: u64,
    started: u64,
    ends: u64,
    request: Request,
}

/// Replays `trace` against `sim`'s policy one millisecond at a time.
pub fn brute_force_replay_with(sim: &Simulation, trace: &[TraceCommit]) -> Result<SimReport, SimError> {
    sim.check(trace)?;
    let duration = sim.build_duration.0;

    let (hooked, poll_every, quiet, daily, every) = match &sim.policy {
        TriggerPolicy::Triggered { detection: Detection::Hooked {}, quiet_period } => {
            (true, None, Some(quiet_period.0), Vec::new(), None)
        }
        TriggerPolicy::Triggered { detection: Detection::Polled { interval }, quiet_period } => {
            (false, Some(interval.0), Some(quiet_period.0), Vec::new(), None)
        }
        TriggerPolicy::Scheduled(s) => {
            let daily: Vec<u64> = s.daily_times.iter().map(|t| t.offset_ms()).collect();
            (false, None, None, daily, s.every.map(|e| e.0))
        }
        TriggerPolicy::Levered {} => return Err(SimError::LeveredPolicy),
    };

    let mut applied: u64 = 0; // head seq
    let mut integrated: u64 = 0;
    let mut requested: u64 = 0;
    let mut pending: Vec<(u64, u64)> = Vec::new(); // (seq, arrived)
    let mut queue: VecDeque<Request> = VecDeque::new();
    let mut running: Option<Running> = None;
    let mut last_end: Option<u64> = None;
    let mut last_fire: u64 = 0;
    let mut next_run_id = 1;

    let mut builds = Vec::new();
    let mut samples = Vec::new();
    let mut last_depth = 0;

    let coalesce = |t: u64, pending: &mut Vec<(u64, u64)>, queue: &mut VecDeque<Request>, running: &Option<Running>, last_end: Option<u64>| {
        let Some(quiet) = quiet else { return };
        if running.is_some() || pending.is_empty() {
            return;
        }
        let first_arrival = pending[0].1;
        let earliest = match last_end {
            Some(end) => first_arrival.max(end + quiet),
            None => first_arrival,
        };
        if t < earliest {
            return;
        }
        let take = if quiet == 0 && hooked { 1 } else { pending.len() };
        let changes: Vec<u64> = pending.drain(..take).map(|(seq, _)| seq).collect();
        let cause = if hooked {
            BuildCause::HookNotified { received_time: Instant(first_arrival) }
        } else {
            BuildCause::PollDetected { poll_time: Instant(first_arrival) }
        };
        let target = changes[changes.len() - 1];
        queue.push_back(Request { cause, changes, target });
    };
    let start = |t: u64, queue: &mut VecDeque<Request>, running: &mut Option<Running>, next_run_id: &mut u64| {
        if running.is_none() {
            if let Some(request) = queue.pop_front() {
                *running = Some(Running { run_id: *next_run_id, started: t, ends: t + duration, request });
                *next_run_id += 1;
            }
        }
    };

    let mut next_commit = 0;
    let mut t: u64 = 0;
    loop {
        if next_commit == trace.len() && integrated == applied {
            break;
        }
        if sim.horizon.is_some_and(|h| t > h.0) {
            break;
        }

        // Commits land first.
        let mut landed = 0;
        while next_commit < trace.len() && trace[next_commit].at.0 == t {
            applied += 1;
            next_commit += 1;
            landed += 1;
        }

        // Then the build ending now reports back.
        if running.as_ref().is_some_and(|r| r.ends == t) {
            let done = running.take().unwrap();
            builds.push(SimBuild {
                run_id: done.run_id,
                cause: done.request.cause,
                started_at: Instant(done.started),
                ended_at: Instant(done.ends),
                changes: done.request.changes,
                target_seq: done.request.target,
            });
            integrated = integrated.max(done.request.target);
            last_end = Some(t);
            coalesce(t, &mut pending, &mut queue, &running, last_end);
            start(t, &mut queue, &mut running, &mut next_run_id);
        }

        // One hook per landed commit.
        if hooked {
            for _ in 0..landed {
                if applied > requested {
                    pending.extend((requested + 1..=applied).map(|seq| (seq, t)));
                    requested = applied;
                }
                coalesce(t, &mut pending, &mut queue, &running, last_end);
                start(t, &mut queue, &mut running, &mut next_run_id);
            }
        }

        // Timers.
        if let Some(interval) = poll_every {
            if t > 0 && t % interval == 0 && applied > requested {
                pending.extend((requested + 1..=applied).map(|seq| (seq, t)));
                requested = applied;
            }
        }
        let daily_due = daily.iter().any(|offset| t % DAY_MS == *offset);
        let every_due = every.is_some_and(|e| t == last_fire + e);
        if quiet.is_none() && t > 0 && (daily_due || every_due) {
            queue.push_back(Request {
                cause: BuildCause::ScheduleFire { fire_time: Instant(t) },
                changes: Vec::new(),
                target: applied,
            });
            requested = requested.max(applied);
            last_fire = t;
        }
        coalesce(t, &mut pending, &mut queue, &running, last_end);
        start(t, &mut queue, &mut running, &mut next_run_id);

        let backlog = match pending.len() {
            0 => 0,
            n if quiet == Some(0) && hooked => n,
            _ => 1,
        };
        let depth = queue.len() + backlog;
        if depth != last_depth {
            samples.push(DepthSample { at: Instant(t), depth });
            last_depth = depth;
        }
        t += 1;
    }

    let latencies: Vec<u64> = builds
        .iter()
        .flat_map(|b| b.changes.iter().map(move |seq| b.ended_at.0 - trace[*seq as usize - 1].at.0))
        .collect();
    let n_builds = builds.len();
    let n_changes = latencies.len();
    let metrics = MetricsReport {
        n_builds,
        n_changes,
        changes_per_build: (n_builds > 0).then(|| Ratio { numerator: n_changes as u64, denominator: n_builds as u64 }),
        mean_latency: (n_changes > 0).then(|| Duration(latencies.iter().sum::<u64>() / n_changes as u64)),
        max_latency: latencies.iter().max().map(|m| Duration(*m)),
        max_queue_depth: samples.iter().map(|s| s.depth).max().unwrap_or(0),
    };
    Ok(SimReport { metrics, builds, queue_depth: samples })
}
