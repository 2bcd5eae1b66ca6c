//! Deterministic replay of a scripted event sequence against an
//! [`Orchestrator`], executing builds with stub steps on a simulated clock.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Action, Event, Orchestrator};
use crate::model::BuildRun;
use crate::pipeline::{run_pipeline, StubRunner, DEFAULT_OUTPUT_CAP};
use crate::time::{Instant, ManualClock};
use crate::vcs::{Repository, VcsError};

/// When a replay is over, checked between instants once the script is
/// exhausted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Until {
    /// No build running or queued and every change requested.
    #[default]
    Quiescent,
    /// Every project has integrated its head, whatever is still queued.
    Integrated,
}

/// One timed input of a replay script.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scripted {
    /// A developer change landing in a project's repository.
    Commit { project_id: String, author: String, paths: Vec<String>, at: Instant },
    Event(Event),
}

impl Scripted {
    pub fn time(&self) -> Instant {
        match self {
            Scripted::Commit { at, .. } => *at,
            Scripted::Event(e) => e.time(),
        }
    }
}

/// Replays `events` (time-ordered) until nothing is left to do and
/// returns the finished runs in completion order.
pub fn run_until_idle<R: Repository>(orch: &mut Orchestrator<R>, events: Vec<Event>) -> Vec<BuildRun> {
    let script = events.into_iter().map(Scripted::Event).collect();
    drive(orch, script, None, Until::Quiescent, |_, _, _, _| Ok(()), |_, _| {})
}

/// Runs the event loop over `script`.
///
/// Instants are visited in order. At each instant the loop applies, in
/// this order: scripted commits, finished builds, scripted events, and a
/// final [`Event::ClockAdvanced`]. Between scripted inputs it jumps
/// straight to the next build end or timer the orchestrator reports.
/// `observe` sees the orchestrator after every visited instant.
///
/// The replay stops once the script is exhausted and the `until` condition
/// holds, or before the first instant past `horizon`.
pub fn drive<R, C, O>(
    orch: &mut Orchestrator<R>,
    script: Vec<Scripted>,
    horizon: Option<Instant>,
    until: Until,
    mut commit: C,
    mut observe: O,
) -> Vec<BuildRun>
where
    R: Repository,
    C: FnMut(&mut R, &str, Vec<String>, Instant) -> Result<(), VcsError>,
    O: FnMut(&Orchestrator<R>, Instant),
{
    let mut script: VecDeque<Scripted> = script.into();
    let mut in_flight: Vec<BuildRun> = Vec::new();
    let mut finished = Vec::new();
    let clock = ManualClock::new(orch.now());

    let mut apply = |orch: &mut Orchestrator<R>, actions: Vec<Action>, in_flight: &mut Vec<BuildRun>| {
        for action in actions {
            match action {
                Action::StartBuild { run_id, request, definition, .. } => {
                    clock.set(orch.now());
                    let mut runner = StubRunner::new(&clock);
                    in_flight.push(run_pipeline(&definition, run_id, request, &mut runner, &clock, DEFAULT_OUTPUT_CAP));
                }
                Action::Record(run) => finished.push(run),
                Action::Degraded { .. } | Action::Rejected { .. } => {}
            }
        }
    };

    loop {
        let next_scripted = script.front().map(Scripted::time);
        let done = match until {
            Until::Quiescent => in_flight.is_empty() && orch.is_quiescent(),
            Until::Integrated => orch.projects().all(|p| p.repo.head().is_ok_and(|h| h.seq == p.last_integrated.seq)),
        };
        if next_scripted.is_none() && done {
            break;
        }
        let next_finish = in_flight.iter().map(|r| r.ended_at).min();
        let next_timer = orch.next_wakeup().filter(|t| *t > orch.now());
        let Some(t) = [next_scripted, next_finish, next_timer].into_iter().flatten().min() else {
            break;
        };
        if horizon.is_some_and(|h| t > h) {
            break;
        }

        let mut events = Vec::new();
        while script.front().is_some_and(|s| s.time() == t) {
            match script.pop_front() {
                Some(Scripted::Commit { project_id, author, paths, at }) => {
                    if let Some(project) = orch.project_mut(&project_id) {
                        // A rejected commit leaves the repository as it was.
                        let _ = commit(&mut project.repo, &author, paths, at);
                    }
                }
                Some(Scripted::Event(e)) => events.push(e),
                None => {}
            }
        }

        in_flight.sort_by_key(|r| (r.ended_at, r.run_id));
        while in_flight.first().is_some_and(|r| r.ended_at == t) {
            let run = in_flight.remove(0);
            let actions = orch.step(Event::BuildFinished(run));
            apply(orch, actions, &mut in_flight);
        }
        for event in events {
            let actions = orch.step(event);
            apply(orch, actions, &mut in_flight);
        }
        let actions = orch.step(Event::ClockAdvanced { now: t });
        apply(orch, actions, &mut in_flight);

        observe(orch, t);
    }
    drop(apply);
    finished
}
