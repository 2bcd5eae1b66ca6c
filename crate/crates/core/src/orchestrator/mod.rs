//! The CI server core: a single-owner event loop that binds trigger
//! policies, the per-project build queue and run bookkeeping.
//!
//! [`Orchestrator::step`] consumes one [`Event`] and returns the
//! [`Action`]s the surrounding process must carry out. It never executes a
//! pipeline itself and never reads a clock; both happen at the boundary,
//! which reports back through [`Event::BuildFinished`].

mod replay;

pub use replay::{drive, run_until_idle, Scripted, Until};

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{
    classify, validate_policy, BuildCause, BuildRequest, BuildRun, ClassificationLabel, OutcomeKind, PolicyViolation,
    Revision, TriggerPolicy,
};
use crate::pipeline::{validate_definition, BuildDefinition, DefinitionViolation};
use crate::time::Instant;
use crate::triggers::{next_fire, poll_once, CoalescerState, HookNotification, IngestOutcome};
use crate::vcs::{Repository, VcsError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    ClockAdvanced { now: Instant },
    HookReceived(HookNotification),
    CommandReceived { actor: String, project_id: String, at: Instant },
    BuildFinished(BuildRun),
}

impl Event {
    pub fn time(&self) -> Instant {
        match self {
            Event::ClockAdvanced { now } => *now,
            Event::HookReceived(n) => n.received_at,
            Event::CommandReceived { at, .. } => *at,
            Event::BuildFinished(run) => run.ended_at,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    /// Execute `definition` for `request` and report back with
    /// [`Event::BuildFinished`] carrying `run_id`.
    StartBuild { project_id: String, run_id: u64, request: BuildRequest, definition: BuildDefinition },
    /// Persist a finished run.
    Record(BuildRun),
    /// A repository could not be reached; retried on the next trigger.
    Degraded { project_id: String, reason: String },
    Rejected { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum OrchestratorError {
    #[error("unknown project `{0}`")]
    UnknownProject(String),
    #[error("project `{0}` already exists")]
    DuplicateProject(String),
    #[error("invalid policy: {0:?}")]
    InvalidPolicy(Vec<PolicyViolation>),
    #[error("invalid build definition: {0:?}")]
    InvalidDefinition(Vec<DefinitionViolation>),
    #[error("command rejected: {0}")]
    RepositoryUnavailable(#[from] VcsError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunningBuild {
    pub run_id: u64,
    pub started_at: Instant,
    pub request: BuildRequest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: u64,
    pub outcome: OutcomeKind,
    pub started_at: Instant,
    pub ended_at: Instant,
    pub target_seq: u64,
}

/// Everything the server tracks for one project.
#[derive(Debug)]
pub struct ProjectState<R> {
    pub project_id: String,
    pub policy: TriggerPolicy,
    pub definition: BuildDefinition,
    pub repo: R,
    pub last_integrated: Revision,
    /// Newest revision already handed to the coalescer, the queue or a
    /// running build. Polls and hooks only look past this point.
    requested: Revision,
    pub coalescer: Option<CoalescerState>,
    pub queue: VecDeque<BuildRequest>,
    pub running: Option<RunningBuild>,
    pub next_poll_at: Option<Instant>,
    pub next_schedule_at: Option<Instant>,
    pub last_run: Option<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectStatus {
    pub project: String,
    pub classification: ClassificationLabel,
    pub queue_depth: usize,
    pub running: bool,
    pub last_run: Option<RunSummary>,
}

impl<R: Repository> ProjectState<R> {
    pub fn requested(&self) -> &Revision {
        &self.requested
    }

    /// Requests waiting for the build resource: queued requests plus the
    /// builds the coalescer's pending changes will become.
    pub fn queue_depth(&self) -> usize {
        self.queue.len() + self.coalescer.as_ref().map_or(0, CoalescerState::backlog)
    }

    pub fn status(&self) -> ProjectStatus {
        ProjectStatus {
            project: self.project_id.clone(),
            classification: classify(&self.policy),
            queue_depth: self.queue_depth(),
            running: self.running.is_some(),
            last_run: self.last_run.clone(),
        }
    }

    /// No work is waiting and every known change has been requested.
    pub fn is_quiescent(&self) -> bool {
        let caught_up = self.repo.head().map_or(true, |head| head.seq <= self.requested.seq);
        self.running.is_none()
            && self.queue.is_empty()
            && self.coalescer.as_ref().map_or(true, |c| c.pending().is_empty())
            && caught_up
    }

    fn next_wakeup(&self) -> Option<Instant> {
        let coalesce_at = match (&self.coalescer, &self.running) {
            (Some(c), None) => c.earliest(),
            _ => None,
        };
        [self.next_poll_at, self.next_schedule_at, coalesce_at].into_iter().flatten().min()
    }

    fn advance_requested(&mut self, to: &Revision) {
        if to.seq > self.requested.seq {
            self.requested = to.clone();
        }
    }

    /// After an errored run, fall back to the newest revision something
    /// still covers so the lost changes are picked up again.
    fn recompute_requested(&mut self) {
        let mut newest = self.last_integrated.clone();
        let candidates = self
            .queue
            .iter()
            .map(|r| &r.target_revision)
            .chain(self.running.as_ref().map(|r| &r.request.target_revision))
            .chain(self.coalescer.as_ref().and_then(|c| c.newest_pending()));
        for rev in candidates {
            if rev.seq > newest.seq {
                newest = rev.clone();
            }
        }
        self.requested = newest;
    }

    fn degraded(&self, actions: &mut Vec<Action>, err: impl core::fmt::Display) {
        actions.push(Action::Degraded { project_id: self.project_id.clone(), reason: alloc::format!("{err}") });
    }

    fn poll(&mut self, now: Instant, actions: &mut Vec<Action>) {
        let Some(due) = self.next_poll_at.filter(|due| *due <= now) else {
            return;
        };
        let Some(interval) = poll_interval(&self.policy) else {
            return;
        };
        let mut next = due;
        while next <= now {
            next += interval;
        }
        self.next_poll_at = Some(next);

        let detected = self.repo.refresh(now).and_then(|()| poll_once(&self.repo, &self.requested, now));
        match detected {
            Ok(Some(request)) => {
                if let Some(coalescer) = self.coalescer.as_mut() {
                    coalescer.absorb(request.changes, now);
                }
                self.advance_requested(&request.target_revision);
            }
            Ok(None) => {}
            Err(e) => self.degraded(actions, e),
        }
    }

    fn fire_schedule(&mut self, now: Instant, actions: &mut Vec<Action>) {
        let Some(fire_time) = self.next_schedule_at.filter(|due| *due <= now) else {
            return;
        };
        let TriggerPolicy::Scheduled(schedule) = &self.policy else {
            return;
        };
        // Missed fires collapse into this one.
        let mut next = next_fire(schedule, fire_time);
        while let Some(t) = next.filter(|t| *t <= now) {
            next = next_fire(schedule, t);
        }
        self.next_schedule_at = next;

        match self.repo.refresh(now).and_then(|()| self.repo.head()) {
            Ok(head) => {
                self.advance_requested(&head);
                self.queue.push_back(BuildRequest {
                    cause: BuildCause::ScheduleFire { fire_time },
                    changes: Vec::new(),
                    target_revision: head,
                    created_at: now,
                });
            }
            Err(e) => self.degraded(actions, e),
        }
    }

    fn coalesce(&mut self, now: Instant) {
        let running = self.running.is_some();
        if let Some(request) = self.coalescer.as_mut().and_then(|c| c.coalesce(now, running)) {
            self.queue.push_back(request);
        }
    }

    fn start_if_idle(&mut self, now: Instant, next_run_id: &mut u64, actions: &mut Vec<Action>) {
        if self.running.is_some() {
            return;
        }
        let Some(request) = self.queue.pop_front() else {
            return;
        };
        let run_id = *next_run_id;
        *next_run_id += 1;
        self.running = Some(RunningBuild { run_id, started_at: now, request: request.clone() });
        actions.push(Action::StartBuild {
            project_id: self.project_id.clone(),
            run_id,
            request,
            definition: self.definition.clone(),
        });
    }
}

fn poll_interval(policy: &TriggerPolicy) -> Option<crate::time::Duration> {
    match policy {
        TriggerPolicy::Triggered { detection: crate::model::Detection::Polled { interval }, .. } => Some(*interval),
        _ => None,
    }
}

/// All projects served by one CI server.
#[derive(Debug)]
pub struct Orchestrator<R> {
    projects: BTreeMap<String, ProjectState<R>>,
    next_run_id: u64,
    now: Instant,
}

impl<R: Repository> Orchestrator<R> {
    pub fn new(start: Instant) -> Self {
        Orchestrator { projects: BTreeMap::new(), next_run_id: 1, now: start }
    }

    /// Continue run numbering after `last_run_id`, e.g. from a history file.
    pub fn resume_run_ids_after(&mut self, last_run_id: u64) {
        self.next_run_id = self.next_run_id.max(last_run_id + 1);
    }

    pub fn now(&self) -> Instant {
        self.now
    }

    pub fn add_project(
        &mut self,
        policy: TriggerPolicy,
        definition: BuildDefinition,
        repo: R,
    ) -> Result<&mut ProjectState<R>, OrchestratorError> {
        validate_policy(&policy).map_err(OrchestratorError::InvalidPolicy)?;
        validate_definition(&definition).map_err(OrchestratorError::InvalidDefinition)?;
        let project_id = definition.project_id.clone();
        if self.projects.contains_key(&project_id) {
            return Err(OrchestratorError::DuplicateProject(project_id));
        }
        let next_poll_at = poll_interval(&policy).map(|interval| self.now + interval);
        let next_schedule_at = match &policy {
            TriggerPolicy::Scheduled(schedule) => next_fire(schedule, self.now),
            _ => None,
        };
        let state = ProjectState {
            project_id: project_id.clone(),
            coalescer: CoalescerState::for_policy(&policy),
            policy,
            definition,
            repo,
            last_integrated: Revision::initial(),
            requested: Revision::initial(),
            queue: VecDeque::new(),
            running: None,
            next_poll_at,
            next_schedule_at,
            last_run: None,
        };
        Ok(self.projects.entry(project_id).or_insert(state))
    }

    pub fn project(&self, project_id: &str) -> Option<&ProjectState<R>> {
        self.projects.get(project_id)
    }

    pub fn project_mut(&mut self, project_id: &str) -> Option<&mut ProjectState<R>> {
        self.projects.get_mut(project_id)
    }

    pub fn projects(&self) -> impl Iterator<Item = &ProjectState<R>> {
        self.projects.values()
    }

    /// Marks `revision` as already integrated, e.g. when resuming from
    /// history.
    pub fn set_last_integrated(&mut self, project_id: &str, revision: Revision) -> Result<(), OrchestratorError> {
        let project = self
            .projects
            .get_mut(project_id)
            .ok_or_else(|| OrchestratorError::UnknownProject(project_id.into()))?;
        project.last_integrated = revision.clone();
        project.requested = revision;
        Ok(())
    }

    /// Earliest future instant at which a timer (poll, schedule or quiet
    /// period) needs a [`Event::ClockAdvanced`].
    pub fn next_wakeup(&self) -> Option<Instant> {
        self.projects.values().filter_map(ProjectState::next_wakeup).min()
    }

    pub fn is_quiescent(&self) -> bool {
        self.projects.values().all(ProjectState::is_quiescent)
    }

    /// Pulls the lever: enqueue a build of head for `project_id`, whatever
    /// its policy. Changes gathered by the coalescer move into this request.
    pub fn submit_command(
        &mut self,
        project_id: &str,
        actor: &str,
        at: Instant,
    ) -> Result<(BuildRequest, Vec<Action>), OrchestratorError> {
        self.now = self.now.max(at);
        let now = self.now;
        let project = self
            .projects
            .get_mut(project_id)
            .ok_or_else(|| OrchestratorError::UnknownProject(project_id.into()))?;
        project.repo.refresh(now)?;
        let head = project.repo.head()?;
        let fresh = project.repo.changes_since(&project.requested)?;
        let mut changes = project.coalescer.as_mut().map(CoalescerState::take_all).unwrap_or_default();
        changes.extend(fresh);
        let target_revision = if head.seq >= project.requested.seq { head } else { project.requested.clone() };
        project.advance_requested(&target_revision);
        let request = BuildRequest {
            cause: BuildCause::Commanded { actor: actor.into() },
            changes,
            target_revision,
            created_at: now,
        };
        project.queue.push_back(request.clone());
        let mut actions = Vec::new();
        project.start_if_idle(now, &mut self.next_run_id, &mut actions);
        Ok((request, actions))
    }

    /// Applies one event. Events must arrive in non-decreasing time order;
    /// a late event is rejected.
    pub fn step(&mut self, event: Event) -> Vec<Action> {
        let mut actions = Vec::new();
        let at = event.time();
        if at < self.now {
            actions.push(Action::Rejected {
                reason: alloc::format!("event at {at} arrived after {}", self.now),
            });
            return actions;
        }
        self.now = at;

        match event {
            Event::ClockAdvanced { now } => {
                for project in self.projects.values_mut() {
                    project.poll(now, &mut actions);
                    project.fire_schedule(now, &mut actions);
                    project.coalesce(now);
                    project.start_if_idle(now, &mut self.next_run_id, &mut actions);
                }
            }
            Event::HookReceived(notification) => self.on_hook(notification, &mut actions),
            Event::CommandReceived { actor, project_id, at } => match self.submit_command(&project_id, &actor, at) {
                Ok((_, started)) => actions.extend(started),
                Err(e) => actions.push(Action::Rejected { reason: alloc::format!("{e}") }),
            },
            Event::BuildFinished(run) => self.on_build_finished(run, &mut actions),
        }
        actions
    }

    fn on_hook(&mut self, notification: HookNotification, actions: &mut Vec<Action>) {
        let now = self.now;
        let mut matched = false;
        for project in self.projects.values_mut().filter(|p| p.repo.repo_id() == notification.repo_id) {
            matched = true;
            let requested = project.requested.clone();
            let Some(coalescer) = project.coalescer.as_mut() else {
                continue;
            };
            let ingested = project
                .repo
                .refresh(now)
                .map_err(Into::into)
                .and_then(|()| coalescer.ingest_notification(&notification, &project.repo, &requested));
            match ingested {
                Ok(IngestOutcome::Ingested { .. }) => {
                    if let Some(newest) = coalescer.newest_pending().cloned() {
                        project.advance_requested(&newest);
                    }
                }
                Ok(IngestOutcome::Duplicate) => {}
                Err(e) => project.degraded(actions, e),
            }
            project.coalesce(now);
            project.start_if_idle(now, &mut self.next_run_id, actions);
        }
        if !matched {
            actions.push(Action::Rejected { reason: alloc::format!("unknown repository `{}`", notification.repo_id) });
        }
    }

    fn on_build_finished(&mut self, run: BuildRun, actions: &mut Vec<Action>) {
        let now = self.now;
        let Some(project) = self.projects.get_mut(&run.project_id) else {
            actions.push(Action::Rejected { reason: alloc::format!("unknown project `{}`", run.project_id) });
            return;
        };
        if project.running.as_ref().map(|r| r.run_id) != Some(run.run_id) {
            actions.push(Action::Rejected {
                reason: alloc::format!("run {} is not running for `{}`", run.run_id, run.project_id),
            });
            return;
        }
        project.running = None;
        let outcome = run.outcome.kind();
        if outcome != OutcomeKind::Errored && run.request.target_revision.seq > project.last_integrated.seq {
            project.last_integrated = run.request.target_revision.clone();
        }
        if outcome == OutcomeKind::Errored {
            project.recompute_requested();
        }
        if let Some(coalescer) = project.coalescer.as_mut() {
            coalescer.note_build_end(run.ended_at);
        }
        project.last_run = Some(RunSummary {
            run_id: run.run_id,
            outcome,
            started_at: run.started_at,
            ended_at: run.ended_at,
            target_seq: run.request.target_revision.seq,
        });
        actions.push(Action::Record(run));
        project.coalesce(now);
        project.start_if_idle(now, &mut self.next_run_id, actions);
    }
}
