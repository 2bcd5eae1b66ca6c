//! The running CI server: one thread owns the orchestrator and applies its
//! actions, builds run on worker threads and report back by message.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, RwLock};
use std::thread;

use buildherd_core::model::{BuildRequest, OutcomeKind, Revision, RunOutcome};
use buildherd_core::orchestrator::OrchestratorError;
use buildherd_core::{Action, BuildRun, Clock, Event, HookNotification, Instant, Orchestrator, ProjectStatus, Repository, VcsError};
use serde::{Deserialize, Serialize};

use crate::config::{RepoConfig, ServiceConfig};
use crate::history::{HistoryError, HistoryStore};
use crate::repo::{DirectoryRepo, RepoAdapter, SharedMemoryRepo};
use crate::runner::{execute, SystemClock};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error("repository `{repo}`: {source}")]
    Repository { repo: String, source: VcsError },
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("project `{0}` has no finished run for its command")]
    NoRun(String),
}

/// Answer to a commanded build: the request as queued.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub project: String,
    pub actor: String,
    pub target: Revision,
    pub changes: usize,
    pub created_at: Instant,
}

impl Receipt {
    fn new(project: &str, actor: &str, request: &BuildRequest) -> Self {
        Receipt {
            project: project.into(),
            actor: actor.into(),
            target: request.target_revision.clone(),
            changes: request.changes.len(),
            created_at: request.created_at,
        }
    }
}

/// Inputs of the event loop.
pub enum Message {
    Hook(HookNotification),
    Command { project: String, actor: String, reply: tokio::sync::oneshot::Sender<Result<Receipt, OrchestratorError>> },
    Finished(BuildRun),
    Shutdown,
}

pub type StatusBoard = Arc<RwLock<BTreeMap<String, ProjectStatus>>>;

/// Orchestrator, repositories and history of one server process.
pub struct Server {
    orch: Orchestrator<RepoAdapter>,
    history: HistoryStore,
    config: ServiceConfig,
    memory_repos: BTreeMap<String, SharedMemoryRepo>,
}

impl Server {
    /// Builds the server from `config`, resuming run numbering and the
    /// integrated revision of each project from the history file.
    pub fn new(config: ServiceConfig) -> Result<Self, ServerError> {
        let clock = SystemClock;
        let history = HistoryStore::open(&config.history)?;
        let mut orch = Orchestrator::new(clock.now());
        let mut memory_repos = BTreeMap::new();
        for project in &config.projects {
            let repo = match &project.repo {
                RepoConfig::Memory { id, seed } => {
                    let repo = memory_repos.entry(id.clone()).or_insert_with(|| SharedMemoryRepo::new(id.clone())).clone();
                    if repo.head().map_or(0, |h| h.seq) == 0 {
                        for commit in seed {
                            repo.commit(&commit.author, commit.paths.clone(), commit.at)
                                .map_err(|source| ServerError::Repository { repo: id.clone(), source })?;
                        }
                    }
                    RepoAdapter::Memory(repo)
                }
                RepoConfig::Directory { id, root, manifest } => {
                    let manifest = manifest.clone().unwrap_or_else(|| default_manifest(root));
                    let repo = DirectoryRepo::open(id.clone(), root.clone(), manifest)
                        .map_err(|source| ServerError::Repository { repo: id.clone(), source })?;
                    RepoAdapter::Directory(repo)
                }
            };
            orch.add_project(project.policy.clone(), project.definition(), repo)?;
        }

        let runs = history.runs()?;
        if let Some(last) = history.last_run_id() {
            orch.resume_run_ids_after(last);
        }
        for project in &config.projects {
            let integrated = runs
                .iter()
                .filter(|r| r.project_id == project.id && r.outcome.kind() != OutcomeKind::Errored)
                .map(|r| &r.request.target_revision)
                .max_by_key(|rev| rev.seq);
            let Some(revision) = integrated else { continue };
            let state = orch.project(&project.id).expect("project was just added");
            if state.repo.changes_since(revision).is_ok() {
                orch.set_last_integrated(&project.id, revision.clone())?;
            }
        }
        Ok(Server { orch, history, config, memory_repos })
    }

    /// Handle on a configured in-memory repository.
    pub fn memory_repo(&self, repo_id: &str) -> Option<SharedMemoryRepo> {
        self.memory_repos.get(repo_id).cloned()
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn statuses(&self) -> BTreeMap<String, ProjectStatus> {
        self.orch.projects().map(|p| (p.project_id.clone(), p.status())).collect()
    }

    fn now(&self) -> Instant {
        SystemClock.now().max(self.orch.now())
    }

    /// Commands a build and runs everything it starts on this thread until
    /// that build has finished. Returns the commanded run.
    pub fn build_now(&mut self, project: &str, actor: &str) -> Result<BuildRun, ServerError> {
        let (request, mut actions) = self.orch.submit_command(project, actor, self.now())?;
        let mut ours = None;
        while !actions.is_empty() {
            let mut next = Vec::new();
            for action in actions {
                match action {
                    Action::StartBuild { project_id, run_id, request, definition } => {
                        let run = self.run_build(&project_id, run_id, request, &definition);
                        next.extend(self.finish(run));
                    }
                    Action::Record(run) => {
                        self.record(&run);
                        if run.request == request {
                            ours = Some(run);
                        }
                    }
                    other => log_action(&other),
                }
            }
            if ours.is_some() {
                break;
            }
            actions = next;
        }
        ours.ok_or_else(|| ServerError::NoRun(project.into()))
    }

    fn run_build(&self, project_id: &str, run_id: u64, request: BuildRequest, definition: &buildherd_core::BuildDefinition) -> BuildRun {
        let (workspace, cap) = self.build_settings(project_id);
        run_in(&workspace, cap, definition, run_id, request)
    }

    fn build_settings(&self, project_id: &str) -> (PathBuf, usize) {
        let project = self.config.project(project_id).expect("orchestrator only knows configured projects");
        (self.config.workspace_for(project), project.output_cap)
    }

    fn finish(&mut self, mut run: BuildRun) -> Vec<Action> {
        // The loop learns of the end no earlier than its own clock.
        run.ended_at = run.ended_at.max(self.orch.now());
        self.orch.step(Event::BuildFinished(run))
    }

    fn record(&mut self, run: &BuildRun) {
        if let Err(e) = self.history.append(run) {
            log::error!("cannot record run {}: {e}", run.run_id);
        }
    }

    /// Serves `inbox` until [`Message::Shutdown`] or until every sender is
    /// gone. `outbox` must feed `inbox`; workers report through it.
    pub fn run(mut self, inbox: Receiver<Message>, outbox: Sender<Message>, board: StatusBoard) {
        loop {
            publish(&self, &board);
            let message = match self.orch.next_wakeup() {
                Some(at) => {
                    let wait = at.saturating_since(self.now()).0.max(1);
                    inbox.recv_timeout(std::time::Duration::from_millis(wait))
                }
                None => inbox.recv().map_err(|_| RecvTimeoutError::Disconnected),
            };
            let actions = match message {
                Ok(Message::Hook(mut notification)) => {
                    notification.received_at = self.now();
                    self.orch.step(Event::HookReceived(notification))
                }
                Ok(Message::Command { project, actor, reply }) => match self.orch.submit_command(&project, &actor, self.now()) {
                    Ok((request, actions)) => {
                        let _ = reply.send(Ok(Receipt::new(&project, &actor, &request)));
                        actions
                    }
                    Err(e) => {
                        let _ = reply.send(Err(e));
                        Vec::new()
                    }
                },
                Ok(Message::Finished(run)) => self.finish(run),
                Ok(Message::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {
                    let now = self.now();
                    self.orch.step(Event::ClockAdvanced { now })
                }
            };
            for action in actions {
                match action {
                    Action::StartBuild { project_id, run_id, request, definition } => {
                        let (workspace, cap) = self.build_settings(&project_id);
                        let outbox = outbox.clone();
                        thread::spawn(move || {
                            let run = run_in(&workspace, cap, &definition, run_id, request);
                            let _ = outbox.send(Message::Finished(run));
                        });
                    }
                    Action::Record(run) => self.record(&run),
                    other => log_action(&other),
                }
            }
        }
    }
}

fn publish(server: &Server, board: &StatusBoard) {
    let statuses = server.statuses();
    *board.write().unwrap_or_else(|e| e.into_inner()) = statuses;
}

fn log_action(action: &Action) {
    match action {
        Action::Degraded { project_id, reason } => log::warn!("project `{project_id}` degraded: {reason}"),
        Action::Rejected { reason } => log::warn!("event rejected: {reason}"),
        Action::StartBuild { .. } | Action::Record(_) => {}
    }
}

fn run_in(
    workspace: &std::path::Path,
    cap: usize,
    definition: &buildherd_core::BuildDefinition,
    run_id: u64,
    request: BuildRequest,
) -> BuildRun {
    let prepared = fs::create_dir_all(workspace).map_err(|e| format!("workspace {}: {e}", workspace.display()));
    let result = prepared.and_then(|()| execute(definition, run_id, request.clone(), workspace, cap).map_err(|e| e.to_string()));
    result.unwrap_or_else(|reason| {
        let now = SystemClock.now();
        BuildRun {
            run_id,
            project_id: definition.project_id.clone(),
            request,
            started_at: now,
            ended_at: now,
            step_results: Vec::new(),
            outcome: RunOutcome::Errored { reason },
        }
    })
}

fn default_manifest(root: &std::path::Path) -> PathBuf {
    let mut name = root.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "repo".into());
    name.push(".manifest");
    root.with_file_name(name)
}
