//! HTTP front of the server.
//!
//! | route | |
//! |---|---|
//! | `POST /hooks/{repo_id}` | change ping `{"repo","nonce","revision"?}`, 202 |
//! | `POST /projects/{id}/build` | commanded build, optional `{"actor"}`, 202 with a [`Receipt`] |
//! | `GET /projects/{id}/status` | classification, queue depth, running build, last run |
//! | `GET /projects/{id}/runs` | history, filtered by `outcome`, `from`, `to` |
//! | `GET /health` | liveness |
//!
//! Handlers never touch the orchestrator: they post messages to the event
//! loop and read the status snapshots it publishes.

use std::collections::{BTreeSet, HashSet};
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use buildherd_core::model::{OutcomeKind, Revision};
use buildherd_core::orchestrator::OrchestratorError;
use buildherd_core::{HookNotification, Instant};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ServiceConfig;
use crate::history::{query_history, HistoryFilter, HistoryRecord};
use crate::repo::SharedMemoryRepo;
use crate::server::{Message, Server, ServerError, StatusBoard};

/// Body of a hook request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookBody {
    pub repo: String,
    pub nonce: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<Revision>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookAck {
    pub accepted: bool,
    pub duplicate: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildBody {
    #[serde(default)]
    pub actor: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct RunsQuery {
    pub outcome: Option<OutcomeKind>,
    pub from: Option<u64>,
    pub to: Option<u64>,
}

struct AppState {
    inbox: Sender<Message>,
    board: StatusBoard,
    repos: BTreeSet<String>,
    projects: BTreeSet<String>,
    nonces: Mutex<HashSet<(String, String)>>,
    history: PathBuf,
}

type Shared = Arc<AppState>;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("cannot listen: {0}")]
    Io(#[from] io::Error),
}

/// A server running on background threads.
pub struct ServiceHandle {
    addr: SocketAddr,
    inbox: Sender<Message>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    http: Option<JoinHandle<io::Result<()>>>,
    event_loop: Option<JoinHandle<()>>,
    memory_repos: Vec<SharedMemoryRepo>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn memory_repo(&self, repo_id: &str) -> Option<SharedMemoryRepo> {
        use buildherd_core::Repository;
        self.memory_repos.iter().find(|r| r.repo_id() == repo_id).cloned()
    }

    /// Blocks until the HTTP server stops.
    pub fn wait(mut self) -> io::Result<()> {
        let result = self.http.take().map_or(Ok(()), |h| h.join().unwrap_or_else(|_| Err(io::Error::other("http thread panicked"))));
        self.stop_loop();
        result
    }

    /// Stops accepting requests and stops the event loop. Builds still
    /// running are abandoned.
    pub fn shutdown(mut self) -> io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.wait()
    }

    fn stop_loop(&mut self) {
        let _ = self.inbox.send(Message::Shutdown);
        if let Some(handle) = self.event_loop.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.stop_loop();
    }
}

/// Starts the server described by `config` on background threads.
pub fn start(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    let server = Server::new(config.clone())?;
    let memory_repos: Vec<SharedMemoryRepo> =
        config.projects.iter().filter_map(|p| server.memory_repo(p.repo.id())).collect();

    let listener = std::net::TcpListener::bind(config.listen)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;

    let (inbox, receiver) = mpsc::channel();
    let board: StatusBoard = Arc::new(std::sync::RwLock::new(server.statuses()));
    let event_loop = {
        let outbox = inbox.clone();
        let board = board.clone();
        thread::Builder::new().name("buildherd-loop".into()).spawn(move || server.run(receiver, outbox, board))?
    };

    let state = Arc::new(AppState {
        inbox: inbox.clone(),
        board,
        repos: config.projects.iter().map(|p| p.repo.id().to_string()).collect(),
        projects: config.projects.iter().map(|p| p.id.clone()).collect(),
        nonces: Mutex::new(HashSet::new()),
        history: config.history.clone(),
    });
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let http = thread::Builder::new().name("buildherd-http".into()).spawn(move || {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router(state))
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await
        })
    })?;

    Ok(ServiceHandle { addr, inbox, stop: Some(stop), http: Some(http), event_loop: Some(event_loop), memory_repos })
}

fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/hooks/{repo_id}", post(hook))
        .route("/projects/{id}/build", post(build))
        .route("/projects/{id}/status", get(status))
        .route("/projects/{id}/runs", get(runs))
        .with_state(state)
}

fn error(code: StatusCode, message: impl std::fmt::Display) -> Response {
    (code, Json(json!({ "error": message.to_string() }))).into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn hook(State(state): State<Shared>, Path(repo_id): Path<String>, body: Bytes) -> Response {
    let body: HookBody = match serde_json::from_slice(&body) {
        Ok(body) => body,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed hook body: {e}")),
    };
    if body.repo != repo_id {
        return error(StatusCode::BAD_REQUEST, format!("body names repository `{}`, path `{repo_id}`", body.repo));
    }
    if !state.repos.contains(&repo_id) {
        return error(StatusCode::NOT_FOUND, format!("unknown repository `{repo_id}`"));
    }
    let fresh = state.nonces.lock().unwrap_or_else(|e| e.into_inner()).insert((repo_id.clone(), body.nonce.clone()));
    if fresh {
        let notification = HookNotification {
            repo_id,
            received_at: Instant::ZERO,
            claimed_revision: body.revision,
            nonce: body.nonce,
        };
        if state.inbox.send(Message::Hook(notification)).is_err() {
            return error(StatusCode::SERVICE_UNAVAILABLE, "server is shutting down");
        }
    }
    (StatusCode::ACCEPTED, Json(HookAck { accepted: true, duplicate: !fresh })).into_response()
}

async fn build(State(state): State<Shared>, Path(project): Path<String>, body: Bytes) -> Response {
    let body: BuildBody = if body.iter().all(u8::is_ascii_whitespace) {
        BuildBody::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(body) => body,
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed build body: {e}")),
        }
    };
    if !state.projects.contains(&project) {
        return error(StatusCode::NOT_FOUND, format!("unknown project `{project}`"));
    }
    let (reply, receipt) = tokio::sync::oneshot::channel();
    let actor = body.actor.unwrap_or_else(|| "http".into());
    if state.inbox.send(Message::Command { project, actor, reply }).is_err() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "server is shutting down");
    }
    match receipt.await {
        Ok(Ok(receipt)) => (StatusCode::ACCEPTED, Json(receipt)).into_response(),
        Ok(Err(e @ OrchestratorError::UnknownProject(_))) => error(StatusCode::NOT_FOUND, e),
        Ok(Err(e @ OrchestratorError::RepositoryUnavailable(_))) => error(StatusCode::SERVICE_UNAVAILABLE, e),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "server is shutting down"),
    }
}

async fn status(State(state): State<Shared>, Path(project): Path<String>) -> Response {
    let board = state.board.read().unwrap_or_else(|e| e.into_inner());
    match board.get(&project) {
        Some(status) => Json(status.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown project `{project}`")),
    }
}

async fn runs(State(state): State<Shared>, Path(project): Path<String>, Query(query): Query<RunsQuery>) -> Response {
    if !state.projects.contains(&project) {
        return error(StatusCode::NOT_FOUND, format!("unknown project `{project}`"));
    }
    let filter = HistoryFilter {
        project: Some(project),
        from: query.from.map(Instant),
        to: query.to.map(Instant),
        outcome: query.outcome,
    };
    let path = state.history.clone();
    let result = tokio::task::spawn_blocking(move || query_history(&path, &filter)).await;
    match result {
        Ok(Ok(runs)) => Json(runs.iter().map(HistoryRecord::from).collect::<Vec<_>>()).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}
