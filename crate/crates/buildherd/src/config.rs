//! Server configuration file.
//!
//! ```json
//! {
//!   "listen": "127.0.0.1:8750",
//!   "history": "history.jsonl",
//!   "projects": [
//!     {
//!       "id": "p1",
//!       "repo": {"memory": {"id": "r1"}},
//!       "policy": {"triggered": {"hooked": {}, "quiet_ms": 0}},
//!       "steps": [{"name": "test", "command": {"exec": {"program": "make", "args": ["test"]}}}]
//!     }
//!   ]
//! }
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use buildherd_core::model::{validate_policy, TriggerPolicy};
use buildherd_core::pipeline::{validate_definition, BuildDefinition, BuildStep, DEFAULT_OUTPUT_CAP};
use buildherd_core::TraceCommit;
use serde::{Deserialize, Serialize};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8750";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("project `{0}` is configured twice")]
    DuplicateProject(String),
    #[error("project `{project}`: {message}")]
    InvalidProject { project: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepoConfig {
    /// An in-memory repository, optionally pre-loaded with commits.
    Memory {
        id: String,
        #[serde(default)]
        seed: Vec<TraceCommit>,
    },
    /// A directory tracked by content hashes; the manifest defaults to
    /// `<root>.manifest` beside the directory.
    Directory {
        id: String,
        root: PathBuf,
        #[serde(default)]
        manifest: Option<PathBuf>,
    },
}

impl RepoConfig {
    pub fn id(&self) -> &str {
        match self {
            RepoConfig::Memory { id, .. } | RepoConfig::Directory { id, .. } => id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub id: String,
    pub repo: RepoConfig,
    pub policy: TriggerPolicy,
    pub steps: Vec<BuildStep>,
    #[serde(default = "default_output_cap")]
    pub output_cap: usize,
    /// Directory builds run in; defaults to `<workspaces>/<id>`.
    #[serde(default)]
    pub workspace: Option<PathBuf>,
}

impl ProjectConfig {
    pub fn definition(&self) -> BuildDefinition {
        BuildDefinition { project_id: self.id.clone(), steps: self.steps.clone() }
    }
}

fn default_output_cap() -> usize {
    DEFAULT_OUTPUT_CAP
}

fn default_listen() -> SocketAddr {
    DEFAULT_LISTEN.parse().expect("default listen address parses")
}

fn default_history() -> PathBuf {
    PathBuf::from("history.jsonl")
}

fn default_workspaces() -> PathBuf {
    PathBuf::from("workspaces")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    #[serde(default = "default_history")]
    pub history: PathBuf,
    #[serde(default = "default_workspaces")]
    pub workspaces: PathBuf,
    pub projects: Vec<ProjectConfig>,
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut config: ServiceConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        config.validate()?;
        Ok(config)
    }

    /// Makes every relative path relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.history);
        join(&mut self.workspaces);
        for project in &mut self.projects {
            if let Some(workspace) = project.workspace.as_mut() {
                join(workspace);
            }
            if let RepoConfig::Directory { root, manifest, .. } = &mut project.repo {
                join(root);
                if let Some(manifest) = manifest.as_mut() {
                    join(manifest);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for project in &self.projects {
            if !seen.insert(project.id.as_str()) {
                return Err(ConfigError::DuplicateProject(project.id.clone()));
            }
            let invalid = |message: String| ConfigError::InvalidProject { project: project.id.clone(), message };
            validate_policy(&project.policy).map_err(|v| invalid(format!("invalid policy: {}", join(&v))))?;
            validate_definition(&project.definition()).map_err(|v| invalid(format!("invalid steps: {}", join(&v))))?;
        }
        Ok(())
    }

    pub fn project(&self, id: &str) -> Option<&ProjectConfig> {
        self.projects.iter().find(|p| p.id == id)
    }

    pub fn workspace_for(&self, project: &ProjectConfig) -> PathBuf {
        project.workspace.clone().unwrap_or_else(|| self.workspaces.join(&project.id))
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join("; ")
}
