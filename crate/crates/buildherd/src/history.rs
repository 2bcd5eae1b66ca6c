//! Append-only build history in a JSON lines file.
//!
//! The first line is the header `{"format":"buildherd-history","version":1}`;
//! every further line is one [`HistoryRecord`]. Each append writes a whole
//! line and syncs it before returning, and readers ignore a trailing line
//! without a newline, so a reader never sees half a record.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use buildherd_core::model::{BuildCause, BuildRequest, Change, OutcomeKind, Revision, RunOutcome};
use buildherd_core::{BuildRun, Duration, Instant, StepResult, StepStatus};
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "buildherd-history";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum HistoryError {
    #[error("run {0} is already recorded")]
    DuplicateRunId(u64),
    #[error("run {run_id} is older than the last recorded run {last}")]
    RunIdRegression { run_id: u64, last: u64 },
    #[error("{path}: not a buildherd history file")]
    BadHeader { path: PathBuf },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("history storage: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub seq: u64,
    pub id: String,
    pub timestamp: Instant,
    pub author: String,
    pub paths: Vec<String>,
}

/// Captured output, as text when it is valid UTF-8.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputRecord {
    #[serde(rename = "output")]
    Text(String),
    #[serde(rename = "output_base64")]
    Base64(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatusRecord {
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub name: String,
    pub status: StepStatusRecord,
    pub exit_code: i32,
    #[serde(flatten)]
    pub output: OutputRecord,
    pub output_truncated: bool,
    pub duration_ms: u64,
}

/// One line of the history file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub run_id: u64,
    pub project: String,
    pub cause: BuildCause,
    pub changes: Vec<ChangeRecord>,
    pub target: Revision,
    pub created_at: Instant,
    pub started_at: Instant,
    pub ended_at: Instant,
    pub outcome: RunOutcome,
    pub steps: Vec<StepRecord>,
}

impl From<&BuildRun> for HistoryRecord {
    fn from(run: &BuildRun) -> Self {
        HistoryRecord {
            run_id: run.run_id,
            project: run.project_id.clone(),
            cause: run.request.cause.clone(),
            changes: run
                .request
                .changes
                .iter()
                .map(|c| ChangeRecord {
                    seq: c.revision.seq,
                    id: c.revision.id.clone(),
                    timestamp: c.timestamp,
                    author: c.author.clone(),
                    paths: c.changed_paths.clone(),
                })
                .collect(),
            target: run.request.target_revision.clone(),
            created_at: run.request.created_at,
            started_at: run.started_at,
            ended_at: run.ended_at,
            outcome: run.outcome.clone(),
            steps: run.step_results.iter().map(step_record).collect(),
        }
    }
}

fn step_record(step: &StepResult) -> StepRecord {
    let (status, exit_code) = match step.status {
        StepStatus::Succeeded => (StepStatusRecord::Succeeded, 0),
        StepStatus::Failed { exit_code } => (StepStatusRecord::Failed, exit_code),
    };
    let output = match std::str::from_utf8(&step.captured_output) {
        Ok(text) => OutputRecord::Text(text.to_string()),
        Err(_) => OutputRecord::Base64(BASE64.encode(&step.captured_output)),
    };
    StepRecord {
        name: step.step_name.clone(),
        status,
        exit_code,
        output,
        output_truncated: step.output_truncated,
        duration_ms: step.duration.0,
    }
}

impl TryFrom<HistoryRecord> for BuildRun {
    type Error = String;

    fn try_from(record: HistoryRecord) -> Result<Self, String> {
        let mut step_results = Vec::with_capacity(record.steps.len());
        for step in record.steps {
            let status = match step.status {
                StepStatusRecord::Succeeded => StepStatus::Succeeded,
                StepStatusRecord::Failed => StepStatus::Failed { exit_code: step.exit_code },
            };
            let captured_output = match step.output {
                OutputRecord::Text(text) => text.into_bytes(),
                OutputRecord::Base64(data) => BASE64.decode(data).map_err(|e| format!("step `{}`: {e}", step.name))?,
            };
            step_results.push(StepResult {
                step_name: step.name,
                status,
                captured_output,
                output_truncated: step.output_truncated,
                duration: Duration(step.duration_ms),
            });
        }
        Ok(BuildRun {
            run_id: record.run_id,
            project_id: record.project,
            request: BuildRequest {
                cause: record.cause,
                changes: record
                    .changes
                    .into_iter()
                    .map(|c| Change {
                        revision: Revision::new(c.id, c.seq),
                        author: c.author,
                        timestamp: c.timestamp,
                        changed_paths: c.paths,
                    })
                    .collect(),
                target_revision: record.target,
                created_at: record.created_at,
            },
            started_at: record.started_at,
            ended_at: record.ended_at,
            step_results,
            outcome: record.outcome,
        })
    }
}

/// Selects runs; unset fields match everything. The time range applies to
/// the start of the run and is inclusive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HistoryFilter {
    pub project: Option<String>,
    pub from: Option<Instant>,
    pub to: Option<Instant>,
    pub outcome: Option<OutcomeKind>,
}

impl HistoryFilter {
    pub fn project(project: impl Into<String>) -> Self {
        HistoryFilter { project: Some(project.into()), ..Self::default() }
    }

    pub fn matches(&self, run: &BuildRun) -> bool {
        self.project.as_ref().is_none_or(|p| *p == run.project_id)
            && self.from.is_none_or(|from| run.started_at >= from)
            && self.to.is_none_or(|to| run.started_at <= to)
            && self.outcome.is_none_or(|o| o == run.outcome.kind())
    }
}

/// Writer handle on a history file. There must be one writer per file.
#[derive(Debug)]
pub struct HistoryStore {
    path: PathBuf,
    file: File,
    last_run_id: Option<u64>,
}

impl HistoryStore {
    /// Opens `path`, creating it with a header if it does not exist.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, HistoryError> {
        let path = path.into();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut contents = Vec::new();
        file.read_to_end(&mut contents)?;
        if contents.is_empty() {
            let header = serde_json::to_string(&Header { format: FORMAT.into(), version: VERSION }).expect("header serializes");
            file.write_all(format!("{header}\n").as_bytes())?;
            file.sync_data()?;
            return Ok(HistoryStore { path, file, last_run_id: None });
        }
        // Drop a record cut short by a crash so the next append starts on a
        // fresh line.
        let complete = contents.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if complete < contents.len() {
            file.set_len(complete as u64)?;
            contents.truncate(complete);
        }
        let runs = parse(&path, &contents)?;
        let last_run_id = runs.iter().map(|r| r.run_id).max();
        Ok(HistoryStore { path, file, last_run_id })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_run_id(&self) -> Option<u64> {
        self.last_run_id
    }

    /// Appends `run` durably. Run ids must strictly increase.
    pub fn append(&mut self, run: &BuildRun) -> Result<(), HistoryError> {
        match self.last_run_id {
            Some(last) if run.run_id == last => return Err(HistoryError::DuplicateRunId(run.run_id)),
            Some(last) if run.run_id < last => {
                let known = self.runs()?.iter().any(|r| r.run_id == run.run_id);
                return Err(if known {
                    HistoryError::DuplicateRunId(run.run_id)
                } else {
                    HistoryError::RunIdRegression { run_id: run.run_id, last }
                });
            }
            _ => {}
        }
        let mut line = serde_json::to_string(&HistoryRecord::from(run)).expect("history record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        self.last_run_id = Some(run.run_id);
        Ok(())
    }

    pub fn runs(&self) -> Result<Vec<BuildRun>, HistoryError> {
        read_history(&self.path)
    }

    /// Matching runs, ascending by run id.
    pub fn query(&self, filter: &HistoryFilter) -> Result<Vec<BuildRun>, HistoryError> {
        query_history(&self.path, filter)
    }
}

/// Reads every run in the history file at `path`. A missing file holds no
/// runs.
pub fn read_history(path: &Path) -> Result<Vec<BuildRun>, HistoryError> {
    let contents = match std::fs::read(path) {
        Ok(contents) => contents,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = contents.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    parse(path, &contents[..complete])
}

pub fn query_history(path: &Path, filter: &HistoryFilter) -> Result<Vec<BuildRun>, HistoryError> {
    let mut runs: Vec<BuildRun> = read_history(path)?.into_iter().filter(|r| filter.matches(r)).collect();
    runs.sort_by_key(|r| r.run_id);
    Ok(runs)
}

fn parse(path: &Path, contents: &[u8]) -> Result<Vec<BuildRun>, HistoryError> {
    let corrupt = |line: usize, message: String| HistoryError::Corrupt { path: path.to_path_buf(), line, message };
    let text = std::str::from_utf8(contents).map_err(|e| corrupt(0, e.to_string()))?;
    let mut lines = text.lines();
    match lines.next().map(serde_json::from_str::<Header>) {
        None => return Ok(Vec::new()),
        Some(Ok(header)) if header.format == FORMAT && header.version == VERSION => {}
        Some(_) => return Err(HistoryError::BadHeader { path: path.to_path_buf() }),
    }
    let mut runs = Vec::new();
    for (i, line) in lines.enumerate() {
        let record: HistoryRecord = serde_json::from_str(line).map_err(|e| corrupt(i + 2, e.to_string()))?;
        runs.push(BuildRun::try_from(record).map_err(|e| corrupt(i + 2, e))?);
    }
    Ok(runs)
}
