//! Commit traces as JSON lines: `{"t_ms":0,"author":"ann","paths":["src/a.rs"]}`.

use std::fs;
use std::io;
use std::path::Path;

use buildherd_core::{CommitTrace, TraceCommit};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("cannot read trace: {0}")]
    Io(#[from] io::Error),
    #[error("trace line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

pub fn parse_trace(text: &str) -> Result<CommitTrace, TraceError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| serde_json::from_str::<TraceCommit>(line).map_err(|source| TraceError::Parse { line: i + 1, source }))
        .collect()
}

pub fn read_trace(path: &Path) -> Result<CommitTrace, TraceError> {
    parse_trace(&fs::read_to_string(path)?)
}

pub fn write_trace(trace: &[TraceCommit]) -> String {
    trace.iter().map(|c| serde_json::to_string(c).expect("trace commit serializes") + "\n").collect()
}
