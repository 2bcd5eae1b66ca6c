//! Feedback metrics over a set of finished runs.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{feedback_latency, BuildRun, OutcomeKind};
use crate::time::{Duration, Instant};

/// An unreduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
}

impl Ratio {
    pub fn as_f64(self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

/// Queue depth observed at an instant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthSample {
    pub at: Instant,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_builds: usize,
    pub n_changes: usize,
    /// Absent when there were no builds.
    pub changes_per_build: Option<Ratio>,
    /// Integer mean in milliseconds, rounded down. Absent without changes.
    pub mean_latency: Option<Duration>,
    pub max_latency: Option<Duration>,
    pub max_queue_depth: usize,
}

/// Summarizes `runs`. Errored runs count as builds but not as feedback:
/// their changes are integrated again by a later run.
pub fn metrics(runs: &[BuildRun], queue_depth_samples: &[DepthSample]) -> MetricsReport {
    let latencies: Vec<Duration> = runs
        .iter()
        .filter(|run| run.outcome.kind() != OutcomeKind::Errored)
        .flat_map(|run| run.request.changes.iter().filter_map(move |c| feedback_latency(run, c).ok()))
        .collect();
    let n_builds = runs.len();
    let n_changes = latencies.len();
    let total: u64 = latencies.iter().map(|d| d.0).sum();
    MetricsReport {
        n_builds,
        n_changes,
        changes_per_build: (n_builds > 0)
            .then(|| Ratio { numerator: n_changes as u64, denominator: n_builds as u64 }),
        mean_latency: (n_changes > 0).then(|| Duration(total / n_changes as u64)),
        max_latency: latencies.iter().copied().max(),
        max_queue_depth: queue_depth_samples.iter().map(|s| s.depth).max().unwrap_or(0),
    }
}
