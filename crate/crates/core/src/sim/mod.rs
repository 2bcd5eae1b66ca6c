//! Discrete-event simulation of a CI server under a commit trace.
//!
//! [`simulate`] drives the production [`Orchestrator`] with an in-memory
//! repository and a single stub step of fixed duration, so its numbers
//! describe the real event loop. [`brute_force_replay`] recomputes the same
//! report by walking a millisecond clock tick by tick with the trigger
//! rules written out longhand; the two must agree exactly.
//!
//! A simulation ends once every commit of the trace has been integrated by
//! a finished build (or at the horizon). Builds still queued at that point,
//! which a schedule faster than the build keeps producing, are not run.

mod oracle;

pub use oracle::brute_force_replay_with;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::metrics::{metrics, DepthSample, MetricsReport};
use crate::model::{validate_policy, BuildCause, BuildRun, Detection, PolicyViolation, TriggerPolicy};
use crate::orchestrator::{drive, Event, Orchestrator, Scripted, Until};
use crate::pipeline::{BuildDefinition, BuildStep, Command};
use crate::time::{Duration, Instant};
use crate::triggers::HookNotification;
use crate::vcs::InMemoryRepo;

const SIM_PROJECT: &str = "sim";

/// One developer commit in a trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCommit {
    #[serde(rename = "t_ms")]
    pub at: Instant,
    pub author: String,
    pub paths: Vec<String>,
}

impl TraceCommit {
    pub fn new(at: u64, author: &str, path: &str) -> Self {
        TraceCommit { at: Instant(at), author: author.into(), paths: vec![path.into()] }
    }
}

/// Commits ordered by time.
pub type CommitTrace = Vec<TraceCommit>;

/// One build as seen by the simulator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimBuild {
    pub run_id: u64,
    pub cause: BuildCause,
    pub started_at: Instant,
    pub ended_at: Instant,
    /// Seqs of the changes integrated by this build.
    pub changes: Vec<u64>,
    pub target_seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub metrics: MetricsReport,
    pub builds: Vec<SimBuild>,
    /// Queue depth after each instant where it changed; depth is 0 before
    /// the first sample.
    pub queue_depth: Vec<DepthSample>,
}

impl SimReport {
    /// Feedback latency of every integrated change, in build order.
    pub fn latencies(&self, trace: &[TraceCommit]) -> Vec<Duration> {
        self.builds
            .iter()
            .flat_map(|b| b.changes.iter().map(move |seq| b.ended_at - trace[*seq as usize - 1].at))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("a levered policy has no autonomous behavior to simulate")]
    LeveredPolicy,
    #[error("invalid policy: {0:?}")]
    InvalidPolicy(Vec<PolicyViolation>),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("build duration must be positive")]
    ZeroBuildDuration,
}

/// Simulation parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Simulation {
    pub policy: TriggerPolicy,
    pub build_duration: Duration,
    /// Nothing after this instant is processed; builds still running then
    /// are left out of the report.
    pub horizon: Option<Instant>,
}

impl Simulation {
    pub fn new(policy: TriggerPolicy, build_duration: Duration) -> Self {
        Simulation { policy, build_duration, horizon: None }
    }

    pub fn with_horizon(mut self, horizon: Instant) -> Self {
        self.horizon = Some(horizon);
        self
    }

    pub(crate) fn check(&self, trace: &[TraceCommit]) -> Result<(), SimError> {
        if matches!(self.policy, TriggerPolicy::Levered {}) {
            return Err(SimError::LeveredPolicy);
        }
        validate_policy(&self.policy).map_err(SimError::InvalidPolicy)?;
        if self.build_duration.is_zero() {
            return Err(SimError::ZeroBuildDuration);
        }
        for (i, commit) in trace.iter().enumerate() {
            if commit.paths.is_empty() {
                return Err(SimError::InvalidTrace(format!("commit {i} touches no paths")));
            }
            if i > 0 && commit.at < trace[i - 1].at {
                return Err(SimError::InvalidTrace(format!("commit {i} goes back in time")));
            }
        }
        Ok(())
    }

    /// Event-driven run over the production orchestrator.
    pub fn run(&self, trace: &[TraceCommit]) -> Result<SimReport, SimError> {
        self.check(trace)?;
        let definition = BuildDefinition {
            project_id: SIM_PROJECT.into(),
            steps: vec![BuildStep::new("build", Command::Sleep { duration: self.build_duration })],
        };
        let mut orch = Orchestrator::new(Instant::ZERO);
        orch.add_project(self.policy.clone(), definition, InMemoryRepo::new(SIM_PROJECT))
            .map_err(|e| SimError::InvalidTrace(format!("{e}")))?;

        let hooked = matches!(self.policy, TriggerPolicy::Triggered { detection: Detection::Hooked {}, .. });
        let mut script = Vec::with_capacity(trace.len() * 2);
        for (i, commit) in trace.iter().enumerate() {
            script.push(Scripted::Commit {
                project_id: SIM_PROJECT.into(),
                author: commit.author.clone(),
                paths: commit.paths.clone(),
                at: commit.at,
            });
            if hooked {
                script.push(Scripted::Event(Event::HookReceived(HookNotification {
                    repo_id: SIM_PROJECT.into(),
                    received_at: commit.at,
                    claimed_revision: None,
                    nonce: format!("sim-{i}"),
                })));
            }
        }

        let mut samples = Vec::new();
        let mut last_depth = 0;
        let runs = drive(
            &mut orch,
            script,
            self.horizon,
            Until::Integrated,
            |repo, author, paths, at| repo.commit(author, paths, at).map(|_| ()),
            |orch, at| {
                let depth = orch.project(SIM_PROJECT).map_or(0, |p| p.queue_depth());
                if depth != last_depth {
                    samples.push(DepthSample { at, depth });
                    last_depth = depth;
                }
            },
        );
        Ok(SimReport { metrics: metrics(&runs, &samples), builds: runs.iter().map(sim_build).collect(), queue_depth: samples })
    }

    pub fn brute_force(&self, trace: &[TraceCommit]) -> Result<SimReport, SimError> {
        brute_force_replay_with(self, trace)
    }
}

fn sim_build(run: &BuildRun) -> SimBuild {
    SimBuild {
        run_id: run.run_id,
        cause: run.request.cause.clone(),
        started_at: run.started_at,
        ended_at: run.ended_at,
        changes: run.request.changes.iter().map(|c| c.revision.seq).collect(),
        target_seq: run.request.target_revision.seq,
    }
}

/// Simulates `trace` under `policy` with builds of fixed `build_duration`.
pub fn simulate(trace: &[TraceCommit], policy: &TriggerPolicy, build_duration: Duration) -> Result<SimReport, SimError> {
    Simulation::new(policy.clone(), build_duration).run(trace)
}

/// Tick-by-tick oracle for [`simulate`].
pub fn brute_force_replay(
    trace: &[TraceCommit],
    policy: &TriggerPolicy,
    build_duration: Duration,
) -> Result<SimReport, SimError> {
    Simulation::new(policy.clone(), build_duration).brute_force(trace)
}
