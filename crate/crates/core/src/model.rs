//! Domain values shared by every part of the orchestrator, and the
//! classification of a trigger policy into the build-method taxonomy.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::pipeline::StepResult;
use crate::time::{Duration, Instant, TimeOfDay};

/// A repository state. `seq` counts changes since the empty repository.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Revision {
    pub id: String,
    pub seq: u64,
}

impl Revision {
    /// Identifier of the empty repository at `seq` 0.
    pub const EMPTY_ID: &'static str = "0000000000000000";

    pub fn initial() -> Self {
        Revision { id: String::from(Self::EMPTY_ID), seq: 0 }
    }

    pub fn new(id: impl Into<String>, seq: u64) -> Self {
        Revision { id: id.into(), seq }
    }

    pub fn is_initial(&self) -> bool {
        self.seq == 0
    }
}

/// One delta in the central repository.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Change {
    pub revision: Revision,
    pub author: String,
    pub timestamp: Instant,
    pub changed_paths: Vec<String>,
}

/// When builds start.
///
/// The JSON form mirrors the variants one to one, with all durations in
/// integer milliseconds:
///
/// ```json
/// {"levered":{}}
/// {"scheduled":{"daily":["02:00"],"every_ms":3600000}}
/// {"triggered":{"polled":{"interval_ms":60000},"quiet_ms":0}}
/// {"triggered":{"hooked":{},"quiet_ms":120000}}
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerPolicy {
    /// Builds only start when someone pulls the lever.
    Levered {},
    Scheduled(Schedule),
    Triggered {
        #[serde(flatten)]
        detection: Detection,
        /// Zero means every change is integrated on its own.
        #[serde(rename = "quiet_ms", default)]
        quiet_period: Duration,
    },
}

/// How a triggered policy learns about repository changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detection {
    Polled {
        #[serde(rename = "interval_ms")]
        interval: Duration,
    },
    Hooked {},
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    /// Times of day (UTC day boundaries), sorted and unique.
    #[serde(rename = "daily", default, skip_serializing_if = "Vec::is_empty")]
    pub daily_times: Vec<TimeOfDay>,
    /// Fixed interval, anchored at the previous fire.
    #[serde(rename = "every_ms", default, skip_serializing_if = "Option::is_none")]
    pub every: Option<Duration>,
}

impl Schedule {
    pub fn daily(times: impl IntoIterator<Item = TimeOfDay>) -> Self {
        Schedule { daily_times: times.into_iter().collect(), every: None }
    }

    pub fn every(interval: Duration) -> Self {
        Schedule { daily_times: Vec::new(), every: Some(interval) }
    }
}

impl TriggerPolicy {
    pub fn levered() -> Self {
        TriggerPolicy::Levered {}
    }

    pub fn hooked(quiet_period: Duration) -> Self {
        TriggerPolicy::Triggered { detection: Detection::Hooked {}, quiet_period }
    }

    pub fn polled(interval: Duration, quiet_period: Duration) -> Self {
        TriggerPolicy::Triggered { detection: Detection::Polled { interval }, quiet_period }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    OnDemand,
    Continual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Maturity {
    None,
    Transitional,
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TriggerKind {
    None,
    Scheduled,
    Polled,
    Hooked,
}

/// A leaf of the build-method taxonomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassificationLabel {
    pub mode: Mode,
    pub maturity: Maturity,
    pub trigger_kind: TriggerKind,
}

impl fmt::Display for ClassificationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{:?}/{:?}", self.mode, self.maturity, self.trigger_kind)
    }
}

/// Places a policy in the taxonomy.
///
/// On-demand builds have no maturity. Schedules are transitional. Triggered
/// builds are strict only when every change gets its own integration, i.e.
/// the quiet period is zero; any quiet period makes them transitional.
pub fn classify(policy: &TriggerPolicy) -> ClassificationLabel {
    match policy {
        TriggerPolicy::Levered {} => ClassificationLabel {
            mode: Mode::OnDemand,
            maturity: Maturity::None,
            trigger_kind: TriggerKind::None,
        },
        TriggerPolicy::Scheduled(_) => ClassificationLabel {
            mode: Mode::Continual,
            maturity: Maturity::Transitional,
            trigger_kind: TriggerKind::Scheduled,
        },
        TriggerPolicy::Triggered { detection, quiet_period } => ClassificationLabel {
            mode: Mode::Continual,
            maturity: if quiet_period.is_zero() { Maturity::Strict } else { Maturity::Transitional },
            trigger_kind: match detection {
                Detection::Polled { .. } => TriggerKind::Polled,
                Detection::Hooked {} => TriggerKind::Hooked,
            },
        },
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PolicyViolation {
    #[error("interval must be positive")]
    NonPositivePollInterval,
    #[error("empty schedule")]
    EmptySchedule,
    #[error("schedule interval must be positive")]
    NonPositiveScheduleInterval,
    #[error("daily times must be sorted and unique")]
    UnsortedDailyTimes,
}

/// Collects every invariant violation of `policy`.
pub fn validate_policy(policy: &TriggerPolicy) -> Result<(), Vec<PolicyViolation>> {
    let mut violations = Vec::new();
    match policy {
        TriggerPolicy::Levered {} => {}
        TriggerPolicy::Scheduled(schedule) => {
            if schedule.daily_times.is_empty() && schedule.every.is_none() {
                violations.push(PolicyViolation::EmptySchedule);
            }
            if schedule.every.is_some_and(Duration::is_zero) {
                violations.push(PolicyViolation::NonPositiveScheduleInterval);
            }
            if schedule.daily_times.windows(2).any(|w| w[0] >= w[1]) {
                violations.push(PolicyViolation::UnsortedDailyTimes);
            }
        }
        TriggerPolicy::Triggered { detection, .. } => {
            if let Detection::Polled { interval } = detection {
                if interval.is_zero() {
                    violations.push(PolicyViolation::NonPositivePollInterval);
                }
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Why a build was requested.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildCause {
    Commanded { actor: String },
    ScheduleFire { fire_time: Instant },
    PollDetected { poll_time: Instant },
    HookNotified { received_time: Instant },
}

impl BuildCause {
    pub fn kind(&self) -> &'static str {
        match self {
            BuildCause::Commanded { .. } => "commanded",
            BuildCause::ScheduleFire { .. } => "schedule_fire",
            BuildCause::PollDetected { .. } => "poll_detected",
            BuildCause::HookNotified { .. } => "hook_notified",
        }
    }
}

/// A demanded integration of `target_revision`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildRequest {
    pub cause: BuildCause,
    /// Sorted by revision seq; the last one is the target when non-empty.
    pub changes: Vec<Change>,
    pub target_revision: Revision,
    pub created_at: Instant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Success,
    Failed { step_name: String },
    /// Infrastructure fault: the pipeline could not be carried out.
    Errored { reason: String },
}

impl RunOutcome {
    pub fn kind(&self) -> OutcomeKind {
        match self {
            RunOutcome::Success => OutcomeKind::Success,
            RunOutcome::Failed { .. } => OutcomeKind::Failed,
            RunOutcome::Errored { .. } => OutcomeKind::Errored,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Success,
    Failed,
    Errored,
}

/// The executed record of one build.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildRun {
    pub run_id: u64,
    pub project_id: String,
    pub request: BuildRequest,
    pub started_at: Instant,
    pub ended_at: Instant,
    pub step_results: Vec<StepResult>,
    pub outcome: RunOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum LatencyError {
    #[error("change at seq {seq} is not part of run {run_id}")]
    ChangeNotInRun { run_id: u64, seq: u64 },
}

/// Time from `change` landing in the repository to the end of the run
/// that integrated it.
pub fn feedback_latency(run: &BuildRun, change: &Change) -> Result<Duration, LatencyError> {
    let included = run.request.changes.iter().any(|c| c.revision == change.revision);
    if !included {
        return Err(LatencyError::ChangeNotInRun { run_id: run.run_id, seq: change.revision.seq });
    }
    Ok(run.ended_at.saturating_since(change.timestamp))
}
