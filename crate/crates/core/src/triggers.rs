//! Trigger mechanics: schedule evaluation, repository polling, hook intake
//! and quiet-period coalescing.
//!
//! Everything here is a pure state transition. Hook notifications are only
//! pings; the authoritative list of changes always comes from the
//! repository.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{BuildCause, BuildRequest, Change, Detection, Revision, Schedule, TriggerPolicy};
use crate::time::{Duration, Instant, DAY_MS};
use crate::vcs::{Repository, VcsError};

/// Earliest instant strictly after `now` at which `schedule` fires.
///
/// The `every` interval is anchored at `now`, so feeding each fire back in
/// as the next `now` walks the schedule. Returns `None` for a schedule
/// with nothing to fire.
pub fn next_fire(schedule: &Schedule, now: Instant) -> Option<Instant> {
    let by_interval = schedule.every.filter(|e| !e.is_zero()).map(|every| now + every);
    let day_start = now.0 - now.0 % DAY_MS;
    let by_daily = schedule
        .daily_times
        .iter()
        .map(|tod| {
            let candidate = day_start + tod.offset_ms();
            Instant(if candidate <= now.0 { candidate + DAY_MS } else { candidate })
        })
        .min();
    match (by_interval, by_daily) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Asks the repository whether anything changed since `last_integrated`.
pub fn poll_once<R: Repository + ?Sized>(
    repo: &R,
    last_integrated: &Revision,
    now: Instant,
) -> Result<Option<BuildRequest>, VcsError> {
    let head = repo.head()?;
    if head.seq == last_integrated.seq {
        return Ok(None);
    }
    let changes = repo.changes_since(last_integrated)?;
    Ok(Some(BuildRequest {
        cause: BuildCause::PollDetected { poll_time: now },
        changes,
        target_revision: head,
        created_at: now,
    }))
}

/// A "something changed" ping from the repository.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookNotification {
    pub repo_id: String,
    pub received_at: Instant,
    /// Untrusted; kept for diagnostics only.
    pub claimed_revision: Option<Revision>,
    pub nonce: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectionKind {
    Polled,
    Hooked,
}

impl From<&Detection> for DetectionKind {
    fn from(d: &Detection) -> Self {
        match d {
            Detection::Polled { .. } => DetectionKind::Polled,
            Detection::Hooked {} => DetectionKind::Hooked,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingChange {
    pub change: Change,
    pub arrived_at: Instant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestOutcome {
    /// The nonce was seen before; nothing happened.
    Duplicate,
    Ingested { novel: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum IngestError {
    #[error("notification for repository `{got}` delivered to `{expected}`")]
    WrongRepository { expected: String, got: String },
    #[error(transparent)]
    Vcs(#[from] VcsError),
}

/// Changes gathered for a triggered policy, waiting for their build.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoalescerState {
    pending: Vec<PendingChange>,
    last_build_end: Option<Instant>,
    quiet_period: Duration,
    detection: DetectionKind,
    seen_nonces: BTreeSet<String>,
}

impl CoalescerState {
    pub fn new(detection: DetectionKind, quiet_period: Duration) -> Self {
        CoalescerState {
            pending: Vec::new(),
            last_build_end: None,
            quiet_period,
            detection,
            seen_nonces: BTreeSet::new(),
        }
    }

    /// The coalescer for a triggered policy; other policies have none.
    pub fn for_policy(policy: &TriggerPolicy) -> Option<Self> {
        match policy {
            TriggerPolicy::Triggered { detection, quiet_period } => Some(Self::new(detection.into(), *quiet_period)),
            _ => None,
        }
    }

    pub fn pending(&self) -> &[PendingChange] {
        &self.pending
    }

    pub fn last_build_end(&self) -> Option<Instant> {
        self.last_build_end
    }

    pub fn quiet_period(&self) -> Duration {
        self.quiet_period
    }

    pub fn detection(&self) -> DetectionKind {
        self.detection
    }

    /// Strict hooked integration: one build per change.
    pub fn is_one_per_change(&self) -> bool {
        self.quiet_period.is_zero() && self.detection == DetectionKind::Hooked
    }

    /// Highest pending revision, if any.
    pub fn newest_pending(&self) -> Option<&Revision> {
        self.pending.last().map(|p| &p.change.revision)
    }

    /// Builds the pending changes will turn into if nothing else arrives.
    pub fn backlog(&self) -> usize {
        match self.pending.len() {
            0 => 0,
            n if self.is_one_per_change() => n,
            _ => 1,
        }
    }

    pub fn note_build_end(&mut self, at: Instant) {
        self.last_build_end = Some(at);
    }

    /// Appends the changes not already pending; returns how many were new.
    pub fn absorb(&mut self, changes: impl IntoIterator<Item = Change>, arrived_at: Instant) -> usize {
        let mut novel = 0;
        for change in changes {
            let newest = self.newest_pending().map_or(0, |r| r.seq);
            if change.revision.seq > newest {
                self.pending.push(PendingChange { change, arrived_at });
                novel += 1;
            }
        }
        novel
    }

    /// Takes a hook ping: pulls what changed after both `last_integrated`
    /// and the newest pending change. Never starts a build. A replayed
    /// nonce is a no-op; on a repository error the state is untouched.
    pub fn ingest_notification<R: Repository + ?Sized>(
        &mut self,
        notification: &HookNotification,
        repo: &R,
        last_integrated: &Revision,
    ) -> Result<IngestOutcome, IngestError> {
        if notification.repo_id != repo.repo_id() {
            return Err(IngestError::WrongRepository {
                expected: repo.repo_id().into(),
                got: notification.repo_id.clone(),
            });
        }
        if self.seen_nonces.contains(&notification.nonce) {
            return Ok(IngestOutcome::Duplicate);
        }
        let base = match self.newest_pending() {
            Some(newest) if newest.seq > last_integrated.seq => newest.clone(),
            _ => last_integrated.clone(),
        };
        let changes = repo.changes_since(&base)?;
        self.seen_nonces.insert(notification.nonce.clone());
        let novel = self.absorb(changes, notification.received_at);
        Ok(IngestOutcome::Ingested { novel })
    }

    /// When the pending changes may next be built, ignoring whether a build
    /// is running: the quiet period after the last build, but never before
    /// the first pending change arrived.
    pub fn earliest(&self) -> Option<Instant> {
        let first = self.pending.first()?.arrived_at;
        Some(match self.last_build_end {
            Some(end) => first.max(end + self.quiet_period),
            None => first,
        })
    }

    /// Emits the next build request if the quiet period has elapsed and no
    /// build is running. Strict hooked integration takes only the oldest
    /// pending change; everything else takes all of them.
    pub fn coalesce(&mut self, now: Instant, build_running: bool) -> Option<BuildRequest> {
        if build_running {
            return None;
        }
        let earliest = self.earliest()?;
        if now < earliest {
            return None;
        }
        let take = if self.is_one_per_change() { 1 } else { self.pending.len() };
        let emitted: Vec<PendingChange> = self.pending.drain(..take).collect();
        let first_arrival = emitted[0].arrived_at;
        let cause = match self.detection {
            DetectionKind::Hooked => BuildCause::HookNotified { received_time: first_arrival },
            DetectionKind::Polled => BuildCause::PollDetected { poll_time: first_arrival },
        };
        let changes: Vec<Change> = emitted.into_iter().map(|p| p.change).collect();
        let target_revision = changes[changes.len() - 1].revision.clone();
        Some(BuildRequest { cause, changes, target_revision, created_at: now })
    }

    /// Empties the pending list, e.g. when a commanded build takes over.
    pub fn take_all(&mut self) -> Vec<Change> {
        self.pending.drain(..).map(|p| p.change).collect()
    }
}
