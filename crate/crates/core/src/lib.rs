//! Core of buildherd, a small continuous-integration server.
//!
//! Builds start in one of the ways an automated build can be set into
//! motion: on demand (a lever someone pulls), on a schedule, or triggered by
//! repository changes that are either polled for or pushed by a hook. A
//! triggered policy may add a quiet period that gathers changes into one
//! build. [`model::classify`] places any [`model::TriggerPolicy`] in that
//! taxonomy.
//!
//! This crate is `no_std` (it needs `alloc`) and free of IO: the event loop
//! in [`orchestrator`] is a pure state machine, pipelines run through the
//! [`pipeline::StepRunner`] trait, repositories through
//! [`vcs::Repository`]. Processes, files, HTTP and the CLI live in the
//! `buildherd` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod pipeline;
pub mod sim;
pub mod time;
pub mod triggers;
pub mod vcs;

pub use metrics::{metrics, DepthSample, MetricsReport, Ratio};
pub use model::{
    classify, feedback_latency, validate_policy, BuildCause, BuildRequest, BuildRun, Change, ClassificationLabel,
    Detection, Maturity, Mode, OutcomeKind, Revision, RunOutcome, Schedule, TriggerKind, TriggerPolicy,
};
pub use orchestrator::{Action, Event, Orchestrator, ProjectStatus};
pub use pipeline::{BuildDefinition, BuildStep, Command, StepResult, StepStatus};
pub use sim::{brute_force_replay, simulate, CommitTrace, SimReport, Simulation, TraceCommit};
pub use time::{Clock, Duration, Instant, ManualClock, TimeOfDay};
pub use triggers::{CoalescerState, HookNotification};
pub use vcs::{InMemoryRepo, Repository, VcsError};
