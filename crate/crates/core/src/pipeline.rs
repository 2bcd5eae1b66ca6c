//! The build script: an ordered list of steps whose continuation depends
//! on how the previous step went.
//!
//! Jumps (`goto`) may only go forward, so an execution visits every step at
//! most once and always terminates. Execution itself is generic over a
//! [`StepRunner`]; this crate ships a [`StubRunner`] for the builtin stub
//! commands, process execution lives with the std companion crate.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{BuildRequest, BuildRun, RunOutcome};
use crate::time::{Clock, Duration, ManualClock};

/// Default cap on captured step output.
pub const DEFAULT_OUTPUT_CAP: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Run `program` with `args` inside the build workspace.
    Exec {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
    Succeed,
    Fail { exit_code: i32 },
    Sleep {
        #[serde(rename = "ms")]
        duration: Duration,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnSuccess {
    #[default]
    Continue,
    Goto(String),
    StopSuccess,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnFailure {
    #[default]
    Halt,
    Goto(String),
    ContinueAnyway,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStep {
    pub name: String,
    pub command: Command,
    #[serde(default)]
    pub on_success: OnSuccess,
    #[serde(default)]
    pub on_failure: OnFailure,
}

impl BuildStep {
    pub fn new(name: impl Into<String>, command: Command) -> Self {
        BuildStep { name: name.into(), command, on_success: OnSuccess::Continue, on_failure: OnFailure::Halt }
    }

    pub fn on_success(mut self, next: OnSuccess) -> Self {
        self.on_success = next;
        self
    }

    pub fn on_failure(mut self, next: OnFailure) -> Self {
        self.on_failure = next;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildDefinition {
    pub project_id: String,
    pub steps: Vec<BuildStep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Succeeded,
    Failed { exit_code: i32 },
}

impl StepStatus {
    pub fn from_exit_code(code: i32) -> Self {
        if code == 0 {
            StepStatus::Succeeded
        } else {
            StepStatus::Failed { exit_code: code }
        }
    }

    pub fn is_failure(self) -> bool {
        matches!(self, StepStatus::Failed { .. })
    }
}

/// Record of one executed step. Steps that were jumped over leave no record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    pub step_name: String,
    pub status: StepStatus,
    pub captured_output: Vec<u8>,
    /// Set when `captured_output` was cut at the output cap.
    pub output_truncated: bool,
    pub duration: Duration,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum DefinitionViolation {
    #[error("definition has no steps")]
    NoSteps,
    #[error("duplicate step name `{0}`")]
    DuplicateName(String),
    #[error("step `{from}` jumps to missing step `{target}`")]
    MissingTarget { from: String, target: String },
    #[error("backward goto from `{from}` to `{target}`")]
    BackwardGoto { from: String, target: String },
}

fn goto_targets(step: &BuildStep) -> impl Iterator<Item = &String> {
    let on_success = match &step.on_success {
        OnSuccess::Goto(t) => Some(t),
        _ => None,
    };
    let on_failure = match &step.on_failure {
        OnFailure::Goto(t) => Some(t),
        _ => None,
    };
    on_success.into_iter().chain(on_failure)
}

/// Reports an empty step list, duplicate names, and missing or backward
/// goto targets. A goto to the step itself counts as backward.
pub fn validate_definition(def: &BuildDefinition) -> Result<(), Vec<DefinitionViolation>> {
    let mut violations = Vec::new();
    if def.steps.is_empty() {
        violations.push(DefinitionViolation::NoSteps);
    }
    let mut first_index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, step) in def.steps.iter().enumerate() {
        if first_index.insert(step.name.as_str(), i).is_some() {
            violations.push(DefinitionViolation::DuplicateName(step.name.clone()));
        }
    }
    for (i, step) in def.steps.iter().enumerate() {
        for target in goto_targets(step) {
            // Duplicates already reported; resolve to the first occurrence.
            match def.steps.iter().position(|s| &s.name == target) {
                None => violations.push(DefinitionViolation::MissingTarget {
                    from: step.name.clone(),
                    target: target.clone(),
                }),
                Some(j) if j <= i => violations.push(DefinitionViolation::BackwardGoto {
                    from: step.name.clone(),
                    target: target.clone(),
                }),
                Some(_) => {}
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Next {
    Step(usize),
    StopSuccess,
    StopFailure,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("step index {index} out of range for {len} steps")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("goto target `{0}` does not exist")]
    UnknownTarget(String),
}

/// Decides what runs after step `current` finished with `status`.
pub fn plan_next(def: &BuildDefinition, current: usize, status: StepStatus) -> Result<Next, PlanError> {
    let len = def.steps.len();
    let step = def.steps.get(current).ok_or(PlanError::IndexOutOfRange { index: current, len })?;
    let is_last = current + 1 == len;
    let goto = |target: &String| {
        def.steps
            .iter()
            .position(|s| &s.name == target)
            .map(Next::Step)
            .ok_or_else(|| PlanError::UnknownTarget(target.clone()))
    };
    match status {
        StepStatus::Succeeded => match &step.on_success {
            OnSuccess::Continue if is_last => Ok(Next::StopSuccess),
            OnSuccess::Continue => Ok(Next::Step(current + 1)),
            OnSuccess::Goto(target) => goto(target),
            OnSuccess::StopSuccess => Ok(Next::StopSuccess),
        },
        StepStatus::Failed { .. } => match &step.on_failure {
            OnFailure::Halt => Ok(Next::StopFailure),
            OnFailure::Goto(target) => goto(target),
            OnFailure::ContinueAnyway if is_last => Ok(Next::StopFailure),
            OnFailure::ContinueAnyway => Ok(Next::Step(current + 1)),
        },
    }
}

/// Raw result of running one step's command.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepOutput {
    pub exit_code: i32,
    pub output: Vec<u8>,
}

/// The command could not be started at all.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct SpawnError(pub String);

/// Executes a single step's command.
pub trait StepRunner {
    fn run_step(&mut self, step: &BuildStep, request: &BuildRequest) -> Result<StepOutput, SpawnError>;
}

/// Runs the builtin stub commands against a [`ManualClock`]; `sleep`
/// advances the clock instead of blocking. `exec` commands cannot be
/// spawned.
pub struct StubRunner<'c> {
    clock: &'c ManualClock,
}

impl<'c> StubRunner<'c> {
    pub fn new(clock: &'c ManualClock) -> Self {
        StubRunner { clock }
    }
}

impl StepRunner for StubRunner<'_> {
    fn run_step(&mut self, step: &BuildStep, _request: &BuildRequest) -> Result<StepOutput, SpawnError> {
        match &step.command {
            Command::Succeed => Ok(StepOutput { exit_code: 0, output: Vec::new() }),
            Command::Fail { exit_code } => Ok(StepOutput { exit_code: if *exit_code == 0 { 1 } else { *exit_code }, output: Vec::new() }),
            Command::Sleep { duration } => {
                self.clock.advance(*duration);
                Ok(StepOutput { exit_code: 0, output: Vec::new() })
            }
            Command::Exec { program, .. } => Err(SpawnError(alloc::format!("cannot spawn `{program}`: no process support"))),
        }
    }
}

/// Executes `def` for `request`, starting at the first step and following
/// [`plan_next`].
///
/// The outcome is `Failed` naming the first failing step whenever any
/// executed step failed, even if later steps ran. A step whose command
/// cannot be spawned ends the run as `Errored` and leaves no step record.
pub fn run_pipeline<R, C>(
    def: &BuildDefinition,
    run_id: u64,
    request: BuildRequest,
    runner: &mut R,
    clock: &C,
    output_cap: usize,
) -> BuildRun
where
    R: StepRunner + ?Sized,
    C: Clock + ?Sized,
{
    let started_at = clock.now();
    let mut step_results = Vec::new();
    let mut first_failure: Option<String> = None;
    let mut errored: Option<String> = None;

    let mut next = if def.steps.is_empty() { Next::StopSuccess } else { Next::Step(0) };
    while let Next::Step(index) = next {
        let step = &def.steps[index];
        let before = clock.now();
        let output = match runner.run_step(step, &request) {
            Ok(output) => output,
            Err(SpawnError(reason)) => {
                errored = Some(alloc::format!("step `{}`: {reason}", step.name));
                break;
            }
        };
        let status = StepStatus::from_exit_code(output.exit_code);
        if status.is_failure() && first_failure.is_none() {
            first_failure = Some(step.name.clone());
        }
        let mut captured_output = output.output;
        let output_truncated = captured_output.len() > output_cap;
        captured_output.truncate(output_cap);
        step_results.push(StepResult {
            step_name: step.name.clone(),
            status,
            captured_output,
            output_truncated,
            duration: clock.now().saturating_since(before),
        });
        next = match plan_next(def, index, status) {
            Ok(next) => next,
            Err(e) => {
                errored = Some(alloc::format!("{e}"));
                break;
            }
        };
    }

    let outcome = match (errored, first_failure) {
        (Some(reason), _) => RunOutcome::Errored { reason },
        (None, Some(step_name)) => RunOutcome::Failed { step_name },
        (None, None) => RunOutcome::Success,
    };
    BuildRun {
        run_id,
        project_id: def.project_id.clone(),
        request,
        started_at,
        ended_at: clock.now(),
        step_results,
        outcome,
    }
}
