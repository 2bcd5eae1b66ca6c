//! Step execution with real processes and the wall clock.

use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Command as Process, Stdio};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use buildherd_core::pipeline::{run_pipeline, BuildDefinition, BuildStep, Command, SpawnError, StepOutput, StepRunner};
use buildherd_core::{BuildRequest, BuildRun, Clock, Instant};

/// Milliseconds since the Unix epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Instant {
        let ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
        Instant(ms)
    }
}

/// Runs `exec` steps as child processes inside a workspace directory.
/// Stub commands behave as in simulation, except that `sleep` blocks.
#[derive(Clone, Debug)]
pub struct ProcessRunner {
    workspace: PathBuf,
}

impl ProcessRunner {
    pub fn new(workspace: impl Into<PathBuf>) -> Self {
        ProcessRunner { workspace: workspace.into() }
    }

    pub fn workspace(&self) -> &Path {
        &self.workspace
    }
}

impl StepRunner for ProcessRunner {
    fn run_step(&mut self, step: &BuildStep, request: &BuildRequest) -> Result<StepOutput, SpawnError> {
        match &step.command {
            Command::Succeed => Ok(StepOutput { exit_code: 0, output: Vec::new() }),
            Command::Fail { exit_code } => Ok(StepOutput { exit_code: if *exit_code == 0 { 1 } else { *exit_code }, output: Vec::new() }),
            Command::Sleep { duration } => {
                thread::sleep(std::time::Duration::from_millis(duration.0));
                Ok(StepOutput { exit_code: 0, output: Vec::new() })
            }
            Command::Exec { program, args } => {
                spawn(program, args, &self.workspace, request).map_err(|e| SpawnError(format!("cannot spawn `{program}`: {e}")))
            }
        }
    }
}

fn spawn(program: &str, args: &[String], workspace: &Path, request: &BuildRequest) -> io::Result<StepOutput> {
    let mut child = Process::new(program)
        .args(args)
        .current_dir(workspace)
        .env("BUILDHERD_TARGET_SEQ", request.target_revision.seq.to_string())
        .env("BUILDHERD_TARGET_ID", &request.target_revision.id)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;

    // stderr is drained on its own thread so neither pipe can fill up.
    let mut stderr = child.stderr.take().expect("piped stderr");
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        stderr.read_to_end(&mut buf).map(|_| buf)
    });
    let mut output = Vec::new();
    child.stdout.take().expect("piped stdout").read_to_end(&mut output)?;
    let err_output = err_reader.join().map_err(|_| io::Error::other("stderr reader panicked"))??;
    output.extend(err_output);

    let status = child.wait()?;
    // A process killed by a signal has no exit code.
    let exit_code = status.code().unwrap_or(-1);
    Ok(StepOutput { exit_code, output })
}

#[derive(Debug, thiserror::Error)]
pub enum ExecuteError {
    #[error("workspace {0} is not a directory")]
    MissingWorkspace(PathBuf),
}

/// Runs `def` for `request` in `workspace` against the wall clock.
pub fn execute(
    def: &BuildDefinition,
    run_id: u64,
    request: BuildRequest,
    workspace: &Path,
    output_cap: usize,
) -> Result<BuildRun, ExecuteError> {
    if !workspace.is_dir() {
        return Err(ExecuteError::MissingWorkspace(workspace.to_path_buf()));
    }
    let mut runner = ProcessRunner::new(workspace);
    Ok(run_pipeline(def, run_id, request, &mut runner, &SystemClock, output_cap))
}
