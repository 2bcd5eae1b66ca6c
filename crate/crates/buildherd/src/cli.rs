//! The `buildherd` command line.
//!
//! Output is line oriented: one `key=value` pair or one record per line.
//! Exit status is 0 on success, 1 when the operation fails and 2 on a
//! usage error.

use std::io::Write;
use std::path::PathBuf;

use buildherd_core::model::{classify, OutcomeKind, RunOutcome, TriggerPolicy};
use buildherd_core::{BuildRun, Duration, Instant, ProjectStatus, SimReport, Simulation};
use clap::{Parser, Subcommand, ValueEnum};

use crate::client::Client;
use crate::config::{ServiceConfig, DEFAULT_LISTEN};
use crate::history::{query_history, HistoryFilter};
use crate::server::{Receipt, Server};
use crate::trace::read_trace;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "buildherd", version, about = "A small continuous integration server")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the server until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Command a build, through a running server or in this process.
    Build {
        project: String,
        #[arg(long, conflicts_with = "config")]
        server: Option<String>,
        /// Build in-process from this config instead of asking a server.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "cli")]
        actor: String,
    },
    /// Print the taxonomy label of a trigger policy.
    Classify {
        #[arg(long)]
        policy: String,
    },
    /// Show a project's state on a running server.
    Status {
        project: String,
        #[arg(long, default_value = DEFAULT_LISTEN)]
        server: String,
    },
    /// List a project's finished runs.
    History {
        project: String,
        #[arg(long, conflicts_with = "history")]
        server: Option<String>,
        /// Read this history file directly.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, value_enum)]
        outcome: Option<OutcomeArg>,
    },
    /// Simulate a commit trace under a trigger policy.
    Simulate {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        policy: String,
        /// Build duration in milliseconds.
        #[arg(long)]
        duration: u64,
        /// Stop after this instant (milliseconds).
        #[arg(long)]
        horizon: Option<u64>,
        /// Print the full report as JSON instead of the metrics.
        #[arg(long)]
        json: bool,
        /// Also write the full JSON report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutcomeArg {
    Success,
    Failed,
    Errored,
}

impl From<OutcomeArg> for OutcomeKind {
    fn from(arg: OutcomeArg) -> Self {
        match arg {
            OutcomeArg::Success => OutcomeKind::Success,
            OutcomeArg::Failed => OutcomeKind::Failed,
            OutcomeArg::Errored => OutcomeKind::Errored,
        }
    }
}

enum Failure {
    Usage(String),
    Operation(String),
}

fn op(e: impl std::fmt::Display) -> Failure {
    Failure::Operation(e.to_string())
}

/// Runs the command line `args` (including the program name) and returns
/// the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(Failure::Usage(message)) => {
            let _ = writeln!(err, "error: {message}");
            EXIT_USAGE
        }
        Err(Failure::Operation(message)) => {
            let _ = writeln!(err, "error: {message}");
            EXIT_FAILURE
        }
    }
}

fn parse_policy(json: &str) -> Result<TriggerPolicy, Failure> {
    serde_json::from_str(json).map_err(|e| Failure::Usage(format!("invalid policy JSON: {e}")))
}

fn dispatch(command: Cmd, out: &mut dyn Write) -> Result<i32, Failure> {
    match command {
        Cmd::Serve { config } => {
            let config = ServiceConfig::load(&config).map_err(|e| Failure::Usage(e.to_string()))?;
            let handle = crate::service::start(config).map_err(op)?;
            writeln!(out, "listening={}", handle.addr()).map_err(op)?;
            out.flush().map_err(op)?;
            handle.wait().map_err(op)?;
            Ok(EXIT_OK)
        }
        Cmd::Build { project, server, config: Some(config), actor } => {
            debug_assert!(server.is_none());
            let config = ServiceConfig::load(&config).map_err(|e| Failure::Usage(e.to_string()))?;
            let mut server = Server::new(config).map_err(op)?;
            let run = server.build_now(&project, &actor).map_err(op)?;
            write_run(out, &run).map_err(op)?;
            Ok(if run.outcome == RunOutcome::Success { EXIT_OK } else { EXIT_FAILURE })
        }
        Cmd::Build { project, server, config: None, actor } => {
            let client = Client::new(server.as_deref().unwrap_or(DEFAULT_LISTEN));
            let receipt = client.build(&project, &actor).map_err(op)?;
            write_receipt(out, &receipt).map_err(op)?;
            Ok(EXIT_OK)
        }
        Cmd::Classify { policy } => {
            let policy = parse_policy(&policy)?;
            writeln!(out, "{}", classify(&policy)).map_err(op)?;
            Ok(EXIT_OK)
        }
        Cmd::Status { project, server } => {
            let status = Client::new(&server).status(&project).map_err(op)?;
            write_status(out, &status).map_err(op)?;
            Ok(EXIT_OK)
        }
        Cmd::History { project, server, history, outcome } => {
            let outcome = outcome.map(OutcomeKind::from);
            let runs: Vec<BuildRun> = match history {
                Some(path) => {
                    let filter = HistoryFilter { outcome, ..HistoryFilter::project(&project) };
                    query_history(&path, &filter).map_err(op)?
                }
                None => {
                    let client = Client::new(server.as_deref().unwrap_or(DEFAULT_LISTEN));
                    let records = client.runs(&project, outcome).map_err(op)?;
                    records.into_iter().map(BuildRun::try_from).collect::<Result<_, _>>().map_err(op)?
                }
            };
            for run in &runs {
                writeln!(out, "{}", run_line(run)).map_err(op)?;
            }
            Ok(EXIT_OK)
        }
        Cmd::Simulate { trace, policy, duration, horizon, json, report } => {
            let policy = parse_policy(&policy)?;
            let trace = read_trace(&trace).map_err(op)?;
            let mut sim = Simulation::new(policy, Duration(duration));
            if let Some(horizon) = horizon {
                sim = sim.with_horizon(Instant(horizon));
            }
            let result = sim.run(&trace).map_err(op)?;
            let document = serde_json::to_string_pretty(&result).expect("report serializes");
            if let Some(path) = report {
                std::fs::write(&path, format!("{document}\n")).map_err(|e| op(format!("{}: {e}", path.display())))?;
            }
            if json {
                writeln!(out, "{document}").map_err(op)?;
            } else {
                out.write_all(metrics_lines(&result).as_bytes()).map_err(op)?;
            }
            Ok(EXIT_OK)
        }
    }
}

fn or_none<T: std::fmt::Display>(value: Option<T>) -> String {
    value.map_or_else(|| "none".to_string(), |v| v.to_string())
}

/// The metrics of `report`, one `key=value` per line.
pub fn metrics_lines(report: &SimReport) -> String {
    let m = &report.metrics;
    format!(
        "n_builds={}\nn_changes={}\nchanges_per_build={}\nmean_latency_ms={}\nmax_latency_ms={}\nmax_queue_depth={}\n",
        m.n_builds,
        m.n_changes,
        or_none(m.changes_per_build),
        or_none(m.mean_latency.map(|d| d.0)),
        or_none(m.max_latency.map(|d| d.0)),
        m.max_queue_depth,
    )
}

fn outcome_text(outcome: &RunOutcome) -> String {
    match outcome {
        RunOutcome::Success => "success".into(),
        RunOutcome::Failed { step_name } => format!("failed:{step_name}"),
        RunOutcome::Errored { .. } => "errored".into(),
    }
}

/// One history line for `run`.
pub fn run_line(run: &BuildRun) -> String {
    format!(
        "run_id={} project={} cause={} outcome={} started_at={} ended_at={} target_seq={} changes={}",
        run.run_id,
        run.project_id,
        run.request.cause.kind(),
        outcome_text(&run.outcome),
        run.started_at.0,
        run.ended_at.0,
        run.request.target_revision.seq,
        run.request.changes.len(),
    )
}

fn write_run(out: &mut dyn Write, run: &BuildRun) -> std::io::Result<()> {
    writeln!(out, "{}", run_line(run))?;
    for step in &run.step_results {
        let status = match step.status {
            buildherd_core::StepStatus::Succeeded => "succeeded".to_string(),
            buildherd_core::StepStatus::Failed { exit_code } => format!("failed({exit_code})"),
        };
        writeln!(out, "step={} status={} duration_ms={}", step.step_name, status, step.duration.0)?;
    }
    if let RunOutcome::Errored { reason } = &run.outcome {
        writeln!(out, "reason={reason}")?;
    }
    Ok(())
}

fn write_receipt(out: &mut dyn Write, receipt: &Receipt) -> std::io::Result<()> {
    writeln!(out, "accepted=true")?;
    writeln!(out, "project={}", receipt.project)?;
    writeln!(out, "target_seq={}", receipt.target.seq)?;
    writeln!(out, "target_id={}", receipt.target.id)?;
    writeln!(out, "changes={}", receipt.changes)?;
    writeln!(out, "created_at={}", receipt.created_at.0)
}

fn write_status(out: &mut dyn Write, status: &ProjectStatus) -> std::io::Result<()> {
    writeln!(out, "project={}", status.project)?;
    writeln!(out, "classification={}", status.classification)?;
    writeln!(out, "queue_depth={}", status.queue_depth)?;
    writeln!(out, "running={}", status.running)?;
    match &status.last_run {
        Some(last) => {
            let outcome = serde_json::to_value(last.outcome).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            writeln!(out, "last_run={} outcome={} target_seq={}", last.run_id, outcome, last.target_seq)
        }
        None => writeln!(out, "last_run=none"),
    }
}
