//! The mutation operator: something that edits a leased worktree.
//!
//! Two backends ship with the crate. [`SimulatedAgent`] mutates the circle
//! packing in-process; [`CommandAgent`] runs an external program (usually a
//! coding agent) inside the worktree and reads back a small JSON result.

mod command;
mod simulated;

use std::path::PathBuf;
use std::process::Command;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::record::ProgramRecord;
use crate::workspace::Workspace;

pub use command::{AgentResultFile, CommandAgent, RESULT_FILE, TIMEOUT_GRACE, TRANSCRIPT_FILE};
pub use simulated::{SimulatedAgent, OBSERVED_TOP_K};

/// Base of the synthetic token count.
pub const SYNTH_BASE_TOKENS: u64 = 50_000;
/// Synthetic tokens per refinement iteration.
pub const SYNTH_TOKENS_PER_ITERATION: u64 = 1_000;

#[derive(Debug, Clone)]
pub struct AgentTask {
    pub workspace: Workspace,
    pub parent: ProgramRecord,
    /// Read-only program database, present iff DB observation is on.
    pub db_path: Option<PathBuf>,
    pub instructions: String,
    pub timeout_seconds: u64,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentStatus {
    Completed,
    Failed,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub status: AgentStatus,
    pub tokens_used: u64,
    /// `tokens_used` was estimated because the agent did not report it.
    pub tokens_estimated: bool,
    pub wall_seconds: f64,
    pub approach_summary: String,
    pub improvement_ideas: String,
    /// Why the agent failed, when it did.
    pub detail: String,
}

impl AgentOutcome {
    pub fn failed(detail: impl Into<String>, tokens_used: u64, tokens_estimated: bool, wall_seconds: f64) -> Self {
        Self {
            status: AgentStatus::Failed,
            tokens_used,
            tokens_estimated,
            wall_seconds,
            approach_summary: String::new(),
            improvement_ideas: String::new(),
            detail: detail.into(),
        }
    }
}

pub trait AgentBackend: Send + Sync {
    /// Key into the config's `[rates]` table.
    fn name(&self) -> &str;

    fn run(&self, task: &AgentTask) -> AgentOutcome;
}

/// Synthetic token count for the simulated backend.
pub fn synth_tokens(iterations: u64) -> u64 {
    SYNTH_BASE_TOKENS + SYNTH_TOKENS_PER_ITERATION * iterations
}

/// Runs `backend` on `task` and enforces the outcome contract: a completed
/// agent must leave at least one modified file, otherwise it counts as failed.
pub fn run_agent(task: &AgentTask, backend: &dyn AgentBackend) -> AgentOutcome {
    let start = Instant::now();
    let mut outcome = backend.run(task);
    if outcome.wall_seconds <= 0.0 {
        outcome.wall_seconds = start.elapsed().as_secs_f64();
    }
    if outcome.status == AgentStatus::Completed {
        match worktree_is_dirty(task) {
            Ok(true) => {}
            Ok(false) => {
                outcome.status = AgentStatus::Failed;
                outcome.detail = "agent left no modified files".into();
            }
            Err(e) => {
                outcome.status = AgentStatus::Failed;
                outcome.detail = format!("inspecting worktree: {e}");
            }
        }
    }
    outcome
}

fn worktree_is_dirty(task: &AgentTask) -> std::io::Result<bool> {
    let out = Command::new("git")
        .arg("-C")
        .arg(task.workspace.path())
        .args(["status", "--porcelain", "--untracked-files=all"])
        .output()?;
    if !out.status.success() {
        return Err(std::io::Error::other(String::from_utf8_lossy(&out.stderr).into_owned()));
    }
    Ok(!out.stdout.is_empty())
}

/// Which backend to run, as named on the command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendSpec {
    Simulated,
    /// `command:<path>`
    Command(PathBuf),
}

impl BackendSpec {
    /// Name used to look up the backend's rate.
    pub fn rate_key(&self) -> &'static str {
        match self {
            BackendSpec::Simulated => "simulated",
            BackendSpec::Command(_) => "command",
        }
    }

    pub fn build(&self, cfg: &RunConfig) -> Box<dyn AgentBackend> {
        match self {
            BackendSpec::Simulated => Box::new(SimulatedAgent::new(cfg.simulated_restarts)),
            BackendSpec::Command(p) => Box::new(CommandAgent::new(p.clone(), cfg.flat_token_estimate)),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "simulated" {
            return Ok(BackendSpec::Simulated);
        }
        match s.strip_prefix("command:") {
            Some(p) if !p.is_empty() => Ok(BackendSpec::Command(PathBuf::from(p))),
            _ => Err(format!("unknown backend {s:?}; expected simulated or command:<path>")),
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Simulated => f.write_str("simulated"),
            BackendSpec::Command(p) => write!(f, "command:{}", p.display()),
        }
    }
}
