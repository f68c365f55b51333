//! Post-evaluation hack detection.
//!
//! Stages run in order and the first failure rejects:
//! 1. mechanical cap on the raw score;
//! 2. independent re-verification of the packing;
//! 3. any change under `eval/` relative to the parent;
//! 4. an optional external reviewer.

use std::path::PathBuf;
use std::process::Command;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::db::{DbError, ProgramDb};
use crate::evaluator::{verify_independent, EvaluationReport, Verification};
use crate::process::run_with_timeout;
use crate::record::Status;
use crate::workspace::{is_eval_path, FileChange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStage {
    MechanicalCap,
    IndependentVerify,
    EvalCodeTamper,
    Reviewer,
    Passed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub accepted: bool,
    pub stage: GateStage,
    pub reason: String,
}

impl GateVerdict {
    pub fn passed() -> Self {
        Self {
            accepted: true,
            stage: GateStage::Passed,
            reason: String::new(),
        }
    }

    fn reject(stage: GateStage, reason: impl Into<String>) -> Self {
        Self {
            accepted: false,
            stage,
            reason: reason.into(),
        }
    }
}

/// Reviewer adapter: the candidate's instructions, file list and diff go to
/// stdin; stdout must contain a JSON object `{"accept": bool, "reason": str}`
/// (optionally with `"tokens_used"`), on its last non-empty line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewerCommand {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    pub timeout_seconds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewerReply {
    pub accept: bool,
    #[serde(default)]
    pub reason: String,
    #[serde(default)]
    pub tokens_used: Option<u64>,
}

impl ReviewerCommand {
    pub fn review(&self, instructions: &str, files: &[FileChange], diff: &str) -> Result<ReviewerReply, String> {
        let mut input = String::new();
        input.push_str(instructions);
        input.push_str("\n\n--- changed files ---\n");
        for f in files {
            input.push_str(&f.path);
            input.push('\n');
        }
        input.push_str("\n--- diff ---\n");
        input.push_str(diff);
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.args);
        let out = run_with_timeout(cmd, input.as_bytes(), Duration::from_secs(self.timeout_seconds))
            .map_err(|e| format!("spawning reviewer: {e}"))?;
        if !out.success() {
            return Err(format!("reviewer exited with {:?}", out.exit));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let line = text
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .ok_or("reviewer printed nothing")?;
        serde_json::from_str(line.trim()).map_err(|e| format!("reviewer reply: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HackGate {
    pub score_cap: f64,
    /// Circle count the verifier insists on; `None` skips the verify stage
    /// (non-packing tasks).
    pub expected_circles: Option<usize>,
    pub reviewer: Option<ReviewerCommand>,
}

/// What the gate saw and decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub verdict: GateVerdict,
    pub reviewer_tokens: u64,
    /// Set when the reviewer failed and the candidate was waved through.
    pub warning: Option<String>,
}

/// Everything the gate inspects for one candidate.
#[derive(Debug, Clone, Copy)]
pub struct GateInput<'a> {
    pub report: &'a EvaluationReport,
    pub changed_files: &'a [FileChange],
    pub diff: &'a str,
    pub instructions: &'a str,
}

impl HackGate {
    pub fn check(&self, input: GateInput<'_>) -> GateOutcome {
        let verdict = self.deterministic_stages(input);
        if !verdict.accepted {
            return GateOutcome {
                verdict,
                reviewer_tokens: 0,
                warning: None,
            };
        }
        let Some(reviewer) = &self.reviewer else {
            return GateOutcome {
                verdict,
                reviewer_tokens: 0,
                warning: None,
            };
        };
        match reviewer.review(input.instructions, input.changed_files, input.diff) {
            Ok(reply) => GateOutcome {
                verdict: if reply.accept {
                    GateVerdict::passed()
                } else {
                    GateVerdict::reject(GateStage::Reviewer, reply.reason)
                },
                reviewer_tokens: reply.tokens_used.unwrap_or(0),
                warning: None,
            },
            Err(e) => {
                log::warn!("reviewer failed, accepting candidate: {e}");
                GateOutcome {
                    verdict: GateVerdict::passed(),
                    reviewer_tokens: 0,
                    warning: Some(e),
                }
            }
        }
    }

    /// Stages 1 to 3. Pure in their inputs.
    pub fn deterministic_stages(&self, input: GateInput<'_>) -> GateVerdict {
        let Some(score) = input.report.score else {
            return GateVerdict::reject(GateStage::IndependentVerify, "no score to verify");
        };
        // NaN scores fail the cap too.
        if score.is_nan() || score > self.score_cap {
            return GateVerdict::reject(
                GateStage::MechanicalCap,
                format!("score {score} exceeds the cap {}", self.score_cap),
            );
        }
        if let Some(n) = self.expected_circles {
            let verification = match &input.report.packing {
                Some(p) => verify_independent(p, score, Some(n)),
                None => {
                    return GateVerdict::reject(GateStage::IndependentVerify, "no packing to re-verify");
                }
            };
            if let Verification::Mismatch { what, detail } = verification {
                return GateVerdict::reject(GateStage::IndependentVerify, format!("{what:?}: {detail}"));
            }
        }
        let touched: Vec<&str> = input
            .changed_files
            .iter()
            .map(|f| f.path.as_str())
            .filter(|p| is_eval_path(p))
            .collect();
        if !touched.is_empty() {
            return GateVerdict::reject(
                GateStage::EvalCodeTamper,
                format!("modifies evaluation files: {}", touched.join(", ")),
            );
        }
        GateVerdict::passed()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HackStats {
    pub hacks: u64,
    pub completed: u64,
    /// `hacks / completed`; `None` before anything completed.
    pub hack_rate: Option<f64>,
}

impl HackStats {
    pub fn from_counts(hacks: u64, completed: u64) -> Self {
        Self {
            hacks,
            completed,
            hack_rate: (completed > 0).then(|| hacks as f64 / completed as f64),
        }
    }
}

pub fn hack_stats(db: &ProgramDb) -> Result<HackStats, DbError> {
    let counts = db.count_by_status()?;
    let hacks = counts.get(&Status::RejectedHack).copied().unwrap_or(0);
    let completed = counts
        .iter()
        .filter(|(s, _)| s.counts_as_completed())
        .map(|(_, n)| n)
        .sum();
    Ok(HackStats::from_counts(hacks, completed))
}
