//! Program records: one row per candidate the harness has produced.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(pub u64);

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Seed,
    Pending,
    EvaluatedValid,
    RejectedInvalid,
    RejectedHack,
    FailedAgent,
    TimedOut,
}

impl Status {
    pub const ALL: [Status; 7] = [
        Status::Seed,
        Status::Pending,
        Status::EvaluatedValid,
        Status::RejectedInvalid,
        Status::RejectedHack,
        Status::FailedAgent,
        Status::TimedOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Seed => "seed",
            Status::Pending => "pending",
            Status::EvaluatedValid => "evaluated_valid",
            Status::RejectedInvalid => "rejected_invalid",
            Status::RejectedHack => "rejected_hack",
            Status::FailedAgent => "failed_agent",
            Status::TimedOut => "timed_out",
        }
    }

    /// May be drawn as a parent.
    pub fn is_selectable(self) -> bool {
        matches!(self, Status::Seed | Status::EvaluatedValid)
    }

    /// Carries a score.
    pub fn has_score(self) -> bool {
        matches!(self, Status::Seed | Status::EvaluatedValid | Status::RejectedHack)
    }

    /// Counts as a completed algorithm for migration timing and hack rates.
    /// Agent failures and timeouts do not.
    pub fn counts_as_completed(self) -> bool {
        matches!(
            self,
            Status::EvaluatedValid | Status::RejectedInvalid | Status::RejectedHack
        )
    }

    pub fn is_terminal(self) -> bool {
        !matches!(self, Status::Pending | Status::Seed)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Status::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown status {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramRecord {
    pub id: RecordId,
    pub branch_ref: String,
    pub parent_id: Option<RecordId>,
    pub island_id: u32,
    pub score: Option<f64>,
    pub status: Status,
    pub tokens_used: u64,
    /// Token count was estimated rather than reported by the agent.
    pub tokens_estimated: bool,
    /// Reviewer-agent share of `tokens_used`.
    pub review_tokens: u64,
    pub wall_seconds: f64,
    pub approach_summary: String,
    pub improvement_ideas: String,
    /// Files changed relative to the parent branch, with line counts.
    pub diff_summary: String,
    /// Why the gate or evaluator rejected the candidate, if it did.
    pub rejection_reason: String,
    /// Seconds since the run started.
    pub created_at: f64,
}

impl ProgramRecord {
    pub fn seed(id: RecordId, branch_ref: impl Into<String>, score: f64) -> Self {
        Self {
            id,
            branch_ref: branch_ref.into(),
            parent_id: None,
            island_id: 0,
            score: Some(score),
            status: Status::Seed,
            tokens_used: 0,
            tokens_estimated: false,
            review_tokens: 0,
            wall_seconds: 0.0,
            approach_summary: "seed program".into(),
            improvement_ideas: String::new(),
            diff_summary: String::new(),
            rejection_reason: String::new(),
            created_at: 0.0,
        }
    }

    pub fn child(id: RecordId, branch_ref: impl Into<String>, parent: RecordId, island_id: u32) -> Self {
        Self {
            id,
            branch_ref: branch_ref.into(),
            parent_id: Some(parent),
            island_id,
            score: None,
            status: Status::Pending,
            tokens_used: 0,
            tokens_estimated: false,
            review_tokens: 0,
            wall_seconds: 0.0,
            approach_summary: String::new(),
            improvement_ideas: String::new(),
            diff_summary: String::new(),
            rejection_reason: String::new(),
            created_at: 0.0,
        }
    }

    /// Score if this record is recognized (selectable) by the system.
    pub fn recognized_score(&self) -> Option<f64> {
        if self.status.is_selectable() {
            self.score
        } else {
            None
        }
    }

    /// Checks the per-record invariants that do not need other records.
    pub fn check_local(&self) -> Result<(), String> {
        if self.status.has_score() != self.score.is_some() {
            return Err(format!(
                "record {}: status {} but score {:?}",
                self.id, self.status, self.score
            ));
        }
        if let Some(s) = self.score {
            if !s.is_finite() {
                return Err(format!("record {}: non-finite score", self.id));
            }
        }
        if (self.status == Status::Seed) != self.parent_id.is_none() {
            return Err(format!("record {}: seed status must coincide with no parent", self.id));
        }
        if let Some(p) = self.parent_id {
            if p >= self.id {
                return Err(format!("record {}: parent {} is not older", self.id, p));
            }
        }
        Ok(())
    }
}

/// Ranking used everywhere: score descending, then smaller id first.
pub fn rank_order(a: (f64, RecordId), b: (f64, RecordId)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Branch name for a record: `evo/<run-id>/<record-id>`, zero-padded so
/// lexical order matches creation order.
pub fn branch_name(run_id: &str, id: RecordId) -> String {
    format!("evo/{run_id}/{:06}", id.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_round_trips_through_str() {
        for s in Status::ALL {
            assert_eq!(s.as_str().parse::<Status>().unwrap(), s);
        }
    }

    #[test]
    fn completed_rule() {
        assert!(Status::RejectedHack.counts_as_completed());
        assert!(Status::RejectedInvalid.counts_as_completed());
        assert!(!Status::FailedAgent.counts_as_completed());
        assert!(!Status::TimedOut.counts_as_completed());
        assert!(!Status::Seed.counts_as_completed());
    }

    #[test]
    fn local_invariants() {
        let seed = ProgramRecord::seed(RecordId(1), "evo/r/000001", 0.3);
        assert!(seed.check_local().is_ok());
        let mut hack = ProgramRecord::child(RecordId(2), "b", RecordId(1), 0);
        hack.status = Status::RejectedHack;
        assert!(hack.check_local().is_err());
        hack.score = Some(9.9);
        assert!(hack.check_local().is_ok());
        let mut bad = ProgramRecord::child(RecordId(2), "b", RecordId(5), 0);
        bad.status = Status::FailedAgent;
        assert!(bad.check_local().is_err());
    }

    #[test]
    fn branch_names_sort_by_id() {
        assert!(branch_name("r", RecordId(9)) < branch_name("r", RecordId(10)));
        assert_eq!(branch_name("abc", RecordId(3)), "evo/abc/000003");
    }
}
