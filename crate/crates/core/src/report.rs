//! Post-hoc reporting, regenerated from the database and repository alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budget::cost_of;
use crate::db::{DbError, HistoryRow, ProgramDb};
use crate::evaluator::{verify_independent, Verification, CANDIDATE_FILE};
use crate::gate::hack_stats;
use crate::packing::CirclePacking;
use crate::record::{rank_order, ProgramRecord, RecordId};
use crate::workspace::WorkspaceManager;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEntry {
    pub id: RecordId,
    pub score: f64,
    pub branch: String,
}

impl From<&ProgramRecord> for BestEntry {
    fn from(r: &ProgramRecord) -> Self {
        Self {
            id: r.id,
            score: r.score.unwrap_or(f64::NAN),
            branch: r.branch_ref.clone(),
        }
    }
}

/// Recognized records re-checked against their committed content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    /// Highest recognized score within the cap whose branch content passes
    /// independent verification.
    pub best: Option<BestEntry>,
    /// Highest recognized score, unchecked.
    pub raw_best: Option<BestEntry>,
    pub mismatches: Vec<(RecordId, String)>,
}

/// Re-verifies every recognized record. With `n_circles = None` (a task
/// other than circle packing) only the cap applies.
pub fn audit(
    db: &ProgramDb,
    manager: &WorkspaceManager,
    n_circles: Option<usize>,
    score_cap: f64,
) -> Result<Audit, DbError> {
    let mut recognized: Vec<ProgramRecord> = db
        .all_records()?
        .into_iter()
        .filter(|r| r.recognized_score().is_some())
        .collect();
    recognized.sort_by(|a, b| rank_order((a.score.unwrap(), a.id), (b.score.unwrap(), b.id)));
    let raw_best = recognized.first().map(BestEntry::from);
    let mut best = None;
    let mut mismatches = Vec::new();
    for r in &recognized {
        let score = r.score.expect("recognized records carry a score");
        let problem = if score > score_cap {
            Some(format!("score {score} exceeds the cap {score_cap}"))
        } else if let Some(n) = n_circles {
            check_branch(manager, &r.branch_ref, score, n)
        } else {
            None
        };
        match problem {
            Some(p) => mismatches.push((r.id, p)),
            None if best.is_none() => best = Some(BestEntry::from(r)),
            None => {}
        }
    }
    Ok(Audit {
        best,
        raw_best,
        mismatches,
    })
}

fn check_branch(manager: &WorkspaceManager, branch: &str, score: f64, n: usize) -> Option<String> {
    let bytes = match manager.show_file(branch, CANDIDATE_FILE) {
        Ok(b) => b,
        Err(e) => return Some(format!("reading {branch}: {e}")),
    };
    let packing: CirclePacking = match String::from_utf8_lossy(&bytes).parse() {
        Ok(p) => p,
        Err(e) => return Some(format!("parsing {branch}: {e}")),
    };
    match verify_independent(&packing, score, Some(n)) {
        Verification::Confirmed { .. } => None,
        Verification::Mismatch { what, detail } => Some(format!("{what:?}: {detail}")),
    }
}

/// The headline numbers of a run, one row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub best: Option<f64>,
    pub raw_best: Option<f64>,
    /// Completed algorithms: valid, invalid and hack-rejected candidates.
    pub algorithms: u64,
    pub tokens_spent: u64,
    pub tokens_per_algorithm: Option<f64>,
    pub cost: f64,
    pub hacks: u64,
    pub hack_rate: Option<f64>,
    pub verification_mismatches: u64,
}

impl SummaryTable {
    pub fn build(
        db: &ProgramDb,
        manager: &WorkspaceManager,
        n_circles: Option<usize>,
        score_cap: f64,
        rate_per_mtok: f64,
    ) -> Result<Self, DbError> {
        let audit = audit(db, manager, n_circles, score_cap)?;
        let hacks = hack_stats(db)?;
        let tokens = db.total_tokens()?;
        Ok(Self {
            best: audit.best.map(|b| b.score),
            raw_best: audit.raw_best.map(|b| b.score),
            algorithms: hacks.completed,
            tokens_spent: tokens,
            tokens_per_algorithm: (hacks.completed > 0).then(|| tokens as f64 / hacks.completed as f64),
            cost: cost_of(tokens, rate_per_mtok),
            hacks: hacks.hacks,
            hack_rate: hacks.hack_rate,
            verification_mismatches: audit.mismatches.len() as u64,
        })
    }

    pub fn render(&self) -> String {
        let opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
        let header = ["Best", "Raw Best", "#Algo", "Tok/Algo", "Cost($)", "Hacks", "Hack%"];
        let row = [
            opt(self.best, 5),
            opt(self.raw_best, 5),
            self.algorithms.to_string(),
            self.tokens_per_algorithm
                .map_or("-".to_string(), |t| format!("{:.1}K", t / 1000.0)),
            format!("{:.2}", self.cost),
            self.hacks.to_string(),
            self.hack_rate.map_or("-".to_string(), |r| format!("{:.1}%", r * 100.0)),
        ];
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = line(header.iter().map(|s| s.to_string()).collect());
        out.push('\n');
        out.push_str(&line(row.to_vec()));
        out.push('\n');
        if self.verification_mismatches > 0 {
            out.push_str(&format!(
                "{} recognized record(s) fail independent verification\n",
                self.verification_mismatches
            ));
        }
        out
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn history_jsonl(rows: &[HistoryRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("history row serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub csv: std::path::PathBuf,
    pub jsonl: std::path::PathBuf,
    pub table: SummaryTable,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes `history.csv` and `history.jsonl` into `out_dir` and returns the
/// summary table.
pub fn write_report(
    db: &ProgramDb,
    manager: &WorkspaceManager,
    n_circles: Option<usize>,
    score_cap: f64,
    rate_per_mtok: f64,
    out_dir: &Path,
) -> Result<ReportFiles, ReportError> {
    let rows = db.export_history(rate_per_mtok)?;
    let csv_path = out_dir.join("history.csv");
    let jsonl_path = out_dir.join("history.jsonl");
    std::fs::write(&csv_path, history_csv(&rows)?)?;
    std::fs::write(&jsonl_path, history_jsonl(&rows))?;
    Ok(ReportFiles {
        csv: csv_path,
        jsonl: jsonl_path,
        table: SummaryTable::build(db, manager, n_circles, score_cap, rate_per_mtok)?,
    })
}
