//! The evolutionary loop.
//!
//! One coordinating thread owns the database, the ledger and island state. It
//! launches up to `max_parallel_agents` cycles; each cycle runs on its own
//! worker thread (lease, agent, commit, evaluate, gate, release) and reports
//! back over a channel. The coordinator admits each result: it writes the
//! record, updates membership, migrates, and charges the ledger.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{run_agent, AgentBackend, AgentStatus, AgentTask};
use crate::budget::BudgetLedger;
use crate::config::{ConfigViolation, RunConfig};
use crate::db::{DbError, ProgramDb};
use crate::evaluator::{EvalSettings, Evaluator, CANDIDATE_FILE, EVAL_SETTINGS_FILE};
use crate::gate::{hack_stats, GateInput, HackGate, HackStats, ReviewerCommand};
use crate::island::{IslandModel, IslandParams, SelectionError};
use crate::packing::grid_seed;
use crate::record::{branch_name, rank_order, ProgramRecord, RecordId, Status};
use crate::report::{audit, Audit, BestEntry};
use crate::workspace::{check_seed, init_seed_repo, WorkspaceError, WorkspaceManager};

pub const META_RUN_ID: &str = "run_id";
pub const META_N_CIRCLES: &str = "n_circles";
pub const META_CYCLES: &str = "cycles_launched";
pub const META_IN_FLIGHT: &str = "in_flight";
pub const META_BACKEND: &str = "backend";

/// Files and directories of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunPaths {
    pub run_dir: PathBuf,
}

impl RunPaths {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        Self { run_dir: run_dir.into() }
    }

    pub fn db(&self) -> PathBuf {
        self.run_dir.join("program.db")
    }

    pub fn repo(&self) -> PathBuf {
        self.run_dir.join("repo")
    }

    pub fn worktrees(&self) -> PathBuf {
        self.run_dir.join("worktrees")
    }

    pub fn config(&self) -> PathBuf {
        self.run_dir.join("config.toml")
    }

    pub fn summary(&self) -> PathBuf {
        self.run_dir.join("summary.json")
    }

    pub fn is_initialized(&self) -> bool {
        self.db().exists() && self.repo().join(".git").exists()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<ConfigViolation>),
    #[error("{0}")]
    Usage(String),
    #[error("seed: {0}")]
    Seed(WorkspaceError),
    #[error("storage: {0}")]
    Storage(#[from] DbError),
    #[error("workspace: {0}")]
    Workspace(WorkspaceError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<WorkspaceError> for RunError {
    fn from(e: WorkspaceError) -> Self {
        match e {
            WorkspaceError::Db(d) => RunError::Storage(d),
            WorkspaceError::AlreadyInitialized(p) => {
                RunError::Usage(format!("{} is already initialized", p.display()))
            }
            other => RunError::Workspace(other),
        }
    }
}

/// Derives the run id (used in branch names) from the rng seed, so that two
/// runs with the same seed name their branches identically.
pub fn run_id_for(rng_seed: u64) -> String {
    format!("{:08x}", splitmix64(rng_seed) >> 32)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn cycle_seed(rng_seed: u64, cycle: u64) -> u64 {
    splitmix64(rng_seed ^ splitmix64(cycle.wrapping_add(1)))
}

/// Writes a starter seed directory: a grid packing of `n` circles and the
/// evaluation settings.
pub fn scaffold_seed(dir: &Path, n: usize) -> std::io::Result<()> {
    fs::create_dir_all(dir.join("candidate"))?;
    fs::create_dir_all(dir.join("eval"))?;
    fs::write(dir.join(CANDIDATE_FILE), grid_seed(n).to_text())?;
    fs::write(dir.join(EVAL_SETTINGS_FILE), EvalSettings::new(n).to_toml())?;
    Ok(())
}

/// Creates the run directory: config snapshot, database, repository and seed
/// record. With no `seed_dir` a grid seed for `cfg.n_circles` is scaffolded
/// into `<run>/seed`.
pub fn init_run(paths: &RunPaths, cfg: &RunConfig, seed_dir: Option<&Path>) -> Result<ProgramRecord, RunError> {
    let violations = cfg.validate();
    if !violations.is_empty() {
        return Err(RunError::Config(violations));
    }
    if paths.is_initialized() || paths.config().exists() || paths.db().exists() {
        return Err(RunError::Usage(format!(
            "{} is already initialized",
            paths.run_dir.display()
        )));
    }
    let seed_dir = match seed_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let d = paths.run_dir.join("seed");
            scaffold_seed(&d, cfg.n_circles)?;
            d
        }
    };
    let evaluator = Evaluator::circle_packing(cfg.n_circles);
    let run_id = run_id_for(cfg.rng_seed);

    // Check the seed before creating any state so a bad seed leaves the run
    // directory empty.
    check_seed(&seed_dir, &evaluator).map_err(RunError::Seed)?;
    fs::create_dir_all(&paths.run_dir)?;
    let mut db = ProgramDb::open(&paths.db())?;
    let (_, seed) = init_seed_repo(
        &seed_dir,
        &paths.repo(),
        &paths.worktrees(),
        &run_id,
        &evaluator,
        &mut db,
        cfg.n_islands,
        cfg.max_parallel_agents,
    )
    .map_err(|e| match e {
        WorkspaceError::SeedInvalid(_) | WorkspaceError::BadSeed { .. } => RunError::Seed(e),
        other => RunError::from(other),
    })?;
    db.set_meta(META_RUN_ID, &run_id)?;
    db.set_meta(META_N_CIRCLES, &cfg.n_circles.to_string())?;
    db.set_meta(META_CYCLES, "0")?;
    db.set_meta(META_IN_FLIGHT, "0")?;
    fs::write(paths.config(), cfg.to_toml())?;
    Ok(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    BudgetExhausted,
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub termination: Termination,
    pub backend: String,
    /// Best recognized score that survives the cap and re-verification.
    pub best: Option<BestEntry>,
    /// Best score the database recognizes (seed or evaluated_valid).
    pub raw_best: Option<BestEntry>,
    /// Recognized records whose branch content fails re-verification.
    pub verification_mismatches: u64,
    pub records: u64,
    pub by_status: BTreeMap<Status, u64>,
    pub completed: u64,
    pub hacks: HackStats,
    pub tokens_spent: u64,
    pub token_budget: u64,
    pub blended_rate: f64,
    pub cost: f64,
    pub tokens_per_algorithm: Option<f64>,
    pub max_agent_tokens: u64,
    pub migrations: u64,
    pub cycles_launched: u64,
    pub max_parallel_agents: usize,
    pub available_cores: usize,
    pub wall_seconds: f64,
    pub agent_seconds: f64,
    /// `agent_seconds / wall_seconds`.
    pub parallelism_ratio: f64,
}

impl RunSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandSnapshot {
    pub island_id: u32,
    pub members: Vec<(RecordId, Option<f64>)>,
}

/// Read-only view of a run, from the database alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub run_id: String,
    pub islands: Vec<IslandSnapshot>,
    pub raw_best: Option<BestEntry>,
    pub records: u64,
    pub completed: u64,
    pub tokens_spent: u64,
    pub token_budget: u64,
    pub cost: f64,
    pub hacks: HackStats,
    pub live_agents: u64,
}

pub fn status(db: &ProgramDb, ledger: &BudgetLedger) -> Result<StatusSnapshot, DbError> {
    let islands = db
        .membership()?
        .into_iter()
        .map(|(island_id, ids)| {
            let mut members: Vec<(RecordId, Option<f64>)> = db
                .get_many(&ids)?
                .into_iter()
                .map(|r| (r.id, r.recognized_score()))
                .collect();
            members.sort_by(|a, b| {
                rank_order(
                    (a.1.unwrap_or(f64::NEG_INFINITY), a.0),
                    (b.1.unwrap_or(f64::NEG_INFINITY), b.0),
                )
            });
            Ok(IslandSnapshot { island_id, members })
        })
        .collect::<Result<Vec<_>, DbError>>()?;
    let hacks = hack_stats(db)?;
    Ok(StatusSnapshot {
        run_id: db.meta(META_RUN_ID)?.unwrap_or_default(),
        islands,
        raw_best: db.best_record()?.as_ref().map(BestEntry::from),
        records: db.count()?,
        completed: hacks.completed,
        tokens_spent: ledger.tokens_spent,
        token_budget: ledger.token_budget,
        cost: ledger.cost(),
        hacks,
        live_agents: db.meta(META_IN_FLIGHT)?.and_then(|s| s.parse().ok()).unwrap_or(0),
    })
}

/// A launched cycle, handed to a worker.
struct Job {
    cycle: u64,
    id: RecordId,
    branch: String,
    parent: ProgramRecord,
    island: u32,
    agent_seed: u64,
    launched_at: f64,
}

/// What a worker reports back.
struct CycleResult {
    cycle: u64,
    record: ProgramRecord,
    warning: Option<String>,
}

pub struct Orchestrator {
    cfg: RunConfig,
    paths: RunPaths,
    backend: Box<dyn AgentBackend>,
    evaluator: Evaluator,
    reviewer: Option<ReviewerCommand>,
    stop: Arc<AtomicBool>,
}

impl Orchestrator {
    pub fn new(cfg: RunConfig, paths: RunPaths, backend: Box<dyn AgentBackend>) -> Self {
        let evaluator = Evaluator::circle_packing(cfg.n_circles);
        Self {
            cfg,
            paths,
            backend,
            evaluator,
            reviewer: None,
            stop: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn with_evaluator(mut self, evaluator: Evaluator) -> Self {
        self.evaluator = evaluator;
        self
    }

    pub fn with_reviewer(mut self, reviewer: Option<ReviewerCommand>) -> Self {
        self.reviewer = reviewer;
        self
    }

    /// Setting the flag stops new launches; in-flight cycles drain.
    pub fn with_stop_flag(mut self, stop: Arc<AtomicBool>) -> Self {
        self.stop = stop;
        self
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    fn gate(&self) -> Option<HackGate> {
        self.cfg.hack_gate_enabled.then(|| HackGate {
            score_cap: self.cfg.mechanical_score_cap,
            expected_circles: self.evaluator.is_circle_packing().then_some(self.cfg.n_circles),
            reviewer: self.reviewer.clone(),
        })
    }

    pub fn run(&self) -> Result<RunSummary, RunError> {
        let violations = self.cfg.validate();
        if !violations.is_empty() {
            return Err(RunError::Config(violations));
        }
        if !self.paths.is_initialized() {
            return Err(RunError::Usage(format!(
                "{} is not initialized",
                self.paths.run_dir.display()
            )));
        }
        let mut db = ProgramDb::open(&self.paths.db())?;
        if let Some(n) = db.meta(META_N_CIRCLES)?.and_then(|s| s.parse::<usize>().ok()) {
            if n != self.cfg.n_circles && self.evaluator.is_circle_packing() {
                return Err(RunError::Usage(format!(
                    "run was initialized with n_circles = {n}, config says {}",
                    self.cfg.n_circles
                )));
            }
        }
        let run_id = db
            .meta(META_RUN_ID)?
            .ok_or_else(|| DbError::Corrupt("missing run id".into()))?;
        let manager = WorkspaceManager::open(&self.paths.repo(), &self.paths.worktrees(), self.cfg.max_parallel_agents)?;
        db.set_meta(META_BACKEND, self.backend.name())?;
        let swept = manager.sweep_stale()?;
        if swept > 0 {
            log::info!("removed {swept} stale worktrees");
        }

        let rate = self.cfg.rate_for(self.backend.name());
        let mut ledger = BudgetLedger::new(self.cfg.token_budget, rate);
        ledger.charge(db.total_tokens()?);

        let params = IslandParams::from(&self.cfg);
        let mut islands = IslandModel::from_membership(params, &db.membership()?);
        let mut scores: BTreeMap<RecordId, f64> = BTreeMap::new();
        let mut homes: BTreeMap<RecordId, u32> = BTreeMap::new();
        let mut completed = 0u64;
        for r in db.all_records()? {
            if let Some(s) = r.recognized_score() {
                scores.insert(r.id, s);
                homes.insert(r.id, r.island_id);
            }
            if r.status.counts_as_completed() {
                completed += 1;
                if let Some(isl) = islands.islands.get_mut(r.island_id as usize) {
                    isl.completed_count += 1;
                }
            }
        }
        let seed_id = db
            .all_records()?
            .into_iter()
            .find(|r| r.status == Status::Seed)
            .map(|r| r.id)
            .ok_or_else(|| DbError::Corrupt("no seed record".into()))?;

        let mut next_id = db.next_id()?;
        let mut cycle: u64 = db.meta(META_CYCLES)?.and_then(|s| s.parse().ok()).unwrap_or(0);
        let gate = self.gate();
        let db_path = self.cfg.db_observation_enabled.then(|| self.paths.db());
        let start = Instant::now();

        let mut launched_here = 0u64;
        let mut agent_seconds = 0.0f64;
        let mut max_agent_tokens = 0u64;
        let mut fatal: Option<RunError> = None;
        let mut interrupted = false;

        thread::scope(|scope| -> Result<(), RunError> {
            let (tx, rx) = mpsc::channel::<CycleResult>();
            let mut in_flight = 0usize;
            let mut pending: BTreeMap<u64, CycleResult> = BTreeMap::new();
            // Cycle numbers launched but not admitted, in order.
            let mut outstanding: std::collections::BTreeSet<u64> = Default::default();

            loop {
                while fatal.is_none()
                    && in_flight < self.cfg.max_parallel_agents
                    && ledger.should_launch()
                {
                    if self.stop.load(Ordering::SeqCst) {
                        interrupted = true;
                        break;
                    }
                    let island = (cycle % self.cfg.n_islands as u64) as u32;
                    if islands.island(island).is_empty() {
                        let refill = best_of_scores(&scores).unwrap_or(seed_id);
                        islands.island_mut(island).member_ids.insert(refill);
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(cycle_seed(self.cfg.rng_seed, cycle));
                    let parent = match islands.island(island).select_parent(
                        &db,
                        self.cfg.p_explore,
                        self.cfg.p_exploit,
                        &mut rng,
                    ) {
                        Ok((p, _)) => p,
                        Err(SelectionError::Db(e)) => {
                            fatal = Some(e.into());
                            break;
                        }
                        Err(e @ SelectionError::EmptyIsland(_)) => {
                            fatal = Some(DbError::Corrupt(e.to_string()).into());
                            break;
                        }
                    };
                    let job = Job {
                        cycle,
                        id: next_id,
                        branch: branch_name(&run_id, next_id),
                        parent,
                        island,
                        agent_seed: rng.next_u64(),
                        launched_at: start.elapsed().as_secs_f64(),
                    };
                    next_id = RecordId(next_id.0 + 1);
                    cycle += 1;
                    launched_here += 1;
                    in_flight += 1;
                    outstanding.insert(job.cycle);
                    if let Err(e) = db
                        .set_meta(META_CYCLES, &cycle.to_string())
                        .and_then(|_| db.set_meta(META_IN_FLIGHT, &in_flight.to_string()))
                    {
                        fatal = Some(e.into());
                    }
                    let tx = tx.clone();
                    let ctx = Worker {
                        cfg: &self.cfg,
                        manager: &manager,
                        backend: self.backend.as_ref(),
                        evaluator: &self.evaluator,
                        gate: gate.as_ref(),
                        db_path: db_path.as_deref(),
                    };
                    scope.spawn(move || {
                        let cycle = job.cycle;
                        let fallback = failed_record(&job, "worker panicked");
                        let result = catch_unwind(AssertUnwindSafe(|| ctx.run_cycle(job))).unwrap_or(CycleResult {
                            cycle,
                            record: fallback,
                            warning: None,
                        });
                        let _ = tx.send(result);
                    });
                }
                if self.stop.load(Ordering::SeqCst) {
                    interrupted = true;
                }
                if in_flight == 0 {
                    break;
                }
                let result = rx.recv().expect("a worker holds a sender");
                pending.insert(result.cycle, result);
                let mut ready = Vec::new();
                if self.cfg.ordered_completion {
                    while let Some(&c) = outstanding.iter().next() {
                        match pending.remove(&c) {
                            Some(r) => {
                                outstanding.remove(&c);
                                ready.push(r);
                            }
                            None => break,
                        }
                    }
                } else {
                    for (c, r) in std::mem::take(&mut pending) {
                        outstanding.remove(&c);
                        ready.push(r);
                    }
                }
                for result in ready {
                    in_flight -= 1;
                    if let Some(w) = &result.warning {
                        log::warn!("record {}: {w}", result.record.id);
                    }
                    let rec = result.record;
                    agent_seconds += rec.wall_seconds;
                    max_agent_tokens = max_agent_tokens.max(rec.tokens_used);
                    if fatal.is_none() {
                        let admitted = admit(
                            &mut db,
                            &mut islands,
                            &mut scores,
                            &mut homes,
                            &mut completed,
                            &mut ledger,
                            rec,
                            start.elapsed().as_secs_f64(),
                        )
                        .and_then(|_| db.set_meta(META_IN_FLIGHT, &in_flight.to_string()));
                        if let Err(e) = admitted {
                            fatal = Some(e.into());
                        }
                    }
                }
            }
            Ok(())
        })?;

        if let Some(e) = fatal {
            return Err(e);
        }
        let wall = start.elapsed().as_secs_f64();
        let audit = audit(&db, &manager, self.evaluator.is_circle_packing().then_some(self.cfg.n_circles), self.cfg.mechanical_score_cap)?;
        let summary = build_summary(SummaryInputs {
            db: &db,
            audit,
            run_id,
            termination: if interrupted && ledger.should_launch() {
                Termination::Interrupted
            } else {
                Termination::BudgetExhausted
            },
            backend: self.backend.name().to_string(),
            ledger: &ledger,
            max_agent_tokens,
            cycles_launched: launched_here,
            max_parallel_agents: self.cfg.max_parallel_agents,
            wall_seconds: wall,
            agent_seconds,
        })?;
        fs::write(self.paths.summary(), summary.to_json())?;
        Ok(summary)
    }
}

fn best_of_scores(scores: &BTreeMap<RecordId, f64>) -> Option<RecordId> {
    scores
        .iter()
        .map(|(&id, &s)| (s, id))
        .min_by(|a, b| rank_order(*a, *b))
        .map(|(_, id)| id)
}

#[allow(clippy::too_many_arguments)]
fn admit(
    db: &mut ProgramDb,
    islands: &mut IslandModel,
    scores: &mut BTreeMap<RecordId, f64>,
    homes: &mut BTreeMap<RecordId, u32>,
    completed: &mut u64,
    ledger: &mut BudgetLedger,
    rec: ProgramRecord,
    now: f64,
) -> Result<(), DbError> {
    ledger.charge(rec.tokens_used);
    if let Some(s) = rec.recognized_score() {
        scores.insert(rec.id, s);
        homes.insert(rec.id, rec.island_id);
    }
    let protected = best_of_scores(scores).map(|id| (id, homes[&id]));
    let mut migrations = Vec::new();
    let mut membership_changed = false;
    if rec.status == Status::EvaluatedValid {
        islands.admit(rec.island_id, rec.id, scores, protected);
        membership_changed = true;
    }
    if rec.status.counts_as_completed() {
        *completed += 1;
        islands.island_mut(rec.island_id).completed_count += 1;
        migrations = islands.maybe_migrate(scores, *completed, protected);
        membership_changed |= !migrations.is_empty();
    }
    let membership = islands.membership();
    db.record_completion(&rec, now, membership_changed.then_some(&membership), &migrations)?;
    // Keep reseeded islands persisted even when nothing else changed.
    if !membership_changed && db.membership()? != membership {
        db.save_membership(&membership)?;
    }
    Ok(())
}

fn failed_record(job: &Job, reason: &str) -> ProgramRecord {
    let mut r = ProgramRecord::child(job.id, job.branch.clone(), job.parent.id, job.island);
    r.status = Status::FailedAgent;
    r.rejection_reason = reason.to_string();
    r.created_at = job.launched_at;
    r
}

struct Worker<'a> {
    cfg: &'a RunConfig,
    manager: &'a WorkspaceManager,
    backend: &'a dyn AgentBackend,
    evaluator: &'a Evaluator,
    gate: Option<&'a HackGate>,
    db_path: Option<&'a Path>,
}

impl Worker<'_> {
    fn run_cycle(&self, job: Job) -> CycleResult {
        let cycle = job.cycle;
        let mut warning = None;
        let record = match self.manager.lease(&job.parent.branch_ref) {
            Ok(ws) => {
                let rec = self.pipeline(&job, &ws, &mut warning);
                if let Err(e) = self.manager.release(&ws) {
                    warning = Some(format!("releasing {}: {e}", ws.lease_id));
                }
                rec
            }
            Err(e) => failed_record(&job, &format!("lease: {e}")),
        };
        CycleResult { cycle, record, warning }
    }

    fn pipeline(&self, job: &Job, ws: &crate::workspace::Workspace, warning: &mut Option<String>) -> ProgramRecord {
        let mut rec = ProgramRecord::child(job.id, job.branch.clone(), job.parent.id, job.island);
        rec.created_at = job.launched_at;
        let task = AgentTask {
            workspace: ws.clone(),
            parent: job.parent.clone(),
            db_path: self.db_path.map(Path::to_path_buf),
            instructions: instructions_for(self.cfg, &job.parent),
            timeout_seconds: self.cfg.agent_timeout_seconds,
            rng_seed: job.agent_seed,
        };
        let outcome = run_agent(&task, self.backend);
        rec.tokens_used = outcome.tokens_used;
        rec.tokens_estimated = outcome.tokens_estimated;
        rec.wall_seconds = outcome.wall_seconds;
        rec.approach_summary = outcome.approach_summary.clone();
        rec.improvement_ideas = outcome.improvement_ideas.clone();
        match outcome.status {
            AgentStatus::Completed => {}
            AgentStatus::TimedOut => {
                rec.status = Status::TimedOut;
                rec.tokens_used = self.cfg.flat_token_estimate;
                rec.tokens_estimated = true;
                rec.rejection_reason = outcome.detail;
                return rec;
            }
            AgentStatus::Failed => {
                rec.status = Status::FailedAgent;
                rec.rejection_reason = outcome.detail;
                return rec;
            }
        }
        let message = format!("candidate {}\n\n{}", job.id, outcome.approach_summary);
        let commit = match self.manager.commit(ws, &job.branch, &message) {
            Ok(c) => c,
            Err(e) => {
                rec.status = Status::FailedAgent;
                rec.rejection_reason = format!("commit: {e}");
                return rec;
            }
        };
        rec.diff_summary = commit.diff_stat();
        let report = self.evaluator.evaluate(ws);
        if !report.valid {
            rec.status = Status::RejectedInvalid;
            rec.rejection_reason = report
                .violations
                .iter()
                .take(3)
                .map(|v| format!("{:?} {:?}: {}", v.kind, v.indices, v.detail))
                .collect::<Vec<_>>()
                .join("; ");
            return rec;
        }
        let score = report.score.expect("valid reports carry a score");
        rec.score = Some(score);
        rec.status = Status::EvaluatedValid;
        if let Some(gate) = self.gate {
            let diff = self
                .manager
                .diff(&commit.parent_commit, &commit.commit)
                .unwrap_or_default();
            let out = gate.check(GateInput {
                report: &report,
                changed_files: &commit.files,
                diff: &diff,
                instructions: &task.instructions,
            });
            rec.review_tokens = out.reviewer_tokens;
            rec.tokens_used += out.reviewer_tokens;
            if let Some(w) = out.warning {
                *warning = Some(format!("reviewer failed, accepted: {w}"));
            }
            if !out.verdict.accepted {
                rec.status = Status::RejectedHack;
                rec.rejection_reason = format!("{:?}: {}", out.verdict.stage, out.verdict.reason);
            }
        }
        rec
    }
}

fn instructions_for(cfg: &RunConfig, parent: &ProgramRecord) -> String {
    let mut s = cfg.instructions.clone();
    if let Some(score) = parent.score {
        s.push_str(&format!("\n\nCurrent score of this program: {score}."));
    }
    if !parent.improvement_ideas.is_empty() {
        s.push_str(&format!("\nIdeas left by the previous attempt: {}", parent.improvement_ideas));
    }
    s.push('\n');
    s
}

struct SummaryInputs<'a> {
    db: &'a ProgramDb,
    audit: Audit,
    run_id: String,
    termination: Termination,
    backend: String,
    ledger: &'a BudgetLedger,
    max_agent_tokens: u64,
    cycles_launched: u64,
    max_parallel_agents: usize,
    wall_seconds: f64,
    agent_seconds: f64,
}

fn build_summary(i: SummaryInputs<'_>) -> Result<RunSummary, DbError> {
    let hacks = hack_stats(i.db)?;
    let by_status = i.db.count_by_status()?;
    let parallelism_ratio = if i.wall_seconds > 0.0 {
        i.agent_seconds / i.wall_seconds
    } else {
        0.0
    };
    Ok(RunSummary {
        run_id: i.run_id,
        termination: i.termination,
        backend: i.backend,
        best: i.audit.best,
        raw_best: i.audit.raw_best,
        verification_mismatches: i.audit.mismatches.len() as u64,
        records: i.db.count()?,
        by_status,
        completed: hacks.completed,
        hacks,
        tokens_spent: i.ledger.tokens_spent,
        token_budget: i.ledger.token_budget,
        blended_rate: i.ledger.blended_rate,
        cost: i.ledger.cost(),
        tokens_per_algorithm: (hacks.completed > 0).then(|| i.ledger.tokens_spent as f64 / hacks.completed as f64),
        max_agent_tokens: i.max_agent_tokens,
        migrations: i.db.migrations()?.len() as u64,
        cycles_launched: i.cycles_launched,
        max_parallel_agents: i.max_parallel_agents,
        available_cores: thread::available_parallelism().map_or(1, |n| n.get()),
        wall_seconds: i.wall_seconds,
        agent_seconds: i.agent_seconds,
        parallelism_ratio,
    })
}
