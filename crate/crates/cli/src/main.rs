//! `evoharness`: initialize, run, inspect and export evolutionary runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use evoharness_core::agent::BackendSpec;
use evoharness_core::budget::BudgetLedger;
use evoharness_core::config::RunConfig;
use evoharness_core::db::ProgramDb;
use evoharness_core::gate::ReviewerCommand;
use evoharness_core::orchestrator::{
    init_run, scaffold_seed, status, Orchestrator, RunError, RunPaths, RunSummary, Termination, META_BACKEND,
    META_N_CIRCLES,
};
use evoharness_core::report::write_report;
use evoharness_core::workspace::WorkspaceManager;

const EXIT_USAGE: u8 = 2;
const EXIT_SEED: u8 = 3;
const EXIT_STORAGE: u8 = 4;
const EXIT_WORKSPACE: u8 = 5;
const EXIT_INTERRUPTED: u8 = 130;

#[derive(Parser)]
#[command(name = "evoharness", version, about = "Island-model evolutionary search over git branches")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(clap::Args, Default)]
struct Overrides {
    /// Config file (TOML). Defaults to the run's config.toml, then built-ins.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Token budget.
    #[arg(long)]
    budget: Option<u64>,
    /// Concurrent agents.
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long, value_enum)]
    gate: Option<Switch>,
    #[arg(long = "db-observe", value_enum)]
    db_observe: Option<Switch>,
    #[arg(long)]
    islands: Option<u32>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of circles.
    #[arg(long)]
    n: Option<usize>,
    /// Per-agent timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a run directory from a seed.
    Init {
        run_dir: PathBuf,
        /// Seed directory (candidate/packing.txt, eval/evaluator.toml).
        /// Defaults to a grid packing.
        #[arg(long)]
        seed_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run until the budget is spent or interrupted.
    Run {
        run_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// `simulated` or `command:<path>`.
        #[arg(long, default_value = "simulated")]
        backend: BackendSpec,
        /// External reviewer for the hack gate.
        #[arg(long)]
        reviewer: Option<PathBuf>,
        /// Admit completions in launch order (reproducible with --parallel > 1).
        #[arg(long)]
        ordered: bool,
        #[arg(long)]
        json: bool,
    },
    /// Write history.csv/history.jsonl and print the summary table.
    Report {
        run_dir: PathBuf,
        /// Output directory for the series files (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Snapshot of islands, best score, tokens and hacks.
    Status {
        run_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a starter seed directory.
    Scaffold {
        dir: PathBuf,
        #[arg(long, default_value_t = 26)]
        n: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &RunError) -> u8 {
    match e {
        RunError::Config(_) | RunError::Usage(_) => EXIT_USAGE,
        RunError::Seed(_) => EXIT_SEED,
        RunError::Storage(_) => EXIT_STORAGE,
        RunError::Workspace(_) | RunError::Io(_) => EXIT_WORKSPACE,
    }
}

fn load_config(paths: &RunPaths, o: &Overrides) -> Result<RunConfig, RunError> {
    let file = o.config.clone().or_else(|| Some(paths.config()).filter(|p| p.exists()));
    let mut cfg = match file {
        Some(p) => RunConfig::load(&p).map_err(|e| RunError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.budget {
        cfg.token_budget = v;
    }
    if let Some(v) = o.parallel {
        cfg.max_parallel_agents = v;
    }
    if let Some(v) = o.gate {
        cfg.hack_gate_enabled = v.into();
    }
    if let Some(v) = o.db_observe {
        cfg.db_observation_enabled = v.into();
    }
    if let Some(v) = o.islands {
        cfg.n_islands = v;
    }
    if let Some(v) = o.seed {
        cfg.rng_seed = v;
    }
    if let Some(v) = o.n {
        cfg.n_circles = v;
    }
    if let Some(v) = o.timeout {
        cfg.agent_timeout_seconds = v;
    }
    Ok(cfg)
}

fn dispatch(cmd: Cmd) -> Result<ExitCode, RunError> {
    match cmd {
        Cmd::Init {
            run_dir,
            seed_dir,
            overrides,
        } => {
            let paths = RunPaths::new(run_dir);
            let cfg = load_config(&paths, &overrides)?;
            let seed = init_run(&paths, &cfg, seed_dir.as_deref())?;
            println!(
                "initialized {} (seed {} score {})",
                paths.run_dir.display(),
                seed.branch_ref,
                seed.score.unwrap_or(f64::NAN)
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run {
            run_dir,
            overrides,
            backend,
            reviewer,
            ordered,
            json,
        } => {
            let paths = RunPaths::new(run_dir);
            let mut cfg = load_config(&paths, &overrides)?;
            cfg.ordered_completion |= ordered;
            if !paths.is_initialized() {
                init_run(&paths, &cfg, None)?;
            } else if let Some(n) = overrides.n {
                let db = ProgramDb::open_read_only(&paths.db())?;
                let stored: Option<usize> = db.meta(META_N_CIRCLES)?.and_then(|s| s.parse().ok());
                if stored.is_some_and(|s| s != n) {
                    return Err(RunError::Usage(format!(
                        "--n {n} differs from the run's n_circles {}",
                        stored.unwrap_or_default()
                    )));
                }
            }
            let stop = Arc::new(AtomicBool::new(false));
            {
                let stop = stop.clone();
                let _ = ctrlc::set_handler(move || {
                    eprintln!("interrupt: finishing in-flight agents");
                    stop.store(true, Ordering::SeqCst);
                });
            }
            let reviewer = reviewer.map(|program| ReviewerCommand {
                program: absolute(&program),
                args: Vec::new(),
                timeout_seconds: cfg.agent_timeout_seconds,
            });
            let backend = match backend {
                BackendSpec::Command(p) => BackendSpec::Command(absolute(&p)),
                other => other,
            };
            let summary = Orchestrator::new(cfg.clone(), paths, backend.build(&cfg))
                .with_reviewer(reviewer)
                .with_stop_flag(stop)
                .run()?;
            if json {
                println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            } else {
                print_summary(&summary);
            }
            Ok(match summary.termination {
                Termination::BudgetExhausted => ExitCode::SUCCESS,
                Termination::Interrupted => ExitCode::from(EXIT_INTERRUPTED),
            })
        }
        Cmd::Report { run_dir, out, json } => {
            let paths = RunPaths::new(run_dir);
            let (cfg, db, manager) = open_existing(&paths)?;
            let rate = cfg.rate_for(&db.meta(META_BACKEND)?.unwrap_or_else(|| "simulated".into()));
            let out_dir = out.unwrap_or_else(|| paths.run_dir.clone());
            std::fs::create_dir_all(&out_dir)?;
            let files = write_report(
                &db,
                &manager,
                Some(cfg.n_circles),
                cfg.mechanical_score_cap,
                rate,
                &out_dir,
            )
            .map_err(|e| RunError::Usage(e.to_string()))?;
            if json {
                println!("{}", serde_json::to_string(&files).expect("report serializes"));
            } else {
                print!("{}", files.table.render());
                println!("series: {} {}", files.csv.display(), files.jsonl.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Status { run_dir, json } => {
            let paths = RunPaths::new(run_dir);
            let (cfg, db, _) = open_existing(&paths)?;
            let rate = cfg.rate_for(&db.meta(META_BACKEND)?.unwrap_or_else(|| "simulated".into()));
            let mut ledger = BudgetLedger::new(cfg.token_budget, rate);
            ledger.charge(db.total_tokens()?);
            let snap = status(&db, &ledger)?;
            if json {
                println!("{}", serde_json::to_string(&snap).expect("snapshot serializes"));
            } else {
                println!("run {}: {} records, {} completed, {} live agents", snap.run_id, snap.records, snap.completed, snap.live_agents);
                if let Some(b) = &snap.raw_best {
                    println!("best {} ({}, record {})", b.score, b.branch, b.id);
                }
                println!(
                    "tokens {}/{}  cost ${:.2}  hacks {}",
                    snap.tokens_spent, snap.token_budget, snap.cost, snap.hacks.hacks
                );
                for isl in &snap.islands {
                    let members: Vec<String> = isl
                        .members
                        .iter()
                        .map(|(id, s)| format!("{id}:{}", s.map_or("-".into(), |s| format!("{s:.6}"))))
                        .collect();
                    println!("island {}: {}", isl.island_id, members.join(" "));
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Scaffold { dir, n } => {
            if n == 0 {
                return Err(RunError::Usage("--n must be positive".into()));
            }
            scaffold_seed(&dir, n)?;
            println!("wrote seed for {n} circles to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn open_existing(paths: &RunPaths) -> Result<(RunConfig, ProgramDb, WorkspaceManager), RunError> {
    if !paths.is_initialized() {
        return Err(RunError::Usage(format!("{} is not initialized", paths.run_dir.display())));
    }
    let cfg = RunConfig::load(&paths.config()).map_err(|e| RunError::Usage(e.to_string()))?;
    let db = ProgramDb::open_read_only(&paths.db())?;
    let manager = WorkspaceManager::open(&paths.repo(), &paths.worktrees(), 1)?;
    Ok((cfg, db, manager))
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() || p.components().count() == 1 {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn print_summary(s: &RunSummary) {
    let fmt = |b: &Option<evoharness_core::report::BestEntry>| {
        b.as_ref().map_or("-".to_string(), |b| format!("{:.9} (record {})", b.score, b.id))
    };
    println!("run {} ended: {:?}", s.run_id, s.termination);
    println!("best      {}", fmt(&s.best));
    println!("raw best  {}", fmt(&s.raw_best));
    if s.verification_mismatches > 0 {
        println!("verification mismatches: {}", s.verification_mismatches);
    }
    println!(
        "algorithms {}  hacks {} ({})",
        s.completed,
        s.hacks.hacks,
        s.hacks.hack_rate.map_or("-".into(), |r| format!("{:.1}%", r * 100.0))
    );
    println!(
        "tokens {} / {}  cost ${:.2} at ${}/M",
        s.tokens_spent, s.token_budget, s.cost, s.blended_rate
    );
    println!(
        "wall {:.2}s  agent {:.2}s  parallelism {:.2}x on {} cores",
        s.wall_seconds, s.agent_seconds, s.parallelism_ratio, s.available_cores
    );
}
