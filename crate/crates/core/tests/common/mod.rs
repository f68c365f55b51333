#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use evoharness_core::agent::{AgentBackend, AgentOutcome, AgentStatus, AgentTask, SimulatedAgent};
use evoharness_core::config::RunConfig;
use evoharness_core::evaluator::{CANDIDATE_FILE, EVAL_SETTINGS_FILE};
use evoharness_core::orchestrator::{init_run, Orchestrator, RunPaths, RunSummary};
use evoharness_core::packing::{Circle, CirclePacking};

/// Random valid packing: uniform centers, each radius half the distance to
/// the nearest obstacle (wall or other center).
pub fn random_valid_packing(n: usize, seed: u64) -> CirclePacking {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)))
        .collect();
    let circles = centers
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let mut r = x.min(y).min(1.0 - x).min(1.0 - y);
            for (j, &(u, v)) in centers.iter().enumerate() {
                if i != j {
                    r = r.min(0.5 * ((x - u).powi(2) + (y - v).powi(2)).sqrt());
                }
            }
            // Shave a hair so the packing stays valid after decimal round trips.
            Circle::new(x, y, r * (1.0 - 1e-9))
        })
        .collect();
    CirclePacking::new(circles)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `n` stacked circles summing to `claimed`, and loosens the
/// in-repository evaluator so the overlap passes evaluation.
pub struct PlantedHack {
    pub n: usize,
    pub claimed: f64,
}

impl AgentBackend for PlantedHack {
    fn name(&self) -> &str {
        "planted"
    }

    fn run(&self, task: &AgentTask) -> AgentOutcome {
        let ws = task.workspace.path();
        let r = self.claimed / self.n as f64;
        let text: String = (0..self.n).map(|_| format!("0.5 0.5 {r}\n")).collect();
        fs::write(ws.join(CANDIDATE_FILE), text).unwrap();
        fs::write(
            ws.join(EVAL_SETTINGS_FILE),
            format!("n_circles = {}\ntolerance = 1000000.0\n", self.n),
        )
        .unwrap();
        AgentOutcome {
            status: AgentStatus::Completed,
            tokens_used: 60_000,
            tokens_estimated: false,
            wall_seconds: 0.0,
            approach_summary: "loosened the evaluator".into(),
            improvement_ideas: String::new(),
            detail: String::new(),
        }
    }
}

/// Simulated agent that records the hash of the worktree content it started
/// from and the hash of what it left behind.
pub struct HashingAgent {
    pub inner: SimulatedAgent,
    pub seen: Mutex<Vec<(String, String)>>,
}

impl HashingAgent {
    pub fn new(restarts: usize) -> Self {
        Self {
            inner: SimulatedAgent::new(restarts),
            seen: Mutex::new(Vec::new()),
        }
    }
}

impl AgentBackend for HashingAgent {
    fn name(&self) -> &str {
        "simulated"
    }

    fn run(&self, task: &AgentTask) -> AgentOutcome {
        let path = task.workspace.path().join(CANDIDATE_FILE);
        let before = sha256_hex(&fs::read(&path).unwrap());
        let mut out = self.inner.run(task);
        let after = sha256_hex(&fs::read(&path).unwrap());
        out.approach_summary = format!("base={before} head={after} {}", out.approach_summary);
        self.seen.lock().unwrap().push((before, after));
        out
    }
}

/// Initializes `dir` with a grid seed and runs `backend` to completion.
pub fn run_in(dir: &Path, cfg: &RunConfig, backend: Box<dyn AgentBackend>) -> (RunPaths, RunSummary) {
    let paths = RunPaths::new(dir);
    init_run(&paths, cfg, None).unwrap();
    let summary = Orchestrator::new(cfg.clone(), paths.clone(), backend).run().unwrap();
    (paths, summary)
}

pub fn cfg(n: usize, budget: u64) -> RunConfig {
    RunConfig {
        n_circles: n,
        token_budget: budget,
        agent_timeout_seconds: 120,
        ..RunConfig::default()
    }
}

/// Two-circle optimum by search: a coarse grid over both centers, then
/// compass refinement of the best cells. For fixed centers the best radii
/// have sum `min(w1 + w2, d)` (wall clearances `w`, center distance `d`).
pub fn two_circle_oracle() -> f64 {
    fn value(p: [f64; 4]) -> f64 {
        let w = |x: f64, y: f64| x.min(y).min(1.0 - x).min(1.0 - y);
        let (w1, w2) = (w(p[0], p[1]), w(p[2], p[3]));
        if w1 < 0.0 || w2 < 0.0 {
            return f64::NEG_INFINITY;
        }
        let d = ((p[0] - p[2]).powi(2) + (p[1] - p[3]).powi(2)).sqrt();
        (w1 + w2).min(d)
    }
    let step = 0.02;
    let ticks: Vec<f64> = (0..=50).map(|i| i as f64 * step).collect();
    let mut starts: Vec<(f64, [f64; 4])> = Vec::new();
    for &a in &ticks {
        for &b in &ticks {
            for &c in &ticks {
                for &e in &ticks {
                    let p = [a, b, c, e];
                    starts.push((value(p), p));
                }
            }
        }
    }
    starts.sort_by(|x, y| y.0.total_cmp(&x.0));
    starts.truncate(64);
    // All 80 nonzero directions in {-1, 0, 1}^4, so diagonal ridges of the
    // nonsmooth objective can be followed.
    let dirs: Vec<[f64; 4]> = (0..81)
        .map(|i| [(i % 3) as f64 - 1.0, (i / 3 % 3) as f64 - 1.0, (i / 9 % 3) as f64 - 1.0, (i / 27) as f64 - 1.0])
        .filter(|d| d.iter().any(|&c| c != 0.0))
        .collect();
    let mut best = f64::NEG_INFINITY;
    for (mut v, mut p) in starts {
        let mut h = step;
        while h > 1e-12 {
            let mut moved = false;
            for d in &dirs {
                let q = [p[0] + h * d[0], p[1] + h * d[1], p[2] + h * d[2], p[3] + h * d[3]];
                let vq = value(q);
                if vq > v {
                    v = vq;
                    p = q;
                    moved = true;
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        best = best.max(v);
    }
    best
}
