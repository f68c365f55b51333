use std::fs;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{synth_tokens, AgentBackend, AgentOutcome, AgentStatus, AgentTask};
use crate::db::ProgramDb;
use crate::evaluator::CANDIDATE_FILE;
use crate::packing::CirclePacking;
use crate::refine;

/// How many top recognized scores an observing agent looks at.
pub const OBSERVED_TOP_K: usize = 5;

/// In-process mutation of `candidate/packing.txt`: best of several seeded
/// mutate-and-refine restarts.
#[derive(Debug, Clone)]
pub struct SimulatedAgent {
    pub restarts: usize,
}

impl SimulatedAgent {
    pub fn new(restarts: usize) -> Self {
        Self {
            restarts: restarts.max(1),
        }
    }

    /// Restart count after looking at the database: doubled when the parent
    /// trails the median of the top scores.
    fn restarts_for(&self, task: &AgentTask) -> (usize, Option<f64>) {
        let Some(path) = &task.db_path else {
            return (self.restarts, None);
        };
        let top = match ProgramDb::open_read_only(path).and_then(|db| db.top_recognized_scores(OBSERVED_TOP_K)) {
            Ok(t) if !t.is_empty() => t,
            _ => return (self.restarts, None),
        };
        let median = median(&top);
        let parent = task.parent.score.unwrap_or(f64::NEG_INFINITY);
        if parent < median {
            (self.restarts * 2, Some(median))
        } else {
            (self.restarts, Some(median))
        }
    }
}

fn median(sorted_desc: &[f64]) -> f64 {
    let n = sorted_desc.len();
    if n % 2 == 1 {
        sorted_desc[n / 2]
    } else {
        (sorted_desc[n / 2 - 1] + sorted_desc[n / 2]) / 2.0
    }
}

impl AgentBackend for SimulatedAgent {
    fn name(&self) -> &str {
        "simulated"
    }

    fn run(&self, task: &AgentTask) -> AgentOutcome {
        let start = Instant::now();
        let path = task.workspace.path().join(CANDIDATE_FILE);
        let packing: CirclePacking = match fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| t.parse().map_err(|e: crate::packing::ParseError| e.to_string()))
        {
            Ok(p) => p,
            Err(e) => return AgentOutcome::failed(format!("reading candidate: {e}"), synth_tokens(0), false, 0.0),
        };
        let (restarts, median) = self.restarts_for(task);
        let mut rng = ChaCha8Rng::seed_from_u64(task.rng_seed);
        let seeds: Vec<u64> = (0..restarts).map(|_| rng.next_u64()).collect();
        let (best, iterations) = refine::best_of(&packing, &seeds);
        let tokens = synth_tokens(iterations as u64);
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed > task.timeout_seconds as f64 {
            return AgentOutcome {
                status: AgentStatus::TimedOut,
                tokens_used: tokens,
                tokens_estimated: false,
                wall_seconds: elapsed,
                approach_summary: String::new(),
                improvement_ideas: String::new(),
                detail: "refinement overran the timeout".into(),
            };
        }
        if let Err(e) = fs::write(&path, best.packing.to_text()) {
            return AgentOutcome::failed(format!("writing candidate: {e}"), tokens, false, elapsed);
        }
        let before = packing.sum_of_radii();
        let after = best.packing.sum_of_radii();
        let mut summary = format!(
            "{:?} mutation, best of {restarts} restarts, {iterations} polish sweeps; sum of radii {before:.9} -> {after:.9}",
            best.op
        );
        if let Some(m) = median {
            summary.push_str(&format!("; top-{OBSERVED_TOP_K} median {m:.9}"));
        }
        let ideas = if after > before + refine::FIXED_POINT_TOL {
            "keep refining this layout with small jitter"
        } else {
            "no gain; try larger moves or reseeding the smallest circle"
        };
        AgentOutcome {
            status: AgentStatus::Completed,
            tokens_used: tokens,
            tokens_estimated: false,
            wall_seconds: start.elapsed().as_secs_f64(),
            approach_summary: summary,
            improvement_ideas: ideas.into(),
            detail: String::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::run_agent;
    use crate::evaluator::Evaluator;
    use crate::testutil::fixture;

    fn task(f: &crate::testutil::Fixture, seed: u64, db: bool) -> AgentTask {
        AgentTask {
            workspace: f.manager.lease(&f.seed.branch_ref).unwrap(),
            parent: f.seed.clone(),
            db_path: db.then(|| f.db.path().to_path_buf()),
            instructions: String::new(),
            timeout_seconds: 60,
            rng_seed: seed,
        }
    }

    #[test]
    fn single_circle_reaches_inscribed() {
        let f = fixture("0.5 0.5 0.3\n", 1, 1);
        let t = task(&f, 7, false);
        let out = run_agent(&t, &SimulatedAgent::new(4));
        assert_eq!(out.status, AgentStatus::Completed, "{}", out.detail);
        let report = Evaluator::circle_packing(1).evaluate(&t.workspace);
        assert!(report.valid);
        assert!((report.score.unwrap() - 0.5).abs() < 1e-6);
        assert!(out.tokens_used >= 50_000);
        f.manager.release(&t.workspace).unwrap();
    }

    #[test]
    fn deterministic_output() {
        let f = fixture(&crate::packing::grid_seed(6).to_text(), 6, 1);
        let a = task(&f, 11, false);
        let b = task(&f, 11, false);
        let oa = run_agent(&a, &SimulatedAgent::new(2));
        let ob = run_agent(&b, &SimulatedAgent::new(2));
        assert_eq!(oa.tokens_used, ob.tokens_used);
        let ra = fs::read(a.workspace.path().join(CANDIDATE_FILE)).unwrap();
        let rb = fs::read(b.workspace.path().join(CANDIDATE_FILE)).unwrap();
        assert_eq!(ra, rb);
        f.manager.release(&a.workspace).unwrap();
        f.manager.release(&b.workspace).unwrap();
    }

    #[test]
    fn observation_doubles_restarts_for_weak_parent() {
        let f = fixture("0.5 0.5 0.3\n", 1, 1);
        let mut t = task(&f, 1, true);
        let agent = SimulatedAgent::new(3);
        // The seed is the only recognized record, so it sits at the median.
        assert_eq!(agent.restarts_for(&t).0, 3);
        t.parent.score = Some(0.1);
        assert_eq!(agent.restarts_for(&t), (6, Some(0.3)));
        t.db_path = None;
        assert_eq!(agent.restarts_for(&t).0, 3);
        f.manager.release(&t.workspace).unwrap();
    }

    #[test]
    fn unreadable_candidate_fails() {
        let f = fixture("0.5 0.5 0.3\n", 1, 1);
        let t = task(&f, 1, false);
        fs::write(t.workspace.path().join(CANDIDATE_FILE), "not numbers").unwrap();
        let out = run_agent(&t, &SimulatedAgent::new(1));
        assert_eq!(out.status, AgentStatus::Failed);
        f.manager.release(&t.workspace).unwrap();
    }

    #[test]
    fn median_of_top() {
        assert_eq!(median(&[3.0, 2.0, 1.0]), 2.0);
        assert_eq!(median(&[4.0, 3.0, 2.0, 1.0]), 2.5);
    }
}
