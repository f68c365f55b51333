//! Fixtures shared by unit tests.

use std::fs;
use std::path::Path;

use crate::db::ProgramDb;
use crate::evaluator::{EvalSettings, Evaluator, CANDIDATE_FILE, EVAL_SETTINGS_FILE};
use crate::record::ProgramRecord;
use crate::workspace::{init_seed_repo, WorkspaceManager};

pub fn write_seed(dir: &Path, text: &str, n: usize) {
    fs::create_dir_all(dir.join("candidate")).unwrap();
    fs::create_dir_all(dir.join("eval")).unwrap();
    fs::write(dir.join(CANDIDATE_FILE), text).unwrap();
    fs::write(dir.join(EVAL_SETTINGS_FILE), EvalSettings::new(n).to_toml()).unwrap();
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manager: WorkspaceManager,
    pub seed: ProgramRecord,
    pub db: ProgramDb,
}

/// A run directory with an initialized repo and on-disk database.
pub fn fixture(seed_text: &str, n: usize, islands: u32) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let seed_dir = dir.path().join("seed");
    write_seed(&seed_dir, seed_text, n);
    let mut db = ProgramDb::open(&dir.path().join("program.db")).unwrap();
    let (manager, seed) = init_seed_repo(
        &seed_dir,
        &dir.path().join("repo"),
        &dir.path().join("worktrees"),
        "t",
        &Evaluator::circle_packing(n),
        &mut db,
        islands,
        8,
    )
    .unwrap();
    Fixture { dir, manager, seed, db }
}
