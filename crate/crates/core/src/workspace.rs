//! Git plumbing: the run repository, per-agent worktrees, and candidate
//! branches.
//!
//! The repository lives at `<run>/repo`; each leased worktree is a detached
//! checkout under the worktree root. Everything that touches shared git
//! metadata (lease, commit, release) takes the manager's lock; agents work
//! inside their worktree without coordination.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::db::{DbError, ProgramDb};
use crate::evaluator::{EvaluationReport, Evaluator, CANDIDATE_FILE, EVAL_DIR};
use crate::record::{branch_name, ProgramRecord, RecordId};

/// Scratch directory inside a worktree, ignored by git. Agents write their
/// structured result here.
pub const SCRATCH_DIR: &str = ".evo";

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("git {args}: {stderr}")]
    Git { args: String, stderr: String },
    #[error("{0} is already initialized")]
    AlreadyInitialized(PathBuf),
    #[error("branch {0:?} not found")]
    BranchNotFound(String),
    #[error("branch {0:?} already exists")]
    BranchExists(String),
    #[error("all {0} worktree slots are leased")]
    Busy(usize),
    #[error("workspace has no modifications")]
    EmptyChange,
    #[error("lease {0} is not live")]
    NotLeased(String),
    #[error("seed source {path}: {reason}")]
    BadSeed { path: PathBuf, reason: String },
    #[error("seed fails evaluation: {0}")]
    SeedInvalid(String),
    #[error(transparent)]
    Db(#[from] DbError),
}

impl WorkspaceError {
    /// Worth retrying after another lease is released.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Busy(_))
    }
}

pub type Result<T> = std::result::Result<T, WorkspaceError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub worktree_path: PathBuf,
    pub base_branch: String,
    pub lease_id: String,
}

impl Workspace {
    pub fn path(&self) -> &Path {
        &self.worktree_path
    }

    pub fn scratch_dir(&self) -> PathBuf {
        self.worktree_path.join(SCRATCH_DIR)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChange {
    pub path: String,
    /// `None` for binary files.
    pub added: Option<u64>,
    pub removed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitSummary {
    pub branch: String,
    pub commit: String,
    pub parent_commit: String,
    pub files: Vec<FileChange>,
}

impl CommitSummary {
    /// One line per file, `path +added -removed`.
    pub fn diff_stat(&self) -> String {
        self.files
            .iter()
            .map(|f| match (f.added, f.removed) {
                (Some(a), Some(r)) => format!("{} +{a} -{r}", f.path),
                _ => format!("{} (binary)", f.path),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn touches_eval(&self) -> bool {
        self.files.iter().any(|f| is_eval_path(&f.path))
    }
}

pub fn is_eval_path(path: &str) -> bool {
    path == EVAL_DIR || path.starts_with(&format!("{EVAL_DIR}/"))
}

#[derive(Debug, Default)]
struct Leases {
    live: HashMap<String, PathBuf>,
    counter: u64,
}

#[derive(Debug)]
pub struct WorkspaceManager {
    repo: PathBuf,
    worktree_root: PathBuf,
    max_live: usize,
    leases: Mutex<Leases>,
}

impl WorkspaceManager {
    /// Creates the repository with `seed_source` committed on `seed_branch`.
    pub fn init_repo(
        repo: &Path,
        worktree_root: &Path,
        seed_source: &Path,
        seed_branch: &str,
        max_live: usize,
    ) -> Result<Self> {
        if repo.join(".git").exists() {
            return Err(WorkspaceError::AlreadyInitialized(repo.to_path_buf()));
        }
        fs::create_dir_all(repo)?;
        copy_tree(seed_source, repo)?;
        git(repo, &["init", "-q"])?;
        git(repo, &["checkout", "-q", "-b", seed_branch])?;
        let exclude = repo.join(".git/info/exclude");
        fs::create_dir_all(exclude.parent().expect("has parent"))?;
        fs::write(&exclude, format!("{SCRATCH_DIR}/\n"))?;
        git(repo, &["add", "-A"])?;
        git(repo, &["commit", "-q", "-m", "seed"])?;
        Self::open(repo, worktree_root, max_live)
    }

    pub fn open(repo: &Path, worktree_root: &Path, max_live: usize) -> Result<Self> {
        if !repo.join(".git").exists() {
            return Err(WorkspaceError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} is not a repository", repo.display()),
            )));
        }
        fs::create_dir_all(worktree_root)?;
        Ok(Self {
            repo: repo.to_path_buf(),
            worktree_root: worktree_root.to_path_buf(),
            max_live: max_live.max(1),
            leases: Mutex::new(Leases::default()),
        })
    }

    pub fn repo(&self) -> &Path {
        &self.repo
    }

    pub fn worktree_root(&self) -> &Path {
        &self.worktree_root
    }

    pub fn live_count(&self) -> usize {
        self.leases.lock().expect("lease lock").live.len()
    }

    /// Removes worktrees left behind by a previous process. Returns how many
    /// were cleaned up.
    pub fn sweep_stale(&self) -> Result<usize> {
        let guard = self.leases.lock().expect("lease lock");
        let listing = git(&self.repo, &["worktree", "list", "--porcelain"])?;
        let root = canonical(&self.worktree_root);
        let mut removed = 0;
        for line in listing.lines() {
            if let Some(p) = line.strip_prefix("worktree ") {
                let p = PathBuf::from(p);
                let live = guard.live.values().any(|l| canonical(l) == canonical(&p));
                if canonical(&p).starts_with(&root) && !live {
                    let _ = git(&self.repo, &["worktree", "remove", "--force", &p.to_string_lossy()]);
                    if p.exists() {
                        fs::remove_dir_all(&p)?;
                    }
                    removed += 1;
                }
            }
        }
        for entry in fs::read_dir(&self.worktree_root)? {
            let p = entry?.path();
            let live = guard.live.values().any(|l| canonical(l) == canonical(&p));
            if !live && p.is_dir() {
                fs::remove_dir_all(&p)?;
                removed += 1;
            }
        }
        git(&self.repo, &["worktree", "prune"])?;
        Ok(removed)
    }

    pub fn branch_exists(&self, branch: &str) -> bool {
        git(&self.repo, &["rev-parse", "--verify", "--quiet", &format!("refs/heads/{branch}")]).is_ok()
    }

    pub fn branch_tip(&self, branch: &str) -> Result<String> {
        git(&self.repo, &["rev-parse", &format!("refs/heads/{branch}")])
            .map(|s| s.trim().to_string())
            .map_err(|_| WorkspaceError::BranchNotFound(branch.to_string()))
    }

    /// Checks out `base_branch` into a fresh worktree.
    pub fn lease(&self, base_branch: &str) -> Result<Workspace> {
        let mut leases = self.leases.lock().expect("lease lock");
        if leases.live.len() >= self.max_live {
            return Err(WorkspaceError::Busy(self.max_live));
        }
        let tip = git(&self.repo, &["rev-parse", "--verify", "--quiet", &format!("refs/heads/{base_branch}")])
            .map_err(|_| WorkspaceError::BranchNotFound(base_branch.to_string()))?;
        let (lease_id, path) = loop {
            leases.counter += 1;
            let id = format!("wt-{:06}", leases.counter);
            let p = self.worktree_root.join(&id);
            if !p.exists() {
                break (id, p);
            }
        };
        git(
            &self.repo,
            &["worktree", "add", "--detach", "-q", &path.to_string_lossy(), tip.trim()],
        )?;
        leases.live.insert(lease_id.clone(), path.clone());
        Ok(Workspace {
            worktree_path: path,
            base_branch: base_branch.to_string(),
            lease_id,
        })
    }

    /// Commits every modification in `ws` onto a new branch rooted at the
    /// base branch tip.
    pub fn commit(&self, ws: &Workspace, new_branch: &str, message: &str) -> Result<CommitSummary> {
        let leases = self.leases.lock().expect("lease lock");
        if !leases.live.contains_key(&ws.lease_id) {
            return Err(WorkspaceError::NotLeased(ws.lease_id.clone()));
        }
        if self.branch_exists(new_branch) {
            return Err(WorkspaceError::BranchExists(new_branch.to_string()));
        }
        let dir = ws.path();
        git(dir, &["add", "-A"])?;
        if git(dir, &["diff", "--cached", "--quiet"]).is_ok() {
            return Err(WorkspaceError::EmptyChange);
        }
        let parent_commit = git(dir, &["rev-parse", "HEAD"])?.trim().to_string();
        git(dir, &["commit", "-q", "--no-verify", "-m", message])?;
        let commit = git(dir, &["rev-parse", "HEAD"])?.trim().to_string();
        git(&self.repo, &["branch", new_branch, &commit])?;
        drop(leases);
        let files = self.numstat(&parent_commit, &commit)?;
        Ok(CommitSummary {
            branch: new_branch.to_string(),
            commit,
            parent_commit,
            files,
        })
    }

    /// Removes the worktree. Releasing twice is a no-op.
    pub fn release(&self, ws: &Workspace) -> Result<()> {
        let mut leases = self.leases.lock().expect("lease lock");
        if leases.live.remove(&ws.lease_id).is_none() {
            return Ok(());
        }
        let path = ws.path().to_string_lossy().to_string();
        if git(&self.repo, &["worktree", "remove", "--force", &path]).is_err() {
            if ws.path().exists() {
                fs::remove_dir_all(ws.path())?;
            }
            git(&self.repo, &["worktree", "prune"])?;
        }
        Ok(())
    }

    pub fn changed_files(&self, from: &str, to: &str) -> Result<Vec<FileChange>> {
        self.numstat(from, to)
    }

    fn numstat(&self, from: &str, to: &str) -> Result<Vec<FileChange>> {
        let out = git(&self.repo, &["diff", "--numstat", "--no-renames", from, to])?;
        Ok(out
            .lines()
            .filter_map(|l| {
                let mut parts = l.splitn(3, '\t');
                let added = parts.next()?.parse().ok();
                let removed = parts.next()?.parse().ok();
                let path = parts.next()?.to_string();
                Some(FileChange { path, added, removed })
            })
            .collect())
    }

    /// Unified diff between two revisions.
    pub fn diff(&self, from: &str, to: &str) -> Result<String> {
        git(&self.repo, &["diff", "--no-renames", from, to])
    }

    /// Contents of `path` at `rev`.
    pub fn show_file(&self, rev: &str, path: &str) -> Result<Vec<u8>> {
        let out = Command::new("git")
            .arg("-C")
            .arg(&self.repo)
            .args(["show", &format!("{rev}:{path}")])
            .output()?;
        if !out.status.success() {
            return Err(WorkspaceError::Git {
                args: format!("show {rev}:{path}"),
                stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
            });
        }
        Ok(out.stdout)
    }
}

/// Creates the run repository from `seed_source`, evaluates the seed once,
/// inserts the seed record, and places it on every island.
///
/// The seed is evaluated before anything is written, so an invalid seed
/// leaves no trace on disk.
#[allow(clippy::too_many_arguments)]
pub fn init_seed_repo(
    seed_source: &Path,
    repo: &Path,
    worktree_root: &Path,
    run_id: &str,
    evaluator: &Evaluator,
    db: &mut ProgramDb,
    n_islands: u32,
    max_live: usize,
) -> Result<(WorkspaceManager, ProgramRecord)> {
    if repo.join(".git").exists() || db.count()? > 0 {
        return Err(WorkspaceError::AlreadyInitialized(repo.to_path_buf()));
    }
    let score = check_seed(seed_source, evaluator)?;
    let seed_id = RecordId(1);
    let branch = branch_name(run_id, seed_id);
    let manager = WorkspaceManager::init_repo(repo, worktree_root, seed_source, &branch, max_live)?;
    let seed = ProgramRecord::seed(seed_id, branch, score);
    db.insert_record(&seed)?;
    let membership = (0..n_islands).map(|i| (i, vec![seed_id])).collect();
    db.save_membership(&membership)?;
    Ok((manager, seed))
}

/// Evaluates a seed directory without touching anything else; returns its
/// score.
pub fn check_seed(seed_source: &Path, evaluator: &Evaluator) -> Result<f64> {
    if !seed_source.is_dir() {
        return Err(WorkspaceError::BadSeed {
            path: seed_source.to_path_buf(),
            reason: "not a readable directory".into(),
        });
    }
    if evaluator.is_circle_packing() && !seed_source.join(CANDIDATE_FILE).is_file() {
        return Err(WorkspaceError::BadSeed {
            path: seed_source.to_path_buf(),
            reason: format!("missing {CANDIDATE_FILE}"),
        });
    }
    let report: EvaluationReport = evaluator.evaluate_dir(seed_source);
    match (report.valid, report.score) {
        (true, Some(s)) => Ok(s),
        _ => Err(WorkspaceError::SeedInvalid(
            report
                .violations
                .iter()
                .map(|v| format!("{:?} {:?} {}", v.kind, v.indices, v.detail))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}

fn git(dir: &Path, args: &[&str]) -> Result<String> {
    let out = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args([
            "-c",
            "user.name=evoharness",
            "-c",
            "user.email=evoharness@localhost",
            "-c",
            "commit.gpgsign=false",
            "-c",
            "core.hooksPath=/dev/null",
        ])
        .args(args)
        .env("GIT_TERMINAL_PROMPT", "0")
        .output()?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(WorkspaceError::Git {
            args: args.join(" "),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        })
    }
}

fn canonical(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let name = entry.file_name();
        if name == ".git" {
            continue;
        }
        let src = entry.path();
        let dst = to.join(&name);
        if entry.file_type()?.is_dir() {
            fs::create_dir_all(&dst)?;
            copy_tree(&src, &dst)?;
        } else {
            fs::copy(&src, &dst)?;
        }
    }
    Ok(())
}
