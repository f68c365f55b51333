//! Agents in parallel worktrees do not see or clobber each other's edits,
//! and the external adapter stays inside its worktree.

mod common;

use std::fs;
use std::os::unix::fs::PermissionsExt;

use evoharness_core::agent::CommandAgent;
use evoharness_core::config::RunConfig;
use evoharness_core::db::ProgramDb;
use evoharness_core::evaluator::CANDIDATE_FILE;
use evoharness_core::orchestrator::{init_run, Orchestrator, RunPaths};
use evoharness_core::record::Status;
use evoharness_core::workspace::WorkspaceManager;

#[test]
fn command_agents_are_confined_to_their_worktree() {
    let d = tempfile::tempdir().unwrap();
    let script = d.path().join("agent.sh");
    // Each agent records where it ran, then makes a distinct edit.
    fs::write(
        &script,
        r#"#!/bin/sh
here=$(pwd -P)
[ "$here" = "$(cd "$EVO_WORKTREE" && pwd -P)" ] || exit 3
case "$here" in */worktrees/*) ;; *) exit 4 ;; esac
sleep 0.2
awk -v s="$$" 'NR==1 { $3 = $3 * 0.5 + (s % 97) * 1e-9 } { print }' candidate/packing.txt > candidate/next.txt
mv candidate/next.txt candidate/packing.txt
printf '{"approach_summary":"%s","tokens_used":100000}' "$here" > "$EVO_RESULT_FILE"
"#,
    )
    .unwrap();
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();

    let cfg = RunConfig {
        max_parallel_agents: 4,
        ..common::cfg(5, 1_200_000)
    };
    let paths = RunPaths::new(d.path().join("run"));
    init_run(&paths, &cfg, None).unwrap();
    let s = Orchestrator::new(cfg.clone(), paths.clone(), Box::new(CommandAgent::new(script, 50_000)))
        .run()
        .unwrap();
    assert!(s.completed >= 12, "{s:?}");

    let db = ProgramDb::open(&paths.db()).unwrap();
    let manager = WorkspaceManager::open(&paths.repo(), &paths.worktrees(), 1).unwrap();
    let mut dirs = std::collections::BTreeSet::new();
    for r in db.all_records().unwrap() {
        if r.status == Status::Seed {
            continue;
        }
        assert_eq!(r.status, Status::EvaluatedValid, "{}", r.rejection_reason);
        dirs.insert(r.approach_summary.clone());
        // The child differs from its parent in exactly the file the agent edited.
        let parent = db.get(r.parent_id.unwrap()).unwrap();
        let files = manager.changed_files(&parent.branch_ref, &r.branch_ref).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(files[0].path, CANDIDATE_FILE);
    }
    // Concurrent agents used distinct directories, all since removed.
    assert!(dirs.len() >= 4);
    assert_eq!(fs::read_dir(paths.worktrees()).unwrap().count(), 0);
}

#[test]
fn parallel_simulated_agents_commit_only_their_own_content() {
    let d = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        max_parallel_agents: 4,
        ..common::cfg(8, 1_000_000)
    };
    let agent = common::HashingAgent::new(2);
    let paths = RunPaths::new(d.path().join("run"));
    init_run(&paths, &cfg, None).unwrap();
    Orchestrator::new(cfg, paths.clone(), Box::new(agent)).run().unwrap();

    let db = ProgramDb::open(&paths.db()).unwrap();
    let manager = WorkspaceManager::open(&paths.repo(), &paths.worktrees(), 1).unwrap();
    let mut checked = 0;
    for r in db.all_records().unwrap() {
        if r.status == Status::Seed || r.status == Status::FailedAgent {
            continue;
        }
        let parent = db.get(r.parent_id.unwrap()).unwrap();
        let parent_hash = common::sha256_hex(&manager.show_file(&parent.branch_ref, CANDIDATE_FILE).unwrap());
        let head_hash = common::sha256_hex(&manager.show_file(&r.branch_ref, CANDIDATE_FILE).unwrap());
        assert!(r.approach_summary.starts_with(&format!("base={parent_hash} head={head_hash}")));
        checked += 1;
    }
    assert!(checked >= 8);
}
