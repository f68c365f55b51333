use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AgentBackend, AgentOutcome, AgentStatus, AgentTask};
use crate::process::{run_with_timeout, ExitKind};
use crate::workspace::SCRATCH_DIR;

/// Default result path, relative to the worktree.
pub const RESULT_FILE: &str = ".evo/result.json";
/// Optional transcript used to estimate tokens when none are reported.
pub const TRANSCRIPT_FILE: &str = ".evo/transcript.txt";
/// Upper bound on how long past its timeout an agent may survive.
pub const TIMEOUT_GRACE: Duration = Duration::from_secs(10);

/// What the external program writes to `$EVO_RESULT_FILE` before exiting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentResultFile {
    #[serde(default)]
    pub approach_summary: String,
    #[serde(default)]
    pub improvement_ideas: String,
    #[serde(default)]
    pub tokens_used: Option<u64>,
}

/// Runs an external program inside the worktree.
///
/// Protocol: instructions on stdin; cwd is the worktree; environment carries
/// `EVO_WORKTREE`, `EVO_RESULT_FILE`, `EVO_TIMEOUT_SECONDS`,
/// `EVO_PARENT_SCORE`, `EVO_PARENT_BRANCH` and, when DB observation is on,
/// `EVO_DB_PATH`. A nonzero exit or a missing/malformed result file is a
/// failure. The whole process group is killed at the timeout.
#[derive(Debug, Clone)]
pub struct CommandAgent {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub flat_token_estimate: u64,
}

impl CommandAgent {
    pub fn new(program: PathBuf, flat_token_estimate: u64) -> Self {
        Self {
            program,
            args: Vec::new(),
            flat_token_estimate,
        }
    }

    fn estimate_tokens(&self, task: &AgentTask) -> u64 {
        match fs::metadata(task.workspace.path().join(TRANSCRIPT_FILE)) {
            Ok(m) if m.len() > 0 => m.len() / 4,
            _ => self.flat_token_estimate,
        }
    }
}

impl AgentBackend for CommandAgent {
    fn name(&self) -> &str {
        "command"
    }

    fn run(&self, task: &AgentTask) -> AgentOutcome {
        let ws = task.workspace.path();
        let scratch = ws.join(SCRATCH_DIR);
        let result_path = ws.join(RESULT_FILE);
        if let Err(e) = fs::create_dir_all(&scratch) {
            return AgentOutcome::failed(format!("creating {SCRATCH_DIR}: {e}"), 0, true, 0.0);
        }
        let _ = fs::remove_file(&result_path);

        let program = if self.program.is_relative() && self.program.components().count() > 1 {
            std::env::current_dir().map(|d| d.join(&self.program)).unwrap_or(self.program.clone())
        } else {
            self.program.clone()
        };
        let mut cmd = Command::new(program);
        cmd.args(&self.args)
            .current_dir(ws)
            .env("EVO_WORKTREE", ws)
            .env("EVO_RESULT_FILE", &result_path)
            .env("EVO_TIMEOUT_SECONDS", task.timeout_seconds.to_string())
            .env("EVO_PARENT_BRANCH", &task.parent.branch_ref)
            .env(
                "EVO_PARENT_SCORE",
                task.parent.score.map(|s| s.to_string()).unwrap_or_default(),
            )
            .env_remove("EVO_DB_PATH");
        if let Some(db) = &task.db_path {
            cmd.env("EVO_DB_PATH", db);
        }

        let out = match run_with_timeout(
            cmd,
            task.instructions.as_bytes(),
            Duration::from_secs(task.timeout_seconds),
        ) {
            Ok(o) => o,
            Err(e) => return AgentOutcome::failed(format!("spawning agent: {e}"), 0, true, 0.0),
        };
        let wall = out.elapsed.as_secs_f64();
        let parsed: Option<AgentResultFile> = fs::read(&result_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let (tokens, estimated) = match parsed.as_ref().and_then(|r| r.tokens_used) {
            Some(t) => (t, false),
            None => (self.estimate_tokens(task), true),
        };

        match out.exit {
            ExitKind::TimedOut => AgentOutcome {
                status: AgentStatus::TimedOut,
                tokens_used: self.flat_token_estimate,
                tokens_estimated: true,
                wall_seconds: wall,
                approach_summary: String::new(),
                improvement_ideas: String::new(),
                detail: format!("killed after {}s", task.timeout_seconds),
            },
            ExitKind::Exited(0) => match parsed {
                Some(r) => AgentOutcome {
                    status: AgentStatus::Completed,
                    tokens_used: tokens,
                    tokens_estimated: estimated,
                    wall_seconds: wall,
                    approach_summary: r.approach_summary,
                    improvement_ideas: r.improvement_ideas,
                    detail: String::new(),
                },
                None => AgentOutcome::failed("missing or malformed result file", tokens, estimated, wall),
            },
            ExitKind::Exited(code) => AgentOutcome::failed(
                format!("exit {code}: {}", tail(&out.stderr)),
                tokens,
                estimated,
                wall,
            ),
            ExitKind::Signaled => AgentOutcome::failed("killed by signal", tokens, estimated, wall),
        }
    }
}

fn tail(bytes: &[u8]) -> String {
    let s = String::from_utf8_lossy(bytes);
    let s = s.trim();
    let start = s.char_indices().rev().nth(300).map_or(0, |(i, _)| i);
    s[start..].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::run_agent;
    use crate::evaluator::CANDIDATE_FILE;
    use crate::testutil::{fixture, Fixture};
    use std::os::unix::fs::PermissionsExt;
    use std::time::Instant;

    fn script(f: &Fixture, name: &str, body: &str) -> PathBuf {
        let p = f.dir.path().join(name);
        fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
        fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
        p
    }

    fn task(f: &Fixture, timeout: u64, db: bool) -> AgentTask {
        AgentTask {
            workspace: f.manager.lease(&f.seed.branch_ref).unwrap(),
            parent: f.seed.clone(),
            db_path: db.then(|| f.db.path().to_path_buf()),
            instructions: "improve it".into(),
            timeout_seconds: timeout,
            rng_seed: 0,
        }
    }

    #[test]
    fn false_is_failed() {
        let f = fixture("0.5 0.5 0.3\n", 1, 1);
        let t = task(&f, 10, false);
        let out = run_agent(&t, &CommandAgent::new("false".into(), 50_000));
        assert_eq!(out.status, AgentStatus::Failed);
        f.manager.release(&t.workspace).unwrap();
    }

    #[test]
    fn sleeping_past_timeout() {
        let f = fixture("0.5 0.5 0.3\n", 1, 1);
        let p = script(&f, "slow.sh", "sleep 60");
        let t = task(&f, 1, false);
        let start = Instant::now();
        let out = run_agent(&t, &CommandAgent::new(p, 50_000));
        assert_eq!(out.status, AgentStatus::TimedOut);
        assert!(start.elapsed() < Duration::from_secs(1) + TIMEOUT_GRACE);
        assert_eq!((out.tokens_used, out.tokens_estimated), (50_000, true));
        f.manager.release(&t.workspace).unwrap();
    }

    #[test]
    fn protocol_round_trip() {
        let f = fixture("0.5 0.5 0.3\n", 1, 1);
        let p = script(
            &f,
            "agent.sh",
            r#"read line
[ "$line" = "improve it" ] || exit 9
[ "$(pwd -P)" = "$(cd "$EVO_WORKTREE" && pwd -P)" ] || exit 8
[ -n "$EVO_DB_PATH" ] || exit 7
echo "0.5 0.5 0.5" > candidate/packing.txt
printf '{"approach_summary":"grow","improvement_ideas":"none","tokens_used":1234}' > "$EVO_RESULT_FILE""#,
        );
        let t = task(&f, 10, true);
        let out = run_agent(&t, &CommandAgent::new(p, 50_000));
        assert_eq!(out.status, AgentStatus::Completed, "{}", out.detail);
        assert_eq!((out.tokens_used, out.tokens_estimated), (1234, false));
        assert_eq!(out.approach_summary, "grow");
        assert_eq!(fs::read_to_string(t.workspace.path().join(CANDIDATE_FILE)).unwrap(), "0.5 0.5 0.5\n");
        f.manager.release(&t.workspace).unwrap();
    }

    #[test]
    fn db_path_absent_without_observation() {
        let f = fixture("0.5 0.5 0.3\n", 1, 1);
        let p = script(
            &f,
            "agent.sh",
            r#"[ -z "$EVO_DB_PATH" ] || exit 7
echo "0.5 0.5 0.4" > candidate/packing.txt
echo '{}' > "$EVO_RESULT_FILE""#,
        );
        let t = task(&f, 10, false);
        let out = run_agent(&t, &CommandAgent::new(p, 777));
        assert_eq!(out.status, AgentStatus::Completed, "{}", out.detail);
        assert_eq!((out.tokens_used, out.tokens_estimated), (777, true));
        f.manager.release(&t.workspace).unwrap();
    }

    #[test]
    fn transcript_estimate_and_missing_result() {
        let f = fixture("0.5 0.5 0.3\n", 1, 1);
        let p = script(
            &f,
            "agent.sh",
            r#"head -c 4000 /dev/zero > .evo/transcript.txt
echo "0.5 0.5 0.4" > candidate/packing.txt"#,
        );
        let t = task(&f, 10, false);
        let out = run_agent(&t, &CommandAgent::new(p, 50_000));
        assert_eq!(out.status, AgentStatus::Failed);
        assert_eq!((out.tokens_used, out.tokens_estimated), (1000, true));
        f.manager.release(&t.workspace).unwrap();
    }

    #[test]
    fn no_edits_is_failed() {
        let f = fixture("0.5 0.5 0.3\n", 1, 1);
        let p = script(&f, "agent.sh", r#"echo '{"tokens_used": 5}' > "$EVO_RESULT_FILE""#);
        let t = task(&f, 10, false);
        let out = run_agent(&t, &CommandAgent::new(p, 50_000));
        assert_eq!(out.status, AgentStatus::Failed);
        assert_eq!(out.tokens_used, 5);
        f.manager.release(&t.workspace).unwrap();
    }
}
