//! SQLite program database.
//!
//! One file per run. Tables:
//!
//! - `programs`: every [`ProgramRecord`]; scores are stored as decimal text
//!   with 12 significant digits (use `CAST(score AS REAL)` when sorting).
//! - `events`: completion log in the order the coordinator admitted records.
//! - `migrations`: one row per member copied between islands.
//! - `island_members`: current selection pool of every island.
//! - `meta`: run-level key/value pairs (run id, budget, rate).
//!
//! The orchestrator holds the only writable handle. Agents and reports open
//! their own read-only handles on the same path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rusqlite::{params, Connection, OpenFlags, OptionalExtension, Row};
use serde::{Deserialize, Serialize};

use crate::record::{rank_order, ProgramRecord, RecordId, Status};

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("branch {0:?} already recorded")]
    DuplicateBranch(String),
    #[error("record id {0} already recorded")]
    DuplicateId(RecordId),
    #[error("parent {parent} of record {id} does not exist or is not older")]
    MissingParent { id: RecordId, parent: RecordId },
    #[error("record {0} not found")]
    NotFound(RecordId),
    #[error("record {id}: {message}")]
    InvalidRecord { id: RecordId, message: String },
    #[error("corrupt database: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, DbError>;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS meta (
    key   TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS programs (
    id                INTEGER PRIMARY KEY,
    branch_ref        TEXT NOT NULL UNIQUE,
    parent_id         INTEGER REFERENCES programs(id),
    island_id         INTEGER NOT NULL,
    score             TEXT,
    status            TEXT NOT NULL,
    tokens_used       INTEGER NOT NULL,
    tokens_estimated  INTEGER NOT NULL,
    review_tokens     INTEGER NOT NULL,
    wall_seconds      REAL NOT NULL,
    approach_summary  TEXT NOT NULL,
    improvement_ideas TEXT NOT NULL,
    diff_summary      TEXT NOT NULL,
    rejection_reason  TEXT NOT NULL,
    created_at        REAL NOT NULL
);
CREATE INDEX IF NOT EXISTS programs_island ON programs(island_id);
CREATE TABLE IF NOT EXISTS events (
    seq          INTEGER PRIMARY KEY AUTOINCREMENT,
    record_id    INTEGER NOT NULL UNIQUE REFERENCES programs(id),
    completed_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS migrations (
    id             INTEGER PRIMARY KEY AUTOINCREMENT,
    at_count       INTEGER NOT NULL,
    source_island  INTEGER NOT NULL,
    target_island  INTEGER NOT NULL,
    record_id      INTEGER NOT NULL REFERENCES programs(id)
);
CREATE TABLE IF NOT EXISTS island_members (
    island_id INTEGER NOT NULL,
    record_id INTEGER NOT NULL REFERENCES programs(id),
    PRIMARY KEY (island_id, record_id)
);
";

const COLUMNS: &str = "id, branch_ref, parent_id, island_id, score, status, tokens_used, \
    tokens_estimated, review_tokens, wall_seconds, approach_summary, improvement_ideas, \
    diff_summary, rejection_reason, created_at";

/// 12 significant digits, scientific notation.
pub fn format_score(score: f64) -> String {
    format!("{score:.11e}")
}

pub fn parse_score(text: &str) -> Option<f64> {
    text.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationEvent {
    pub at_count: u64,
    pub source_island: u32,
    pub target_island: u32,
    pub record_id: RecordId,
}

/// One completed record in admission order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub seq: u64,
    pub record_id: RecordId,
    pub status: Status,
    pub score: Option<f64>,
    pub tokens_used: u64,
    pub cumulative_tokens: u64,
    pub cumulative_cost: f64,
    pub best_so_far: Option<f64>,
    /// This row raised the best-so-far.
    pub improved: bool,
    pub completed_at: f64,
}

pub struct ProgramDb {
    conn: Connection,
    path: PathBuf,
}

impl std::fmt::Debug for ProgramDb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProgramDb").field("path", &self.path).finish()
    }
}

impl ProgramDb {
    /// Opens (creating if needed) a writable database.
    pub fn open(path: &Path) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.busy_timeout(Duration::from_secs(10))?;
        conn.execute_batch("PRAGMA foreign_keys = ON; PRAGMA synchronous = FULL;")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn,
            path: path.to_path_buf(),
        })
    }

    pub fn open_read_only(path: &Path) -> Result<Self> {
        let conn = Connection::open_with_flags(
            path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )?;
        conn.busy_timeout(Duration::from_secs(10))?;
        Ok(Self {
            conn,
            path: path.to_path_buf(),
        })
    }

    pub fn in_memory() -> Result<Self> {
        let conn = Connection::open_in_memory()?;
        conn.execute_batch("PRAGMA foreign_keys = ON;")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn,
            path: PathBuf::from(":memory:"),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Raw connection, for ad-hoc queries.
    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    pub fn set_meta(&mut self, key: &str, value: &str) -> Result<()> {
        self.conn.execute(
            "INSERT INTO meta(key, value) VALUES (?1, ?2)
             ON CONFLICT(key) DO UPDATE SET value = excluded.value",
            params![key, value],
        )?;
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<Option<String>> {
        Ok(self
            .conn
            .query_row("SELECT value FROM meta WHERE key = ?1", [key], |r| r.get(0))
            .optional()?)
    }

    pub fn next_id(&self) -> Result<RecordId> {
        let max: Option<i64> = self
            .conn
            .query_row("SELECT MAX(id) FROM programs", [], |r| r.get(0))?;
        Ok(RecordId(max.map_or(1, |m| m as u64 + 1)))
    }

    pub fn insert_record(&mut self, rec: &ProgramRecord) -> Result<RecordId> {
        let tx = self.conn.transaction()?;
        insert_in(&tx, rec)?;
        tx.commit()?;
        Ok(rec.id)
    }

    /// Inserts a finished record, logs its completion, and optionally replaces
    /// island membership and appends migrations, all in one transaction.
    pub fn record_completion(
        &mut self,
        rec: &ProgramRecord,
        completed_at: f64,
        membership: Option<&BTreeMap<u32, Vec<RecordId>>>,
        migrations: &[MigrationEvent],
    ) -> Result<()> {
        let tx = self.conn.transaction()?;
        insert_in(&tx, rec)?;
        tx.execute(
            "INSERT INTO events(record_id, completed_at) VALUES (?1, ?2)",
            params![rec.id.0 as i64, completed_at],
        )?;
        append_migrations(&tx, migrations)?;
        if let Some(m) = membership {
            replace_membership(&tx, m)?;
        }
        tx.commit()?;
        Ok(())
    }

    pub fn save_membership(&mut self, membership: &BTreeMap<u32, Vec<RecordId>>) -> Result<()> {
        let tx = self.conn.transaction()?;
        replace_membership(&tx, membership)?;
        tx.commit()?;
        Ok(())
    }

    pub fn membership(&self) -> Result<BTreeMap<u32, Vec<RecordId>>> {
        let mut stmt = self
            .conn
            .prepare("SELECT island_id, record_id FROM island_members ORDER BY island_id, record_id")?;
        let mut out: BTreeMap<u32, Vec<RecordId>> = BTreeMap::new();
        let rows = stmt.query_map([], |r| Ok((r.get::<_, i64>(0)? as u32, RecordId(r.get::<_, i64>(1)? as u64))))?;
        for row in rows {
            let (island, id) = row?;
            out.entry(island).or_default().push(id);
        }
        Ok(out)
    }

    pub fn get(&self, id: RecordId) -> Result<ProgramRecord> {
        self.conn
            .query_row(
                &format!("SELECT {COLUMNS} FROM programs WHERE id = ?1"),
                [id.0 as i64],
                row_to_record,
            )
            .optional()?
            .ok_or(DbError::NotFound(id))
    }

    pub fn get_many(&self, ids: &[RecordId]) -> Result<Vec<ProgramRecord>> {
        ids.iter().map(|&id| self.get(id)).collect()
    }

    pub fn all_records(&self) -> Result<Vec<ProgramRecord>> {
        self.select(&format!("SELECT {COLUMNS} FROM programs ORDER BY id"), [])
    }

    pub fn count(&self) -> Result<u64> {
        let n: i64 = self.conn.query_row("SELECT COUNT(*) FROM programs", [], |r| r.get(0))?;
        Ok(n as u64)
    }

    /// Seed-to-`id` ancestry.
    pub fn query_lineage(&self, id: RecordId) -> Result<Vec<ProgramRecord>> {
        let mut chain = vec![self.get(id)?];
        while let Some(parent) = chain.last().and_then(|r| r.parent_id) {
            if chain.len() as u64 > self.count()? {
                return Err(DbError::Corrupt(format!("lineage cycle through {id}")));
            }
            chain.push(self.get(parent)?);
        }
        chain.reverse();
        Ok(chain)
    }

    /// Records whose home island is `island_id`, best first (ties: smaller
    /// id first). With `selectable_only` only seed and valid records remain.
    pub fn query_island_population(&self, island_id: u32, selectable_only: bool) -> Result<Vec<ProgramRecord>> {
        let mut recs = self.select(
            &format!("SELECT {COLUMNS} FROM programs WHERE island_id = ?1"),
            [island_id as i64],
        )?;
        if selectable_only {
            recs.retain(|r| r.status.is_selectable());
        }
        sort_ranked(&mut recs);
        Ok(recs)
    }

    /// Highest recognized (seed or valid) record.
    pub fn best_record(&self) -> Result<Option<ProgramRecord>> {
        let mut recs = self.select(
            &format!("SELECT {COLUMNS} FROM programs WHERE status IN ('seed', 'evaluated_valid')"),
            [],
        )?;
        sort_ranked(&mut recs);
        Ok(recs.into_iter().next())
    }

    /// Highest score among records of any status that carry one.
    pub fn raw_best_any_status(&self) -> Result<Option<ProgramRecord>> {
        let mut recs = self.select(&format!("SELECT {COLUMNS} FROM programs WHERE score IS NOT NULL"), [])?;
        sort_ranked(&mut recs);
        Ok(recs.into_iter().next())
    }

    /// The `k` highest recognized scores, best first.
    pub fn top_recognized_scores(&self, k: usize) -> Result<Vec<f64>> {
        let mut recs = self.select(
            &format!("SELECT {COLUMNS} FROM programs WHERE status IN ('seed', 'evaluated_valid')"),
            [],
        )?;
        sort_ranked(&mut recs);
        Ok(recs.into_iter().filter_map(|r| r.score).take(k).collect())
    }

    pub fn count_by_status(&self) -> Result<BTreeMap<Status, u64>> {
        let mut out = BTreeMap::new();
        let mut stmt = self.conn.prepare("SELECT status, COUNT(*) FROM programs GROUP BY status")?;
        let rows = stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?)))?;
        for row in rows {
            let (s, n) = row?;
            let status = s.parse::<Status>().map_err(DbError::Corrupt)?;
            out.insert(status, n as u64);
        }
        Ok(out)
    }

    pub fn total_tokens(&self) -> Result<u64> {
        let n: i64 = self
            .conn
            .query_row("SELECT COALESCE(SUM(tokens_used), 0) FROM programs", [], |r| r.get(0))?;
        Ok(n as u64)
    }

    /// Completion series with running token totals, cost at
    /// `rate_per_mtok`, and the running maximum of recognized scores (the
    /// seed's score is the starting point).
    pub fn export_history(&self, rate_per_mtok: f64) -> Result<Vec<HistoryRow>> {
        let seed_best = self
            .select(&format!("SELECT {COLUMNS} FROM programs WHERE status = 'seed'"), [])?
            .into_iter()
            .filter_map(|r| r.score)
            .reduce(f64::max);
        let mut stmt = self.conn.prepare(&format!(
            "SELECT e.seq, e.completed_at, {} FROM events e JOIN programs p ON p.id = e.record_id ORDER BY e.seq",
            COLUMNS
                .split(", ")
                .map(|c| format!("p.{c}"))
                .collect::<Vec<_>>()
                .join(", ")
        ))?;
        let rows = stmt.query_map([], |r| {
            let seq: i64 = r.get(0)?;
            let at: f64 = r.get(1)?;
            let rec = row_to_record_offset(r, 2)?;
            Ok((seq as u64, at, rec))
        })?;
        let mut out = Vec::new();
        let mut cumulative = 0u64;
        let mut best = seed_best;
        for row in rows {
            let (seq, completed_at, rec) = row?;
            cumulative += rec.tokens_used;
            let mut improved = false;
            if let Some(s) = rec.recognized_score() {
                if best.is_none_or(|b| s > b) {
                    best = Some(s);
                    improved = true;
                }
            }
            out.push(HistoryRow {
                seq,
                record_id: rec.id,
                status: rec.status,
                score: rec.score,
                tokens_used: rec.tokens_used,
                cumulative_tokens: cumulative,
                cumulative_cost: cumulative as f64 * rate_per_mtok / 1e6,
                best_so_far: best,
                improved,
                completed_at,
            });
        }
        Ok(out)
    }

    pub fn migrations(&self) -> Result<Vec<MigrationEvent>> {
        let mut stmt = self.conn.prepare(
            "SELECT at_count, source_island, target_island, record_id FROM migrations ORDER BY id",
        )?;
        let rows = stmt.query_map([], |r| {
            Ok(MigrationEvent {
                at_count: r.get::<_, i64>(0)? as u64,
                source_island: r.get::<_, i64>(1)? as u32,
                target_island: r.get::<_, i64>(2)? as u32,
                record_id: RecordId(r.get::<_, i64>(3)? as u64),
            })
        })?;
        Ok(rows.collect::<std::result::Result<_, _>>()?)
    }

    pub fn append_migrations(&mut self, events: &[MigrationEvent]) -> Result<()> {
        let tx = self.conn.transaction()?;
        append_migrations(&tx, events)?;
        tx.commit()?;
        Ok(())
    }

    /// Full traversal of record invariants: one seed, older parents, scores
    /// matching status, lineage ending at the seed, selectable membership.
    pub fn check_invariants(&self) -> Result<Vec<String>> {
        let recs = self.all_records()?;
        let mut problems = Vec::new();
        let by_id: BTreeMap<RecordId, &ProgramRecord> = recs.iter().map(|r| (r.id, r)).collect();
        let seeds: Vec<_> = recs.iter().filter(|r| r.status == Status::Seed).collect();
        if !recs.is_empty() && seeds.len() != 1 {
            problems.push(format!("expected exactly one seed, found {}", seeds.len()));
        }
        for r in &recs {
            if let Err(e) = r.check_local() {
                problems.push(e);
            }
            let mut cur: &ProgramRecord = r;
            let mut steps = 0;
            while let Some(p) = cur.parent_id {
                match by_id.get(&p) {
                    Some(parent) => cur = parent,
                    None => {
                        problems.push(format!("record {}: dangling parent {p}", r.id));
                        break;
                    }
                }
                steps += 1;
                if steps > recs.len() {
                    problems.push(format!("record {}: lineage cycle", r.id));
                    break;
                }
            }
            if cur.status != Status::Seed {
                problems.push(format!("record {}: lineage does not reach the seed", r.id));
            }
        }
        for (island, ids) in self.membership()? {
            for id in ids {
                match by_id.get(&id) {
                    Some(r) if r.status.is_selectable() => {}
                    Some(r) => problems.push(format!("island {island} holds non-selectable {} ({})", id, r.status)),
                    None => problems.push(format!("island {island} holds unknown {id}")),
                }
            }
        }
        Ok(problems)
    }

    /// Text dump of every table with timing columns removed.
    pub fn canonical_dump(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.all_records()? {
            out.push_str(&format!(
                "program {} {} {:?} {} {:?} {} {} {} {} {:?} {:?} {:?} {:?}\n",
                r.id,
                r.branch_ref,
                r.parent_id,
                r.island_id,
                r.score.map(format_score),
                r.status,
                r.tokens_used,
                r.tokens_estimated,
                r.review_tokens,
                r.approach_summary,
                r.improvement_ideas,
                r.diff_summary,
                r.rejection_reason
            ));
        }
        let mut stmt = self.conn.prepare("SELECT seq, record_id FROM events ORDER BY seq")?;
        let events = stmt.query_map([], |r| Ok((r.get::<_, i64>(0)?, r.get::<_, i64>(1)?)))?;
        for e in events {
            let (seq, id) = e?;
            out.push_str(&format!("event {seq} {id}\n"));
        }
        for m in self.migrations()? {
            out.push_str(&format!("migration {m:?}\n"));
        }
        for (island, ids) in self.membership()? {
            out.push_str(&format!("members {island} {ids:?}\n"));
        }
        let mut stmt = self.conn.prepare("SELECT key, value FROM meta ORDER BY key")?;
        let meta = stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)))?;
        for kv in meta {
            let (k, v) = kv?;
            if !k.ends_with("_at") && k != "in_flight" {
                out.push_str(&format!("meta {k} {v}\n"));
            }
        }
        Ok(out)
    }

    fn select<P: rusqlite::Params>(&self, sql: &str, params: P) -> Result<Vec<ProgramRecord>> {
        let mut stmt = self.conn.prepare(sql)?;
        let rows = stmt.query_map(params, row_to_record)?;
        Ok(rows.collect::<std::result::Result<_, _>>()?)
    }
}

fn sort_ranked(recs: &mut [ProgramRecord]) {
    recs.sort_by(|a, b| {
        rank_order(
            (a.score.unwrap_or(f64::NEG_INFINITY), a.id),
            (b.score.unwrap_or(f64::NEG_INFINITY), b.id),
        )
    });
}

fn insert_in(tx: &rusqlite::Transaction<'_>, rec: &ProgramRecord) -> Result<()> {
    rec.check_local().map_err(|message| DbError::InvalidRecord { id: rec.id, message })?;
    let exists: bool = tx.query_row(
        "SELECT EXISTS(SELECT 1 FROM programs WHERE id = ?1)",
        [rec.id.0 as i64],
        |r| r.get(0),
    )?;
    if exists {
        return Err(DbError::DuplicateId(rec.id));
    }
    let branch_taken: bool = tx.query_row(
        "SELECT EXISTS(SELECT 1 FROM programs WHERE branch_ref = ?1)",
        [&rec.branch_ref],
        |r| r.get(0),
    )?;
    if branch_taken {
        return Err(DbError::DuplicateBranch(rec.branch_ref.clone()));
    }
    if let Some(parent) = rec.parent_id {
        let found: bool = tx.query_row(
            "SELECT EXISTS(SELECT 1 FROM programs WHERE id = ?1)",
            [parent.0 as i64],
            |r| r.get(0),
        )?;
        if !found {
            return Err(DbError::MissingParent { id: rec.id, parent });
        }
    } else {
        let seeds: i64 = tx.query_row("SELECT COUNT(*) FROM programs WHERE parent_id IS NULL", [], |r| r.get(0))?;
        if seeds > 0 {
            return Err(DbError::InvalidRecord {
                id: rec.id,
                message: "a seed is already recorded".into(),
            });
        }
    }
    tx.execute(
        &format!("INSERT INTO programs({COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15)"),
        params![
            rec.id.0 as i64,
            rec.branch_ref,
            rec.parent_id.map(|p| p.0 as i64),
            rec.island_id as i64,
            rec.score.map(format_score),
            rec.status.as_str(),
            rec.tokens_used as i64,
            rec.tokens_estimated,
            rec.review_tokens as i64,
            rec.wall_seconds,
            rec.approach_summary,
            rec.improvement_ideas,
            rec.diff_summary,
            rec.rejection_reason,
            rec.created_at,
        ],
    )?;
    Ok(())
}

fn append_migrations(tx: &rusqlite::Transaction<'_>, events: &[MigrationEvent]) -> Result<()> {
    let mut stmt = tx.prepare(
        "INSERT INTO migrations(at_count, source_island, target_island, record_id) VALUES (?1, ?2, ?3, ?4)",
    )?;
    for m in events {
        stmt.execute(params![
            m.at_count as i64,
            m.source_island as i64,
            m.target_island as i64,
            m.record_id.0 as i64
        ])?;
    }
    Ok(())
}

fn replace_membership(tx: &rusqlite::Transaction<'_>, membership: &BTreeMap<u32, Vec<RecordId>>) -> Result<()> {
    tx.execute("DELETE FROM island_members", [])?;
    let mut stmt = tx.prepare("INSERT INTO island_members(island_id, record_id) VALUES (?1, ?2)")?;
    for (island, ids) in membership {
        for id in ids {
            stmt.execute(params![*island as i64, id.0 as i64])?;
        }
    }
    Ok(())
}

fn row_to_record(r: &Row<'_>) -> rusqlite::Result<ProgramRecord> {
    row_to_record_offset(r, 0)
}

fn row_to_record_offset(r: &Row<'_>, o: usize) -> rusqlite::Result<ProgramRecord> {
    let status: String = r.get(o + 5)?;
    let status = status.parse::<Status>().map_err(|e| {
        rusqlite::Error::FromSqlConversionFailure(o + 5, rusqlite::types::Type::Text, e.into())
    })?;
    let score: Option<String> = r.get(o + 4)?;
    Ok(ProgramRecord {
        id: RecordId(r.get::<_, i64>(o)? as u64),
        branch_ref: r.get(o + 1)?,
        parent_id: r.get::<_, Option<i64>>(o + 2)?.map(|p| RecordId(p as u64)),
        island_id: r.get::<_, i64>(o + 3)? as u32,
        score: score.as_deref().and_then(parse_score),
        status,
        tokens_used: r.get::<_, i64>(o + 6)? as u64,
        tokens_estimated: r.get(o + 7)?,
        review_tokens: r.get::<_, i64>(o + 8)? as u64,
        wall_seconds: r.get(o + 9)?,
        approach_summary: r.get(o + 10)?,
        improvement_ideas: r.get(o + 11)?,
        diff_summary: r.get(o + 12)?,
        rejection_reason: r.get(o + 13)?,
        created_at: r.get(o + 14)?,
    })
}
