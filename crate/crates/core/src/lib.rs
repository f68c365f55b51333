//! Evolutionary search over git branches. Candidate programs live on
//! branches, a SQLite database holds their scores and lineage in islands,
//! agents edit isolated worktrees, and a gate screens reward hacks before a
//! score can influence selection.

pub mod agent;
pub mod budget;
pub mod config;
pub mod db;
pub mod evaluator;
pub mod gate;
pub mod island;
pub mod orchestrator;
pub mod packing;
pub mod par;
pub mod process;
pub mod record;
pub mod refine;
pub mod report;
pub mod workspace;

#[cfg(test)]
mod testutil;
