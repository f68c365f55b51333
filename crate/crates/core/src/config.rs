//! Run configuration, loadable from TOML.
//!
//! ```toml
//! n_islands = 5
//! migration_interval = 50
//! migration_rate = 0.1
//! p_explore = 0.3
//! p_exploit = 0.7
//! max_island_population = 5
//! max_total_population = 25
//! token_budget = 40000000
//! max_parallel_agents = 4
//! agent_timeout_seconds = 3600
//! hack_gate_enabled = true
//! db_observation_enabled = false
//! mechanical_score_cap = 3.0
//! blended_rate_per_mtok = 9.77
//! rng_seed = 0
//! n_circles = 26
//!
//! [rates]          # optional per-backend overrides of blended_rate_per_mtok
//! simulated = 1.05
//! ```
//!
//! Every key is optional; missing keys take the defaults shown.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_islands: u32,
    pub migration_interval: u64,
    pub migration_rate: f64,
    pub p_explore: f64,
    pub p_exploit: f64,
    pub max_island_population: usize,
    pub max_total_population: usize,
    pub token_budget: u64,
    pub max_parallel_agents: usize,
    pub agent_timeout_seconds: u64,
    pub hack_gate_enabled: bool,
    pub db_observation_enabled: bool,
    pub mechanical_score_cap: f64,
    pub blended_rate_per_mtok: f64,
    pub rng_seed: u64,
    pub n_circles: usize,
    /// Backend name ("simulated", "command") to dollars per million tokens.
    pub rates: BTreeMap<String, f64>,
    /// Tokens charged when an agent reports nothing and leaves no transcript.
    pub flat_token_estimate: u64,
    /// Prepended to every agent's instructions.
    pub instructions: String,
    /// Parallel restarts the simulated agent tries per cycle.
    pub simulated_restarts: usize,
    /// Admit completions strictly in launch order.
    pub ordered_completion: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_islands: 5,
            migration_interval: 50,
            migration_rate: 0.1,
            p_explore: 0.3,
            p_exploit: 0.7,
            max_island_population: 5,
            max_total_population: 25,
            token_budget: 40_000_000,
            max_parallel_agents: 4,
            agent_timeout_seconds: 3600,
            hack_gate_enabled: true,
            db_observation_enabled: false,
            mechanical_score_cap: 3.0,
            blended_rate_per_mtok: 9.77,
            rng_seed: 0,
            n_circles: 26,
            rates: BTreeMap::new(),
            flat_token_estimate: 50_000,
            instructions: DEFAULT_INSTRUCTIONS.to_string(),
            simulated_restarts: 4,
            ordered_completion: false,
        }
    }
}

pub const DEFAULT_INSTRUCTIONS: &str = "\
Improve the program in this repository. The task: place the circles listed in \
candidate/packing.txt (one `x y r` per line) inside the unit square without \
overlap so that the sum of radii is as large as possible. Keep the number of \
circles unchanged. Do not modify anything under eval/.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigViolation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Probability of uniform selection over the whole island.
    pub fn p_uniform(&self) -> f64 {
        (1.0 - self.p_explore - self.p_exploit).max(0.0)
    }

    /// Dollars per million tokens for `backend`.
    pub fn rate_for(&self, backend: &str) -> f64 {
        self.rates
            .get(backend)
            .copied()
            .unwrap_or(self.blended_rate_per_mtok)
    }

    /// Every broken invariant; empty means the config is usable.
    pub fn validate(&self) -> Vec<ConfigViolation> {
        let mut v = Vec::new();
        let mut bad = |field: &'static str, message: &str| {
            v.push(ConfigViolation {
                field,
                message: message.to_string(),
            })
        };
        const POS: &str = "positive integer";
        if self.n_islands == 0 {
            bad("n_islands", POS);
        }
        if self.migration_interval == 0 {
            bad("migration_interval", POS);
        }
        if !(self.migration_rate > 0.0 && self.migration_rate <= 1.0) {
            bad("migration_rate", "must lie in (0, 1]");
        }
        for (field, p) in [("p_explore", self.p_explore), ("p_exploit", self.p_exploit)] {
            if !(0.0..=1.0).contains(&p) {
                bad(field, "probability must lie in [0, 1]");
            }
        }
        if self.p_explore + self.p_exploit > 1.0 + 1e-12 {
            bad("p_explore", "p_explore + p_exploit ≤ 1");
        }
        if self.max_island_population == 0 {
            bad("max_island_population", POS);
        }
        if self.max_total_population == 0 {
            bad("max_total_population", POS);
        }
        if self.max_total_population < self.n_islands as usize {
            bad("max_total_population", "must be ≥ n_islands so every island holds the seed");
        }
        if self.token_budget == 0 {
            bad("token_budget", POS);
        }
        if self.max_parallel_agents == 0 {
            bad("max_parallel_agents", POS);
        }
        if self.agent_timeout_seconds == 0 {
            bad("agent_timeout_seconds", POS);
        }
        if !self.mechanical_score_cap.is_finite() {
            bad("mechanical_score_cap", "must be finite");
        }
        if !(self.blended_rate_per_mtok.is_finite() && self.blended_rate_per_mtok >= 0.0) {
            bad("blended_rate_per_mtok", "must be a non-negative decimal");
        }
        if self.rates.values().any(|r| !(r.is_finite() && *r >= 0.0)) {
            bad("rates", "must be non-negative decimals");
        }
        if self.n_circles == 0 {
            bad("n_circles", POS);
        }
        if self.simulated_restarts == 0 {
            bad("simulated_restarts", POS);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_empty());
        assert_eq!(cfg.n_islands, 5);
        assert_eq!(cfg.migration_interval, 50);
        assert_eq!(cfg.migration_rate, 0.1);
        assert_eq!((cfg.p_explore, cfg.p_exploit), (0.3, 0.7));
        assert_eq!((cfg.max_island_population, cfg.max_total_population), (5, 25));
        assert_eq!(cfg.token_budget, 40_000_000);
        assert_eq!(cfg.max_parallel_agents, 4);
        assert_eq!(cfg.agent_timeout_seconds, 3600);
        assert_eq!(cfg.p_uniform(), 0.0);
    }

    #[test]
    fn probabilities_over_one() {
        let cfg = RunConfig {
            p_explore: 0.6,
            p_exploit: 0.6,
            ..RunConfig::default()
        };
        let v = cfg.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "p_explore + p_exploit ≤ 1");
    }

    #[test]
    fn zero_islands() {
        let cfg = RunConfig {
            n_islands: 0,
            ..RunConfig::default()
        };
        let v = cfg.validate();
        assert!(v.iter().any(|v| v.field == "n_islands" && v.message == "positive integer"));
    }

    #[test]
    fn collects_every_violation() {
        let cfg = RunConfig {
            n_islands: 30,
            token_budget: 0,
            migration_rate: 0.0,
            ..RunConfig::default()
        };
        let fields: Vec<_> = cfg.validate().iter().map(|v| v.field).collect();
        assert_eq!(fields, ["migration_rate", "max_total_population", "token_budget"]);
    }

    #[test]
    fn toml_partial_and_round_trip() {
        let cfg = RunConfig::from_toml_str("n_islands = 3\n[rates]\nsimulated = 1.05\n").unwrap();
        assert_eq!(cfg.n_islands, 3);
        assert_eq!(cfg.migration_interval, 50);
        assert_eq!(cfg.rate_for("simulated"), 1.05);
        assert_eq!(cfg.rate_for("command"), 9.77);
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
    }
}
