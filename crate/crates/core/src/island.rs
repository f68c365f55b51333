//! Island populations: parent selection, ring migration, and eviction.
//!
//! Each island keeps a set of record ids that may be drawn as parents. A
//! record belongs to one home island (its `island_id`) but migration can copy
//! its membership to other islands; the record itself is never duplicated.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::db::{MigrationEvent, ProgramDb};
use crate::record::{rank_order, ProgramRecord, RecordId};

/// Fraction of an island drawn from when exploiting.
pub const EXPLOIT_FRACTION: f64 = 0.2;
/// Fraction of an island drawn from when exploring.
pub const EXPLORE_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Explore,
    Exploit,
    Uniform,
}

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("island {0} has no selectable members")]
    EmptyIsland(u32),
    #[error(transparent)]
    Db(#[from] crate::db::DbError),
}

/// Where member scores come from. The database is the usual source; tests
/// and the coordinator's cache use plain maps.
pub trait ScoreLookup {
    fn score_of(&self, id: RecordId) -> Option<f64>;
}

impl ScoreLookup for HashMap<RecordId, f64> {
    fn score_of(&self, id: RecordId) -> Option<f64> {
        self.get(&id).copied()
    }
}

impl ScoreLookup for BTreeMap<RecordId, f64> {
    fn score_of(&self, id: RecordId) -> Option<f64> {
        self.get(&id).copied()
    }
}

impl ScoreLookup for ProgramDb {
    fn score_of(&self, id: RecordId) -> Option<f64> {
        self.get(id).ok().and_then(|r| r.recognized_score())
    }
}

/// `ceil(fraction * k)` clamped to `1..=k`, ignoring floating dust so that
/// e.g. `0.1 * 30` gives 3.
pub fn ceil_share(fraction: f64, k: usize) -> usize {
    if k == 0 {
        return 0;
    }
    let raw = (fraction * k as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandState {
    pub island_id: u32,
    pub member_ids: BTreeSet<RecordId>,
    pub completed_count: u64,
}

impl IslandState {
    pub fn new(island_id: u32) -> Self {
        Self {
            island_id,
            member_ids: BTreeSet::new(),
            completed_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    /// Members best first (ties: smaller id first). Members without a score
    /// sort last.
    pub fn ranked(&self, scores: &impl ScoreLookup) -> Vec<(f64, RecordId)> {
        let mut v: Vec<(f64, RecordId)> = self
            .member_ids
            .iter()
            .map(|&id| (scores.score_of(id).unwrap_or(f64::NEG_INFINITY), id))
            .collect();
        v.sort_by(|a, b| rank_order(*a, *b));
        v
    }

    /// Draws a parent: picks the mode with probabilities
    /// `(p_explore, p_exploit, remainder)`, then a uniform member of that
    /// mode's pool.
    pub fn select_parent<R: Rng + ?Sized>(
        &self,
        db: &ProgramDb,
        p_explore: f64,
        p_exploit: f64,
        rng: &mut R,
    ) -> Result<(ProgramRecord, SelectionMode), SelectionError> {
        let mode = draw_mode(p_explore, p_exploit, rng);
        let id = self.select_id(db, mode, rng)?;
        Ok((db.get(id)?, mode))
    }

    /// Draws from the pool of a fixed mode.
    pub fn select_id<R: Rng + ?Sized>(
        &self,
        scores: &impl ScoreLookup,
        mode: SelectionMode,
        rng: &mut R,
    ) -> Result<RecordId, SelectionError> {
        let ranked = self.ranked(scores);
        let pool = selection_pool(&ranked, mode);
        if pool.is_empty() {
            return Err(SelectionError::EmptyIsland(self.island_id));
        }
        Ok(pool[rng.random_range(0..pool.len())].1)
    }

    /// Removes the lowest-scoring members (ties: larger id first) until the
    /// island fits `cap`. `protected` is `(record, home island)` of the global
    /// best, which is never evicted from its home island.
    pub fn evict(
        &mut self,
        scores: &impl ScoreLookup,
        cap: usize,
        protected: Option<(RecordId, u32)>,
    ) -> Vec<RecordId> {
        let mut evicted = Vec::new();
        while self.member_ids.len() > cap {
            let guard = protected.filter(|&(_, home)| home == self.island_id).map(|(id, _)| id);
            let victim = self
                .ranked(scores)
                .into_iter()
                .rev()
                .map(|(_, id)| id)
                .find(|id| Some(*id) != guard);
            match victim {
                Some(id) => {
                    self.member_ids.remove(&id);
                    evicted.push(id);
                }
                None => break,
            }
        }
        evicted
    }
}

/// Pool a mode samples from, given members ranked best first.
pub fn selection_pool(ranked: &[(f64, RecordId)], mode: SelectionMode) -> &[(f64, RecordId)] {
    let k = ranked.len();
    match mode {
        SelectionMode::Exploit => &ranked[..ceil_share(EXPLOIT_FRACTION, k)],
        SelectionMode::Explore => &ranked[k - ceil_share(EXPLORE_FRACTION, k)..],
        SelectionMode::Uniform => ranked,
    }
}

pub fn draw_mode<R: Rng + ?Sized>(p_explore: f64, p_exploit: f64, rng: &mut R) -> SelectionMode {
    let u: f64 = rng.random();
    if u < p_explore {
        SelectionMode::Explore
    } else if u < p_explore + p_exploit {
        SelectionMode::Exploit
    } else {
        SelectionMode::Uniform
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IslandParams {
    pub n_islands: u32,
    pub migration_interval: u64,
    pub migration_rate: f64,
    pub max_island_population: usize,
    pub max_total_population: usize,
    pub p_explore: f64,
    pub p_exploit: f64,
}

impl From<&RunConfig> for IslandParams {
    fn from(c: &RunConfig) -> Self {
        Self {
            n_islands: c.n_islands,
            migration_interval: c.migration_interval,
            migration_rate: c.migration_rate,
            max_island_population: c.max_island_population,
            max_total_population: c.max_total_population,
            p_explore: c.p_explore,
            p_exploit: c.p_exploit,
        }
    }
}

/// All islands of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandModel {
    pub params: IslandParams,
    pub islands: Vec<IslandState>,
}

impl IslandModel {
    /// Every island starts with the seed as its only member.
    pub fn seeded(params: IslandParams, seed: RecordId) -> Self {
        let islands = (0..params.n_islands)
            .map(|i| {
                let mut s = IslandState::new(i);
                s.member_ids.insert(seed);
                s
            })
            .collect();
        Self { params, islands }
    }

    pub fn from_membership(params: IslandParams, membership: &BTreeMap<u32, Vec<RecordId>>) -> Self {
        let islands = (0..params.n_islands)
            .map(|i| {
                let mut s = IslandState::new(i);
                if let Some(ids) = membership.get(&i) {
                    s.member_ids.extend(ids.iter().copied());
                }
                s
            })
            .collect();
        Self { params, islands }
    }

    pub fn membership(&self) -> BTreeMap<u32, Vec<RecordId>> {
        self.islands
            .iter()
            .map(|s| (s.island_id, s.member_ids.iter().copied().collect()))
            .collect()
    }

    pub fn total_members(&self) -> usize {
        self.islands.iter().map(IslandState::len).sum()
    }

    pub fn island(&self, id: u32) -> &IslandState {
        &self.islands[id as usize]
    }

    pub fn island_mut(&mut self, id: u32) -> &mut IslandState {
        &mut self.islands[id as usize]
    }

    /// Adds `id` to `island` and re-applies the caps.
    pub fn admit(
        &mut self,
        island: u32,
        id: RecordId,
        scores: &impl ScoreLookup,
        protected: Option<(RecordId, u32)>,
    ) -> Vec<RecordId> {
        self.island_mut(island).member_ids.insert(id);
        self.enforce_caps(scores, protected)
    }

    /// Per-island eviction followed by global eviction.
    pub fn enforce_caps(&mut self, scores: &impl ScoreLookup, protected: Option<(RecordId, u32)>) -> Vec<RecordId> {
        let cap = self.params.max_island_population;
        let mut evicted: Vec<RecordId> = self
            .islands
            .iter_mut()
            .flat_map(|s| s.evict(scores, cap, protected))
            .collect();
        evicted.extend(self.evict_global(scores, protected));
        evicted
    }

    /// Removes the globally lowest memberships (ties: larger id, then larger
    /// island index) until the total fits `max_total_population`.
    pub fn evict_global(&mut self, scores: &impl ScoreLookup, protected: Option<(RecordId, u32)>) -> Vec<RecordId> {
        let mut evicted = Vec::new();
        while self.total_members() > self.params.max_total_population {
            let victim = self
                .islands
                .iter()
                .flat_map(|s| {
                    s.member_ids
                        .iter()
                        .map(move |&id| (scores.score_of(id).unwrap_or(f64::NEG_INFINITY), id, s.island_id))
                })
                .filter(|&(_, id, island)| protected != Some((id, island)))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2)));
            match victim {
                Some((_, id, island)) => {
                    self.island_mut(island).member_ids.remove(&id);
                    evicted.push(id);
                }
                None => break,
            }
        }
        evicted
    }

    /// Ring migration. Fires iff `total_completed` is a positive multiple of
    /// the interval: each island's top `ceil(rate * k)` members are copied into
    /// both ring neighbours, then caps are re-applied. Copies into an island
    /// that already holds the record are skipped.
    pub fn maybe_migrate(
        &mut self,
        scores: &impl ScoreLookup,
        total_completed: u64,
        protected: Option<(RecordId, u32)>,
    ) -> Vec<MigrationEvent> {
        let interval = self.params.migration_interval;
        if total_completed == 0 || interval == 0 || !total_completed.is_multiple_of(interval) {
            return Vec::new();
        }
        let n = self.params.n_islands;
        let tops: Vec<Vec<RecordId>> = self
            .islands
            .iter()
            .map(|s| {
                let ranked = s.ranked(scores);
                let take = ceil_share(self.params.migration_rate, ranked.len());
                ranked[..take].iter().map(|&(_, id)| id).collect()
            })
            .collect();
        let mut events = Vec::new();
        for (src, top) in tops.iter().enumerate() {
            let src = src as u32;
            let mut targets = vec![(src + n - 1) % n, (src + 1) % n];
            targets.dedup();
            targets.retain(|&t| t != src);
            for &id in top {
                for &t in &targets {
                    if self.island_mut(t).member_ids.insert(id) {
                        events.push(MigrationEvent {
                            at_count: total_completed,
                            source_island: src,
                            target_island: t,
                            record_id: id,
                        });
                    }
                }
            }
        }
        self.enforce_caps(scores, protected);
        events
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn island_with(scores: &[(u64, f64)]) -> (IslandState, HashMap<RecordId, f64>) {
        let mut s = IslandState::new(0);
        let mut m = HashMap::new();
        for &(id, sc) in scores {
            s.member_ids.insert(RecordId(id));
            m.insert(RecordId(id), sc);
        }
        (s, m)
    }

    fn five() -> (IslandState, HashMap<RecordId, f64>) {
        island_with(&[(5, 2.5), (4, 2.4), (3, 2.3), (2, 2.2), (1, 2.1)])
    }

    #[test]
    fn ceil_shares() {
        assert_eq!(ceil_share(0.2, 5), 1);
        assert_eq!(ceil_share(0.8, 5), 4);
        assert_eq!(ceil_share(0.2, 2), 1);
        assert_eq!(ceil_share(0.8, 2), 2);
        assert_eq!(ceil_share(0.1, 5), 1);
        assert_eq!(ceil_share(0.1, 30), 3);
        assert_eq!(ceil_share(0.5, 1), 1);
        assert_eq!(ceil_share(0.5, 0), 0);
    }

    #[test]
    fn singleton_always_selected() {
        let (s, m) = island_with(&[(7, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [SelectionMode::Explore, SelectionMode::Exploit, SelectionMode::Uniform] {
            assert_eq!(s.select_id(&m, mode, &mut rng).unwrap(), RecordId(7));
        }
    }

    #[test]
    fn exploit_pool_by_enumeration() {
        let (s, m) = five();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts: HashMap<RecordId, u32> = HashMap::new();
        for _ in 0..10_000 {
            *counts.entry(s.select_id(&m, SelectionMode::Exploit, &mut rng).unwrap()).or_default() += 1;
        }
        assert_eq!(counts.len(), 1);
        assert_eq!(counts[&RecordId(5)], 10_000);
    }

    #[test]
    fn explore_pool_is_bottom_four() {
        let (s, m) = five();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts: HashMap<RecordId, u32> = HashMap::new();
        for _ in 0..10_000 {
            *counts.entry(s.select_id(&m, SelectionMode::Explore, &mut rng).unwrap()).or_default() += 1;
        }
        let mut ids: Vec<_> = counts.keys().map(|r| r.0).collect();
        ids.sort();
        assert_eq!(ids, [1, 2, 3, 4]);
        for c in counts.values() {
            assert!((*c as f64 / 10_000.0 - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn ties_rank_smaller_id_first() {
        let (s, m) = island_with(&[(9, 1.0), (3, 1.0), (4, 0.5)]);
        let ids: Vec<_> = s.ranked(&m).iter().map(|x| x.1 .0).collect();
        assert_eq!(ids, [3, 9, 4]);
    }

    #[test]
    fn empty_island_errors() {
        let s = IslandState::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: HashMap<RecordId, f64> = HashMap::new();
        assert!(matches!(
            s.select_id(&m, SelectionMode::Uniform, &mut rng),
            Err(SelectionError::EmptyIsland(3))
        ));
    }

    #[test]
    fn remainder_goes_to_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let uniform = (0..n)
            .filter(|_| draw_mode(0.2, 0.5, &mut rng) == SelectionMode::Uniform)
            .count();
        assert!((uniform as f64 / n as f64 - 0.3).abs() < 0.02);
    }

    #[test]
    fn evict_lowest() {
        let (mut s, m) = island_with(&[(1, 1.0), (2, 2.0), (3, 3.0), (4, 4.0), (5, 5.0), (6, 0.5)]);
        assert_eq!(s.evict(&m, 5, None), vec![RecordId(6)]);
        assert!(s.evict(&m, 5, None).is_empty());
    }

    #[test]
    fn evict_ties_larger_id_first() {
        let (mut s, m) = island_with(&[(1, 1.0), (2, 1.0), (3, 1.0)]);
        assert_eq!(s.evict(&m, 2, None), vec![RecordId(3)]);
    }

    #[test]
    fn evict_spares_global_best_in_home_island() {
        let (mut s, m) = island_with(&[(1, 1.0), (2, 2.0), (3, 3.0), (4, 4.0), (5, 5.0), (6, 0.5)]);
        let evicted = s.evict(&m, 5, Some((RecordId(6), 0)));
        assert_eq!(evicted, vec![RecordId(1)]);
        assert!(s.member_ids.contains(&RecordId(6)));
        // Elsewhere the protection does not apply.
        let (mut other, m2) = island_with(&[(1, 1.0), (2, 2.0), (6, 0.5)]);
        other.island_id = 1;
        assert_eq!(other.evict(&m2, 2, Some((RecordId(6), 0))), vec![RecordId(6)]);
    }

    fn params(n: u32) -> IslandParams {
        IslandParams::from(&RunConfig {
            n_islands: n,
            ..RunConfig::default()
        })
    }

    fn five_by_five() -> (IslandModel, HashMap<RecordId, f64>) {
        let mut model = IslandModel::seeded(params(5), RecordId(1));
        let mut scores = HashMap::new();
        scores.insert(RecordId(1), 0.1);
        model.islands.iter_mut().for_each(|s| s.member_ids.clear());
        let mut id = 2;
        for island in 0..5u32 {
            for j in 0..5 {
                scores.insert(RecordId(id), 1.0 + island as f64 + j as f64 * 0.1);
                model.island_mut(island).member_ids.insert(RecordId(id));
                id += 1;
            }
        }
        (model, scores)
    }

    #[test]
    fn migration_waits_for_interval() {
        let (mut model, scores) = five_by_five();
        assert!(model.maybe_migrate(&scores, 0, None).is_empty());
        assert!(model.maybe_migrate(&scores, 49, None).is_empty());
    }

    #[test]
    fn migration_copies_top_member_to_both_neighbours() {
        let (mut model, scores) = five_by_five();
        let before = model.clone();
        let events = model.maybe_migrate(&scores, 50, None);
        assert_eq!(events.len(), 10);
        for src in 0..5u32 {
            let top = before.island(src).ranked(&scores)[0].1;
            let mut targets: Vec<u32> = events
                .iter()
                .filter(|e| e.source_island == src)
                .map(|e| {
                    assert_eq!(e.record_id, top);
                    e.target_island
                })
                .collect();
            targets.sort();
            let mut expect = vec![(src + 4) % 5, (src + 1) % 5];
            expect.sort();
            assert_eq!(targets, expect);
        }
        for s in &model.islands {
            assert!(s.len() <= 5);
        }
        assert!(model.total_members() <= 25);
    }

    #[test]
    fn single_island_ring_is_noop() {
        let mut model = IslandModel::seeded(params(1), RecordId(1));
        let scores: HashMap<_, _> = [(RecordId(1), 1.0)].into_iter().collect();
        let before = model.clone();
        assert!(model.maybe_migrate(&scores, 50, None).is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn global_cap_enforced() {
        let mut p = params(3);
        p.max_total_population = 4;
        let mut model = IslandModel::seeded(p, RecordId(1));
        let mut scores: HashMap<_, _> = [(RecordId(1), 1.0)].into_iter().collect();
        for (i, id) in [(0u32, 2u64), (1, 3), (2, 4)] {
            scores.insert(RecordId(id), id as f64);
            model.admit(i, RecordId(id), &scores, Some((RecordId(4), 2)));
        }
        assert_eq!(model.total_members(), 4);
        assert!(model.island(2).member_ids.contains(&RecordId(4)));
    }
}
