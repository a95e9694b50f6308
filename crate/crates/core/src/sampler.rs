//! Frequency-capped entity-set sampling.
//!
//! Each record draws `k` entities uniformly from the union of the four
//! non-anatomy categories and `m` from ANATOMY. A draw that lands on an
//! entity already at the cap (or already in the set) is redrawn while the
//! rest of the set is kept, so draws are uniform without replacement over
//! the eligible pool. Counts only move when a finished record is committed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::EntityCatalog;
use crate::entity::{Category, Entity, EntityId};
use crate::rng::{derive_seed, tag};

/// Uniform draws attempted before falling back to enumerating the eligible pool.
const REJECTION_BUDGET: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Non-anatomy entities per set.
    pub k: usize,
    /// Anatomy entities per set.
    pub m: usize,
    pub tau_max: u32,
    /// Fraction of each category that is eligible at all.
    pub entity_ratio: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k: 9,
            m: 3,
            tau_max: 15,
            entity_ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplerConfigError {
    #[error("k + m must be at least 1")]
    EmptySet,
    #[error("tau_max must be at least 1")]
    ZeroCap,
    #[error("entity_ratio must be in (0, 1], got {0}")]
    BadRatio(f64),
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerConfigError> {
        if self.k + self.m == 0 {
            return Err(SamplerConfigError::EmptySet);
        }
        if self.tau_max == 0 {
            return Err(SamplerConfigError::ZeroCap);
        }
        if !(self.entity_ratio > 0.0 && self.entity_ratio <= 1.0) {
            return Err(SamplerConfigError::BadRatio(self.entity_ratio));
        }
        Ok(())
    }
}

/// The two sampling pools an entity set draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pool {
    #[serde(rename = "NON-ANATOMY")]
    NonAnatomy,
    #[serde(rename = "ANATOMY")]
    Anatomy,
}

impl Pool {
    pub fn of(category: Category) -> Pool {
        if category.is_anatomy() {
            Pool::Anatomy
        } else {
            Pool::NonAnatomy
        }
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pool::NonAnatomy => f.write_str("NON-ANATOMY"),
            Pool::Anatomy => f.write_str("ANATOMY"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SampleError {
    #[error("capacity exhausted in {0} pool")]
    CapacityExhausted(Pool),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommitError {
    #[error("{} entities already at the frequency cap", .0.len())]
    CapViolation(Vec<EntityId>),
}

/// Accepted-use counts per entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyLedger {
    counts: HashMap<EntityId, u32>,
    total_committed: u64,
    records: u64,
    tau_max: u32,
}

impl FrequencyLedger {
    pub fn new(tau_max: u32) -> Self {
        FrequencyLedger {
            counts: HashMap::new(),
            total_committed: 0,
            records: 0,
            tau_max,
        }
    }

    /// Rebuilds a ledger from persisted counts. Returns `None` if a count exceeds the cap.
    pub fn from_counts(tau_max: u32, records: u64, counts: impl IntoIterator<Item = (EntityId, u32)>) -> Option<Self> {
        let mut ledger = FrequencyLedger::new(tau_max);
        ledger.records = records;
        for (id, c) in counts {
            if c > tau_max {
                return None;
            }
            if c > 0 {
                ledger.total_committed += c as u64;
                ledger.counts.insert(id, c);
            }
        }
        Some(ledger)
    }

    pub fn count(&self, id: EntityId) -> u32 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn tau_max(&self) -> u32 {
        self.tau_max
    }

    /// Raises the cap; used only by explicit operator relaxation.
    pub fn relax_cap(&mut self, tau_max: u32) {
        assert!(tau_max >= self.tau_max, "cap can only be raised");
        self.tau_max = tau_max;
    }

    pub fn is_eligible(&self, id: EntityId) -> bool {
        self.count(id) < self.tau_max
    }

    pub fn total_committed(&self) -> u64 {
        self.total_committed
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn max_count(&self) -> u32 {
        self.counts.values().copied().max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntityId, u32)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    /// Stable-ordered copy of the nonzero counts.
    pub fn to_sorted(&self) -> BTreeMap<EntityId, u32> {
        self.counts.iter().map(|(k, v)| (*k, *v)).collect()
    }

    /// Increments every member by one, or changes nothing if any member is capped.
    pub fn commit(&mut self, set: &EntitySet) -> Result<(), CommitError> {
        self.commit_ids(&set.ids().collect::<Vec<_>>())
    }

    /// Members that would break the cap if committed now.
    pub fn capped_members(&self, ids: &[EntityId]) -> Vec<EntityId> {
        ids.iter().copied().filter(|id| !self.is_eligible(*id)).collect()
    }

    pub fn commit_ids(&mut self, ids: &[EntityId]) -> Result<(), CommitError> {
        let capped = self.capped_members(ids);
        if !capped.is_empty() {
            return Err(CommitError::CapViolation(capped));
        }
        for id in ids {
            *self.counts.entry(*id).or_insert(0) += 1;
        }
        self.total_committed += ids.len() as u64;
        self.records += 1;
        Ok(())
    }
}

/// One record's sampled entities: `s1` from the non-anatomy pool, `s2` from ANATOMY.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub s1: Vec<Entity>,
    pub s2: Vec<Entity>,
}

impl EntitySet {
    pub fn len(&self) -> usize {
        self.s1.len() + self.s2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entity> {
        self.s1.iter().chain(self.s2.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.iter().map(|e| e.id)
    }

    pub fn id_set(&self) -> HashSet<EntityId> {
        self.ids().collect()
    }

    pub fn has_duplicates(&self) -> bool {
        self.id_set().len() != self.len()
    }
}

/// Sampling pools for a catalog under a config. Immutable and shareable.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    cfg: SamplerConfig,
    non_anatomy: Vec<Entity>,
    anatomy: Vec<Entity>,
}

impl BalancedSampler {
    pub fn new(catalog: &EntityCatalog, cfg: SamplerConfig) -> Result<Self, SamplerConfigError> {
        cfg.validate()?;
        let mut non_anatomy = Vec::new();
        let mut anatomy = Vec::new();
        for category in Category::ALL {
            let chosen = eligible_subset(catalog, category, cfg.entity_ratio, cfg.seed);
            let target = if category.is_anatomy() {
                &mut anatomy
            } else {
                &mut non_anatomy
            };
            target.extend(
                catalog
                    .ids_in(category)
                    .iter()
                    .filter(|id| chosen.contains(id))
                    .map(|id| catalog.get(*id).expect("indexed id resolves").clone()),
            );
        }
        Ok(BalancedSampler {
            cfg,
            non_anatomy,
            anatomy,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn pool(&self, pool: Pool) -> &[Entity] {
        match pool {
            Pool::NonAnatomy => &self.non_anatomy,
            Pool::Anatomy => &self.anatomy,
        }
    }

    /// Draws a fresh set. The ledger is only read.
    pub fn sample<R: Rng + ?Sized>(&self, ledger: &FrequencyLedger, rng: &mut R) -> Result<EntitySet, SampleError> {
        let mut taken = HashSet::new();
        let s1 = self.draw(Pool::NonAnatomy, self.cfg.k, ledger, &mut taken, rng)?;
        let s2 = self.draw(Pool::Anatomy, self.cfg.m, ledger, &mut taken, rng)?;
        Ok(EntitySet { s1, s2 })
    }

    /// Replaces only the `offending` members of `set`, keeping the others in place.
    pub fn resample_members<R: Rng + ?Sized>(
        &self,
        set: &EntitySet,
        offending: &[EntityId],
        ledger: &FrequencyLedger,
        rng: &mut R,
    ) -> Result<EntitySet, SampleError> {
        let bad: HashSet<EntityId> = offending.iter().copied().collect();
        let mut taken: HashSet<EntityId> = set.ids().filter(|id| !bad.contains(id)).collect();
        let mut out = set.clone();
        for (pool, members) in [(Pool::NonAnatomy, &mut out.s1), (Pool::Anatomy, &mut out.s2)] {
            for slot in members.iter_mut() {
                if bad.contains(&slot.id) {
                    let mut fresh = self.draw(pool, 1, ledger, &mut taken, rng)?;
                    *slot = fresh.pop().expect("one draw requested");
                }
            }
        }
        Ok(out)
    }

    fn draw<R: Rng + ?Sized>(
        &self,
        pool: Pool,
        want: usize,
        ledger: &FrequencyLedger,
        taken: &mut HashSet<EntityId>,
        rng: &mut R,
    ) -> Result<Vec<Entity>, SampleError> {
        let members = self.pool(pool);
        let mut out = Vec::with_capacity(want);
        if want == 0 {
            return Ok(out);
        }
        if members.is_empty() {
            return Err(SampleError::CapacityExhausted(pool));
        }
        let usable = |e: &Entity, taken: &HashSet<EntityId>| ledger.is_eligible(e.id) && !taken.contains(&e.id);
        while out.len() < want {
            let mut hit = None;
            for _ in 0..REJECTION_BUDGET {
                let candidate = &members[rng.gen_range(0..members.len())];
                if usable(candidate, taken) {
                    hit = Some(candidate);
                    break;
                }
            }
            let chosen = match hit {
                Some(e) => e,
                None => {
                    let open: Vec<&Entity> = members.iter().filter(|e| usable(e, taken)).collect();
                    if open.len() < want - out.len() {
                        return Err(SampleError::CapacityExhausted(pool));
                    }
                    open[rng.gen_range(0..open.len())]
                }
            };
            taken.insert(chosen.id);
            out.push(chosen.clone());
        }
        Ok(out)
    }

    /// Pre-flight demand versus capacity per pool.
    pub fn capacity_report(&self, ledger: &FrequencyLedger, n_target: u64) -> CapacityReport {
        let tau = ledger.tau_max() as u64;
        let pools = [(Pool::NonAnatomy, self.cfg.k), (Pool::Anatomy, self.cfg.m)]
            .into_iter()
            .map(|(pool, per_record)| {
                let members = self.pool(pool);
                let eligible = members.len() as u64;
                let committed: u64 = members.iter().map(|e| ledger.count(e.id) as u64).sum();
                let demand = n_target * per_record as u64;
                let capacity = eligible * tau;
                PoolCapacity {
                    pool,
                    eligible_entities: eligible,
                    per_record: per_record as u64,
                    demand,
                    capacity,
                    committed,
                    feasible: demand <= capacity,
                    slack: capacity as i64 - demand as i64,
                }
            })
            .collect::<Vec<_>>();
        CapacityReport {
            n_target,
            tau_max: ledger.tau_max(),
            feasible: pools.iter().all(|p| p.feasible),
            pools,
        }
    }
}

/// Deterministic `entity_ratio` subset of one category, chosen by seeded hash rank.
fn eligible_subset(catalog: &EntityCatalog, category: Category, ratio: f64, seed: u64) -> HashSet<EntityId> {
    let ids = catalog.ids_in(category);
    if ratio >= 1.0 {
        return ids.iter().copied().collect();
    }
    let keep = ((ids.len() as f64 * ratio).round() as usize).clamp(usize::from(!ids.is_empty()), ids.len());
    let mut ranked: Vec<(u64, EntityId)> = ids
        .iter()
        .map(|id| (derive_seed(seed, &[tag::SUBSET, id.0]), *id))
        .collect();
    ranked.sort_unstable();
    ranked.into_iter().take(keep).map(|(_, id)| id).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCapacity {
    pub pool: Pool,
    pub eligible_entities: u64,
    pub per_record: u64,
    pub demand: u64,
    pub capacity: u64,
    /// Uses already recorded in the ledger for this pool.
    pub committed: u64,
    pub feasible: bool,
    pub slack: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub n_target: u64,
    pub tau_max: u32,
    pub feasible: bool,
    pub pools: Vec<PoolCapacity>,
}

impl CapacityReport {
    pub fn pool(&self, pool: Pool) -> &PoolCapacity {
        self.pools.iter().find(|p| p.pool == pool).expect("both pools reported")
    }
}

impl fmt::Display for CapacityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "capacity for {} records (tau_max {}):", self.n_target, self.tau_max)?;
        for p in &self.pools {
            writeln!(
                f,
                "  {:<12} entities {:>8}  demand {:>10}  capacity {:>10}  slack {:>10}  {}",
                p.pool.to_string(),
                p.eligible_entities,
                p.demand,
                p.capacity,
                p.slack,
                if p.feasible { "ok" } else { "INFEASIBLE" }
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn catalog(non_anatomy: usize, anatomy: usize) -> EntityCatalog {
        let mut entities = Vec::new();
        for i in 0..non_anatomy {
            let c = Category::NON_ANATOMY[i % 4];
            entities.push(Entity::new(&format!("finding {i}"), c).unwrap());
        }
        for i in 0..anatomy {
            entities.push(Entity::new(&format!("region {i}"), Category::Anatomy).unwrap());
        }
        EntityCatalog::from_entities(entities).unwrap().0
    }

    fn cfg(k: usize, m: usize, tau_max: u32) -> SamplerConfig {
        SamplerConfig {
            k,
            m,
            tau_max,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn default_set_shape() {
        let sampler = BalancedSampler::new(&catalog(400, 100), SamplerConfig::default()).unwrap();
        let set = sampler.sample(&FrequencyLedger::new(15), &mut stream(1, &[])).unwrap();
        assert_eq!(set.s1.len(), 9);
        assert_eq!(set.s2.len(), 3);
        assert!(!set.has_duplicates());
        assert!(set.s1.iter().all(|e| !e.category.is_anatomy()));
        assert!(set.s2.iter().all(|e| e.category.is_anatomy()));
    }

    #[test]
    fn forced_choice() {
        let cat = catalog(0, 1);
        let sampler = BalancedSampler::new(&cat, cfg(0, 1, 15)).unwrap();
        let set = sampler.sample(&FrequencyLedger::new(15), &mut stream(1, &[])).unwrap();
        assert!(set.s1.is_empty());
        assert_eq!(set.s2[0].id, cat.ids_in(Category::Anatomy)[0]);
    }

    #[test]
    fn exhaustion_after_commit() {
        let sampler = BalancedSampler::new(&catalog(0, 3), cfg(0, 3, 1)).unwrap();
        let mut ledger = FrequencyLedger::new(1);
        let mut rng = stream(3, &[]);
        let set = sampler.sample(&ledger, &mut rng).unwrap();
        ledger.commit(&set).unwrap();
        assert_eq!(
            sampler.sample(&ledger, &mut rng),
            Err(SampleError::CapacityExhausted(Pool::Anatomy))
        );
    }

    #[test]
    fn commit_reaching_cap_makes_ineligible() {
        let cat = catalog(0, 2);
        let target = cat.entities()[0].clone();
        let mut ledger = FrequencyLedger::from_counts(15, 14, [(target.id, 14)]).unwrap();
        let single = EntitySet {
            s1: vec![],
            s2: vec![target.clone()],
        };
        ledger.commit(&single).unwrap();
        assert_eq!(ledger.count(target.id), 15);
        let sampler = BalancedSampler::new(&cat, cfg(0, 1, 15)).unwrap();
        let mut rng = stream(5, &[]);
        for _ in 0..200 {
            let set = sampler.sample(&ledger, &mut rng).unwrap();
            assert_ne!(set.s2[0].id, target.id);
        }
        assert_eq!(ledger.commit(&single), Err(CommitError::CapViolation(vec![target.id])));
        assert_eq!(ledger.count(target.id), 15);
    }

    #[test]
    fn zero_size_config_rejected() {
        assert_eq!(cfg(0, 0, 15).validate(), Err(SamplerConfigError::EmptySet));
        assert_eq!(cfg(1, 0, 0).validate(), Err(SamplerConfigError::ZeroCap));
        let bad = SamplerConfig {
            entity_ratio: 0.0,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn disjoint_commits_accumulate() {
        let cat = catalog(120, 0);
        let mut ledger = FrequencyLedger::new(15);
        for chunk in cat.entities().chunks(12) {
            let set = EntitySet {
                s1: chunk.to_vec(),
                s2: vec![],
            };
            ledger.commit(&set).unwrap();
        }
        assert_eq!(ledger.total_committed(), 120);
        assert_eq!(ledger.records(), 10);
    }

    #[test]
    fn capacity_arithmetic() {
        let sampler = BalancedSampler::new(&catalog(40, 10), cfg(9, 3, 15)).unwrap();
        let ledger = FrequencyLedger::new(15);
        let report = sampler.capacity_report(&ledger, 51);
        let anat = report.pool(Pool::Anatomy);
        assert_eq!((anat.demand, anat.capacity), (153, 150));
        assert!(!anat.feasible);
        assert!(!report.feasible);

        let empty = sampler.capacity_report(&ledger, 0);
        assert!(empty.feasible);
        for p in &empty.pools {
            assert_eq!(p.slack, p.capacity as i64);
        }
    }

    #[test]
    fn resample_keeps_other_members() {
        let sampler = BalancedSampler::new(&catalog(50, 10), cfg(5, 2, 15)).unwrap();
        let ledger = FrequencyLedger::new(15);
        let mut rng = stream(9, &[]);
        let set = sampler.sample(&ledger, &mut rng).unwrap();
        let victim = set.s1[2].id;
        let capped = FrequencyLedger::from_counts(15, 0, [(victim, 15)]).unwrap();
        let fixed = sampler.resample_members(&set, &[victim], &capped, &mut rng).unwrap();
        assert_ne!(fixed.s1[2].id, victim);
        for i in [0, 1, 3, 4] {
            assert_eq!(fixed.s1[i], set.s1[i]);
        }
        assert_eq!(fixed.s2, set.s2);
        assert!(!fixed.has_duplicates());
    }

    #[test]
    fn ratio_subset_size() {
        let cat = catalog(400, 100);
        for ratio in [0.25, 0.5, 0.75] {
            let sampler = BalancedSampler::new(
                &cat,
                SamplerConfig {
                    entity_ratio: ratio,
                    ..SamplerConfig::default()
                },
            )
            .unwrap();
            assert_eq!(sampler.pool(Pool::Anatomy).len(), (100.0 * ratio) as usize);
            assert_eq!(sampler.pool(Pool::NonAnatomy).len(), (400.0 * ratio) as usize);
        }
    }

    #[test]
    fn no_entity_starved_at_ninety_percent_consumption() {
        // 40 anatomy entities, m = 3, cap 15: 180 records use 540 of 600 slots.
        let cat = catalog(400, 40);
        let sampler = BalancedSampler::new(&cat, cfg(9, 3, 15)).unwrap();
        for seed in 0..5 {
            let mut ledger = FrequencyLedger::new(15);
            let mut rng = stream(seed, &[]);
            for _ in 0..180 {
                let set = sampler.sample(&ledger, &mut rng).unwrap();
                ledger.commit(&set).unwrap();
            }
            for id in cat.ids_in(Category::Anatomy) {
                assert!(ledger.count(*id) >= 1, "seed {seed}: anatomy entity never drawn");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn sampled_sets_never_breach_the_cap(
            seed in 0u64..1000,
            k in 1usize..6,
            m in 1usize..4,
            tau in 1u32..5,
            records in 1usize..40,
        ) {
            let sampler = BalancedSampler::new(&catalog(30, 12), cfg(k, m, tau)).unwrap();
            let mut ledger = FrequencyLedger::new(tau);
            let mut rng = stream(seed, &[]);
            for _ in 0..records {
                match sampler.sample(&ledger, &mut rng) {
                    Ok(set) => {
                        proptest::prop_assert!(!set.has_duplicates());
                        proptest::prop_assert_eq!(set.s1.len(), k);
                        proptest::prop_assert_eq!(set.s2.len(), m);
                        ledger.commit(&set).unwrap();
                    }
                    Err(SampleError::CapacityExhausted(_)) => break,
                }
            }
            proptest::prop_assert!(ledger.max_count() <= tau);
        }
    }
}
