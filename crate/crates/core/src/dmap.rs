//! Global-view distributed map.
//!
//! A [`DistributedMap`] is a small value-like record: the privatization id of
//! its per-locale instances plus the constants needed to route a key. Every
//! operation hashes the key to a root slot, finds the slot's owning locale and
//! runs the node-local routine there as an RPC.

use std::fmt;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::Aggregator;
use crate::config::{ConfigError, Execution, MapConfig};
use crate::ebr::{EpochManager, EpochStats, Token};
use crate::runtime::{here_in, BlockDistribution, Cluster, ClusterId, LocaleId, Pid};
use crate::table::{hash_key, LocaleTable, MapKey, MapValue, TableCensus};

#[derive(Default)]
pub(crate) struct InstanceCounters {
    /// Node-local routine executions on this locale, from any source.
    pub(crate) executed: AtomicU64,
    /// Async operations issued here whose key this locale owns.
    pub(crate) immediate: AtomicU64,
    /// Locked lists set aside by iterations on this locale.
    pub(crate) deferrals: AtomicU64,
}

/// The per-locale part of a map.
pub(crate) struct MapInstance<K, V> {
    cluster: ClusterId,
    pub(crate) locale: LocaleId,
    pub(crate) table: LocaleTable<K, V>,
    pub(crate) manager: EpochManager,
    pub(crate) aggregator: Aggregator<K, V>,
    pub(crate) iter_rng: Mutex<ChaCha8Rng>,
    pub(crate) counters: InstanceCounters,
    pub(crate) execution: Execution,
}

impl<K: MapKey, V: MapValue> MapInstance<K, V> {
    fn new(
        cluster: ClusterId,
        locale: LocaleId,
        dist: BlockDistribution,
        config: &MapConfig,
        manager: EpochManager,
    ) -> Self {
        MapInstance {
            cluster,
            locale,
            table: LocaleTable::new(locale, dist, config.clone()),
            manager,
            aggregator: Aggregator::new(dist.num_locales(), config.buffer_size),
            iter_rng: Mutex::new(ChaCha8Rng::seed_from_u64(
                config.iter_seed.wrapping_add(locale as u64),
            )),
            counters: InstanceCounters::default(),
            execution: config.execution,
        }
    }

    fn assert_placement(&self) {
        assert_eq!(
            here_in(self.cluster),
            self.locale,
            "node-local routine ran outside its locale"
        );
    }

    pub(crate) fn insert_local(&self, key: K, value: V, tok: &Token) {
        self.assert_placement();
        self.counters.executed.fetch_add(1, Ordering::Relaxed);
        self.table.insert_local(key, value, tok)
    }

    pub(crate) fn find_local(&self, key: &K, tok: &Token) -> Option<V> {
        self.assert_placement();
        self.counters.executed.fetch_add(1, Ordering::Relaxed);
        self.table.find_local(key, tok)
    }

    pub(crate) fn erase_local(&self, key: &K, tok: &Token) {
        self.assert_placement();
        self.counters.executed.fetch_add(1, Ordering::Relaxed);
        self.table.erase_local(key, tok)
    }

    pub(crate) fn token(&self) -> Token {
        self.manager.get_token(self.locale)
    }
}

/// Per-locale operation counters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MapStats {
    /// Node-local routine executions per locale.
    pub executed: Vec<u64>,
    /// Async operations per issuing locale that ran immediately because the
    /// key was local.
    pub immediate: Vec<u64>,
}

impl MapStats {
    pub fn total_executed(&self) -> u64 {
        self.executed.iter().sum()
    }

    pub fn total_immediate(&self) -> u64 {
        self.immediate.iter().sum()
    }
}

/// Handle to a distributed map. Clones address the same map from any locale.
pub struct DistributedMap<K, V> {
    cluster: Cluster,
    pid: Pid,
    config: Arc<MapConfig>,
    dist: BlockDistribution,
    _marker: PhantomData<fn() -> (K, V)>,
}

impl<K, V> Clone for DistributedMap<K, V> {
    fn clone(&self) -> Self {
        DistributedMap {
            cluster: self.cluster.clone(),
            pid: self.pid,
            config: Arc::clone(&self.config),
            dist: self.dist,
            _marker: PhantomData,
        }
    }
}

impl<K, V> fmt::Debug for DistributedMap<K, V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DistributedMap")
            .field("pid", &self.pid)
            .field("locales", &self.dist.num_locales())
            .field("root_slots", &self.dist.total_slots())
            .finish()
    }
}

impl<K: MapKey, V: MapValue> DistributedMap<K, V> {
    pub fn new(cluster: &Cluster, config: MapConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let dist = BlockDistribution::new(cluster.num_locales(), config.root_buckets_per_locale);
        let manager = EpochManager::with_advance_interval(cluster.num_locales(), config.reclaim_interval);
        let id = cluster.id();
        let pid = cluster.privatize(|locale| MapInstance::<K, V>::new(id, locale, dist, &config, manager.clone()));
        Ok(DistributedMap {
            cluster: cluster.clone(),
            pid,
            config: Arc::new(config),
            dist,
            _marker: PhantomData,
        })
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn pid(&self) -> Pid {
        self.pid
    }

    pub fn distribution(&self) -> BlockDistribution {
        self.dist
    }

    pub(crate) fn instance(&self, locale: LocaleId) -> Arc<MapInstance<K, V>> {
        self.cluster
            .privatized(self.pid, locale)
            .expect("map instance missing on locale")
    }

    /// Root slot of `key` in the block-distributed root.
    pub fn get_idx(&self, key: &K) -> usize {
        (hash_key(key, self.config.root_seed) % self.dist.total_slots() as u64) as usize
    }

    /// Locale that stores `key`.
    pub fn owner_of(&self, key: &K) -> LocaleId {
        self.dist.locale_of(self.get_idx(key))
    }

    /// Registers a fresh, unpinned token on the caller's locale.
    pub fn get_token(&self) -> Token {
        let here = self.cluster.here();
        self.instance(here).manager.get_token(here)
    }

    pub fn epoch_manager(&self) -> EpochManager {
        self.instance(0).manager.clone()
    }

    pub fn epoch_stats(&self) -> EpochStats {
        self.epoch_manager().stats()
    }

    /// Maps `key` to `value` on the owning locale.
    pub fn insert(&self, key: K, value: V, tok: &Token) {
        let _pin = tok.pin_guard();
        let owner = self.owner_of(&key);
        self.cluster.on(owner, || self.instance(owner).insert_local(key, value, tok));
    }

    pub fn find(&self, key: &K, tok: &Token) -> Option<V> {
        let _pin = tok.pin_guard();
        let owner = self.owner_of(key);
        self.cluster.on(owner, || self.instance(owner).find_local(key, tok))
    }

    pub fn erase(&self, key: &K, tok: &Token) {
        let _pin = tok.pin_guard();
        let owner = self.owner_of(key);
        self.cluster.on(owner, || self.instance(owner).erase_local(key, tok));
    }

    /// Structural census summed over all locales. Exact only when quiescent.
    pub fn census(&self) -> TableCensus {
        let mut total = TableCensus::default();
        for locale in 0..self.dist.num_locales() {
            let c = self.cluster.on(locale, || {
                let inst = self.instance(locale);
                let tok = inst.token();
                inst.table.census(&tok)
            });
            total.merge(&c);
        }
        total
    }

    /// Number of stored pairs. Exact only when quiescent.
    pub fn len(&self) -> usize {
        self.census().elements
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every stored pair, gathered locale by locale. Not a consistent snapshot
    /// under concurrent mutation.
    pub fn entries(&self) -> Vec<(K, V)> {
        let mut out = Vec::new();
        for locale in 0..self.dist.num_locales() {
            out.extend(self.cluster.on(locale, || {
                let inst = self.instance(locale);
                let tok = inst.token();
                inst.table.entries(&tok)
            }));
        }
        out
    }

    pub fn stats(&self) -> MapStats {
        let mut stats = MapStats::default();
        for locale in 0..self.dist.num_locales() {
            let inst = self.instance(locale);
            stats.executed.push(inst.counters.executed.load(Ordering::Relaxed));
            stats.immediate.push(inst.counters.immediate.load(Ordering::Relaxed));
        }
        stats
    }
}
