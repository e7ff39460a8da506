//! Operation and iteration microbenchmarks, plus the workload recorder used
//! by the correctness checks.

pub mod oracle;
pub mod report;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::MapAction;
use crate::config::{ConfigError, MapConfig};
use crate::dmap::DistributedMap;
use crate::runtime::{Cluster, LocaleId, RuntimeError};
use crate::table::hash_key;

pub use oracle::{check_history, check_history_from, oracle_replay, HistoryVerdict, Mismatch, TimedOp, TraceOp, Verdict};
pub use report::{BenchReport, OutputFormat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OpsSync,
    OpsAsync,
    IterSerial,
    IterParallel,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::OpsSync, Mode::OpsAsync, Mode::IterSerial, Mode::IterParallel];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::OpsSync => "ops-sync",
            Mode::OpsAsync => "ops-async",
            Mode::IterSerial => "iter-serial",
            Mode::IterParallel => "iter-parallel",
        }
    }

    pub fn is_iteration(self) -> bool {
        matches!(self, Mode::IterSerial | Mode::IterParallel)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected ops-sync, ops-async, iter-serial or iter-parallel)"))
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Map(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// Key spaces above this many bits are accepted but need gigabytes of memory.
pub const LARGE_KEY_BITS: u32 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub locales: usize,
    pub tasks: usize,
    pub total_ops: u64,
    pub read_ratio: f64,
    pub insert_ratio: f64,
    pub erase_ratio: f64,
    pub key_bits: u32,
    pub map: MapConfig,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            locales: 4,
            tasks: 4,
            total_ops: 1_000_000,
            read_ratio: 0.8,
            insert_ratio: 0.1,
            erase_ratio: 0.1,
            key_bits: 16,
            map: MapConfig::default(),
            seed: 42,
            mode: Mode::OpsAsync,
        }
    }
}

impl BenchConfig {
    pub fn key_range(&self) -> u64 {
        1u64 << self.key_bits
    }

    pub fn is_large(&self) -> bool {
        self.key_bits > LARGE_KEY_BITS
    }

    /// Splits the non-read share evenly between inserts and erases.
    pub fn with_read_ratio(mut self, read: f64) -> Self {
        self.read_ratio = read;
        self.insert_ratio = (1.0 - read) / 2.0;
        self.erase_ratio = (1.0 - read) / 2.0;
        self
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.locales == 0 || self.tasks == 0 {
            return bad("locales and tasks must be positive".into());
        }
        for (name, r) in [
            ("read ratio", self.read_ratio),
            ("insert ratio", self.insert_ratio),
            ("erase ratio", self.erase_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} is outside [0, 1]"));
            }
        }
        let sum = self.read_ratio + self.insert_ratio + self.erase_ratio;
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("ratios sum to {sum}, not 1"));
        }
        if !(1..=32).contains(&self.key_bits) {
            return bad(format!("key bits {} is outside 1..=32", self.key_bits));
        }
        self.map.validate()?;
        Ok(())
    }

    /// Operations assigned to worker `w` of `workers`; the remainder goes to
    /// the lowest-numbered workers so the total is exact.
    pub fn ops_for_worker(&self, w: usize) -> u64 {
        let workers = (self.locales * self.tasks) as u64;
        let w = w as u64;
        self.total_ops / workers + u64::from(w < self.total_ops % workers)
    }
}

/// Deterministic operation stream of one (locale, task) pair.
pub struct WorkloadGen {
    rng: ChaCha8Rng,
    insert: f64,
    erase: f64,
    key_range: u64,
    tag: u64,
    seq: u64,
}

impl WorkloadGen {
    pub fn new(cfg: &BenchConfig, locale: LocaleId, task: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let worker = (locale * cfg.tasks + task) as u64;
        rng.set_stream(worker);
        WorkloadGen {
            rng,
            insert: cfg.insert_ratio,
            erase: cfg.erase_ratio,
            key_range: cfg.key_range(),
            tag: worker << 40,
            seq: 0,
        }
    }

    /// Next operation. Inserts carry a value unique across all workers.
    pub fn next_op(&mut self) -> (MapAction, u64, u64) {
        let s: f64 = self.rng.gen();
        let key = self.rng.gen_range(0..self.key_range);
        self.seq += 1;
        let action = if s < self.insert {
            MapAction::Insert
        } else if s < self.insert + self.erase {
            MapAction::Erase
        } else {
            MapAction::Find
        };
        (action, key, self.tag | self.seq)
    }
}

struct Snapshot {
    remote: u64,
    executed: Vec<u64>,
    retired: u64,
    reclaimed: u64,
}

fn snapshot<K: crate::table::MapKey, V: crate::table::MapValue>(map: &DistributedMap<K, V>) -> Snapshot {
    let e = map.epoch_stats();
    Snapshot {
        remote: map.cluster().total_dispatch_counts().remote_sent,
        executed: map.stats().executed,
        retired: e.retired,
        reclaimed: e.reclaimed,
    }
}

/// Mixed-operation throughput run on a fresh, pre-filled map. Times only the
/// operation phase.
pub fn run_ops_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    if cfg.mode.is_iteration() {
        return Err(BenchError::Config(format!("{} is not an operations mode", cfg.mode)));
    }
    let cluster = Cluster::spawn(cfg.locales, cfg.tasks)?;
    let map: DistributedMap<u64, u64> = DistributedMap::new(&cluster, cfg.map.clone())?;
    prefill(&map, 0..cfg.key_range() as i128, |k| k as u64, 0);
    Ok(run_ops_workload(&map, cfg))
}

/// The timed operation phase of [`run_ops_bench`] against an existing map.
/// The map's cluster must have `cfg.locales` locales and `cfg.tasks` tasks.
pub fn run_ops_workload(map: &DistributedMap<u64, u64>, cfg: &BenchConfig) -> BenchReport {
    let cluster = map.cluster();
    assert_eq!(
        (cluster.num_locales(), cluster.tasks_per_locale()),
        (cfg.locales, cfg.tasks),
        "cluster shape differs from the benchmark configuration"
    );
    let asynchronous = cfg.mode == Mode::OpsAsync;
    let issued: Vec<AtomicU64> = (0..cfg.locales).map(|_| AtomicU64::new(0)).collect();
    let local: Vec<AtomicU64> = (0..cfg.locales).map(|_| AtomicU64::new(0)).collect();
    let before = snapshot(map);
    let start = Instant::now();
    cluster.coforall_locales(|loc| {
        cluster.coforall_tasks(|tid| {
            let tok = map.get_token();
            let mut gen = WorkloadGen::new(cfg, loc, tid);
            let n = cfg.ops_for_worker(loc * cfg.tasks + tid);
            let mut mine = 0;
            for _ in 0..n {
                let (action, key, value) = gen.next_op();
                mine += u64::from(map.owner_of(&key) == loc);
                match (action, asynchronous) {
                    (MapAction::Insert, false) => map.insert(key, value, &tok),
                    (MapAction::Erase, false) => map.erase(&key, &tok),
                    (MapAction::Find, false) => {
                        map.find(&key, &tok);
                    }
                    (MapAction::Insert, true) => map.insert_async(key, value, &tok),
                    (MapAction::Erase, true) => map.erase_async(key, &tok),
                    (MapAction::Find, true) => {
                        map.find_async(key, &tok);
                    }
                }
            }
            issued[loc].fetch_add(n, Ordering::Relaxed);
            local[loc].fetch_add(mine, Ordering::Relaxed);
        });
        if asynchronous {
            map.flush_local_buffers();
        }
    });
    let elapsed = start.elapsed().as_secs_f64();
    let after = snapshot(map);

    BenchReport::new(
        cfg.mode,
        cfg,
        cfg.total_ops,
        elapsed,
        after.remote - before.remote,
        local.iter().map(|c| c.load(Ordering::Relaxed)).sum(),
        issued.into_iter().map(AtomicU64::into_inner).collect(),
        after.executed.iter().zip(&before.executed).map(|(a, b)| a - b).collect(),
        (after.retired, after.reclaimed),
    )
}

/// Inserts `keys` through the async path from the calling thread, then
/// flushes every locale.
pub fn prefill<K, V>(map: &DistributedMap<K, V>, keys: std::ops::Range<i128>, key_of: impl Fn(i128) -> K, value: V)
where
    K: crate::table::MapKey,
    V: crate::table::MapValue,
{
    let tok = map.get_token();
    for k in keys {
        map.insert_async(key_of(k), value.clone(), &tok);
    }
    map.flush_all_buffers();
}

/// Yields before each visit in the parallel phase: 0 to 10, chosen per key.
pub const MAX_VISIT_YIELDS: u64 = 10;

/// Iteration throughput over a map pre-filled with `key_range` keys centred
/// on zero. Runs the parallel phase, then the serial phase; the report for
/// `cfg.mode` comes first.
pub fn run_iter_bench(cfg: &BenchConfig) -> Result<Vec<BenchReport>, BenchError> {
    cfg.validate()?;
    if !cfg.mode.is_iteration() {
        return Err(BenchError::Config(format!("{} is not an iteration mode", cfg.mode)));
    }
    let cluster = Cluster::spawn(cfg.locales, cfg.tasks)?;
    let map: DistributedMap<i64, u64> = DistributedMap::new(&cluster, cfg.map.clone())?;
    let half = (cfg.key_range() / 2) as i128;
    prefill(&map, -half..(cfg.key_range() as i128 - half), |k| k as i64, 0);
    let keys = cfg.key_range();

    let run = |mode: Mode| -> Result<BenchReport, BenchError> {
        let before = snapshot(&map);
        let start = Instant::now();
        let stats = match mode {
            Mode::IterParallel => map.parallel_iterate(|k, _| {
                for _ in 0..hash_key(k, cfg.seed) % (MAX_VISIT_YIELDS + 1) {
                    std::thread::yield_now();
                }
            }),
            _ => map.serial_iterate(|_, _| std::thread::yield_now()),
        };
        let elapsed = start.elapsed().as_secs_f64();
        let after = snapshot(&map);
        let visits = stats.total_visits();
        if visits != keys {
            return Err(BenchError::Config(format!(
                "{mode} visited {visits} keys, expected {keys}"
            )));
        }
        Ok(BenchReport::new(
            mode,
            cfg,
            visits,
            elapsed,
            after.remote - before.remote,
            visits,
            stats.visits.clone(),
            stats.visits,
            (after.retired, after.reclaimed),
        ))
    };
    let parallel = run(Mode::IterParallel)?;
    let serial = run(Mode::IterSerial)?;
    Ok(match cfg.mode {
        Mode::IterSerial => vec![serial, parallel],
        _ => vec![parallel, serial],
    })
}

/// Runs the configured benchmark.
pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchReport>, BenchError> {
    if cfg.mode.is_iteration() {
        run_iter_bench(cfg)
    } else {
        run_ops_bench(cfg).map(|r| vec![r])
    }
}

/// Runs the synchronous workload of `cfg` on a fresh map with every
/// operation timestamped by a shared logical clock. Returns the history in
/// no particular order.
pub fn record_history(cfg: &BenchConfig) -> Result<Vec<TimedOp<u64, u64>>, BenchError> {
    cfg.validate()?;
    let cluster = Cluster::spawn(cfg.locales, cfg.tasks)?;
    let map: DistributedMap<u64, u64> = DistributedMap::new(&cluster, cfg.map.clone())?;
    Ok(record_history_on(&map, cfg))
}

/// [`record_history`] against an existing map.
pub fn record_history_on(map: &DistributedMap<u64, u64>, cfg: &BenchConfig) -> Vec<TimedOp<u64, u64>> {
    let cluster = map.cluster();
    assert_eq!(
        (cluster.num_locales(), cluster.tasks_per_locale()),
        (cfg.locales, cfg.tasks),
        "cluster shape differs from the benchmark configuration"
    );
    let clock = AtomicU64::new(1);
    let history = Mutex::new(Vec::with_capacity(cfg.total_ops as usize));
    cluster.coforall_locales(|loc| {
        cluster.coforall_tasks(|tid| {
            let tok = map.get_token();
            let mut gen = WorkloadGen::new(cfg, loc, tid);
            let n = cfg.ops_for_worker(loc * cfg.tasks + tid);
            let mut mine = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let (action, key, value) = gen.next_op();
                let start = clock.fetch_add(1, Ordering::SeqCst);
                let op = match action {
                    MapAction::Insert => {
                        map.insert(key, value, &tok);
                        TraceOp::insert(key, value)
                    }
                    MapAction::Erase => {
                        map.erase(&key, &tok);
                        TraceOp::erase(key)
                    }
                    MapAction::Find => TraceOp::find(key, map.find(&key, &tok)),
                };
                let end = clock.fetch_add(1, Ordering::SeqCst);
                mine.push(TimedOp { op, start, end });
            }
            history.lock().expect("history poisoned").extend(mine);
        });
    });
    history.into_inner().expect("history poisoned")
}
