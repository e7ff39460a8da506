//! Simulated PGAS cluster.
//!
//! A [`Cluster`] is a fixed set of locales living in one process. Each locale
//! owns a rayon worker pool of `tasks_per_locale` threads and a privatization
//! registry. An `on locale { .. }` block becomes [`Cluster::execute_on`]: the
//! closure is shipped to the target pool and the caller blocks until it
//! returns. Calls whose target is the caller's own locale run inline.
//!
//! Threads that do not belong to any pool (a test's main thread, the bench
//! driver) act as the program's main task and are attributed to locale 0.
//! Work they send to locale 0 still enters pool 0 so that anything it spawns
//! lands on the right workers; those entries are counted separately from
//! cross-locale traffic.

use std::any::Any;
use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use thiserror::Error;

pub type LocaleId = usize;

/// Privatization descriptor. Valid on every locale of the cluster that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pid(usize);

impl Pid {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies one cluster; lets locale markers from different clusters coexist
/// in one process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClusterId(u64);

static NEXT_CLUSTER: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static CURRENT: Cell<Option<(ClusterId, LocaleId)>> = const { Cell::new(None) };
}

/// Locale of the calling thread within `cluster`, or `None` if the thread is
/// not one of that cluster's workers.
pub fn worker_locale(cluster: ClusterId) -> Option<LocaleId> {
    CURRENT.with(|c| match c.get() {
        Some((id, loc)) if id == cluster => Some(loc),
        _ => None,
    })
}

/// Logical locale of the calling thread: its pool's locale, or 0 for threads
/// outside the cluster.
pub fn here_in(cluster: ClusterId) -> LocaleId {
    worker_locale(cluster).unwrap_or(0)
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("cluster needs at least one locale and one task per locale (got {locales} x {tasks})")]
    InvalidShape { locales: usize, tasks: usize },
    #[error("failed to start worker pool for locale {locale}: {reason}")]
    PoolStart { locale: LocaleId, reason: String },
    #[error("locale {0} is out of range")]
    NoSuchLocale(LocaleId),
    #[error("pid {0:?} is not registered on locale {1}")]
    UnknownPid(Pid, LocaleId),
    #[error("pid {0:?} refers to an instance of a different type")]
    TypeMismatch(Pid),
}

/// A panic raised by work shipped to another locale.
pub struct RemotePanic {
    pub locale: LocaleId,
    payload: Box<dyn Any + Send + 'static>,
}

impl RemotePanic {
    pub fn message(&self) -> &str {
        if let Some(s) = self.payload.downcast_ref::<&str>() {
            s
        } else if let Some(s) = self.payload.downcast_ref::<String>() {
            s
        } else {
            "<non-string panic payload>"
        }
    }

    pub fn into_payload(self) -> Box<dyn Any + Send + 'static> {
        self.payload
    }
}

impl fmt::Debug for RemotePanic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemotePanic")
            .field("locale", &self.locale)
            .field("message", &self.message())
            .finish()
    }
}

impl fmt::Display for RemotePanic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "work on locale {} panicked: {}", self.locale, self.message())
    }
}

impl std::error::Error for RemotePanic {}

/// Block distribution of the root slot array over locales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDistribution {
    num_locales: usize,
    per_locale: usize,
}

impl BlockDistribution {
    pub fn new(num_locales: usize, per_locale: usize) -> Self {
        assert!(num_locales > 0 && per_locale > 0);
        BlockDistribution {
            num_locales,
            per_locale,
        }
    }

    pub fn total_slots(&self) -> usize {
        self.num_locales * self.per_locale
    }

    pub fn per_locale(&self) -> usize {
        self.per_locale
    }

    pub fn num_locales(&self) -> usize {
        self.num_locales
    }

    /// Owner of root slot `idx`. `idx` must be below [`total_slots`](Self::total_slots).
    pub fn locale_of(&self, idx: usize) -> LocaleId {
        debug_assert!(idx < self.total_slots(), "root index {idx} out of range");
        idx / self.per_locale
    }

    /// Global root indices owned by `locale`.
    pub fn local_range(&self, locale: LocaleId) -> std::ops::Range<usize> {
        let start = locale * self.per_locale;
        start..start + self.per_locale
    }
}

/// Snapshot of dispatch counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DispatchCounts {
    /// Work sent from this locale to another locale.
    pub remote_sent: u64,
    /// Work received from another locale.
    pub remote_received: u64,
    /// `execute_on` calls that targeted the caller's own locale and ran inline.
    pub inline: u64,
    /// Entries from non-worker threads into locale 0.
    pub driver_entries: u64,
    /// Fire-and-forget tasks spawned on this locale.
    pub spawned: u64,
}

impl DispatchCounts {
    fn add(&mut self, other: &DispatchCounts) {
        self.remote_sent += other.remote_sent;
        self.remote_received += other.remote_received;
        self.inline += other.inline;
        self.driver_entries += other.driver_entries;
        self.spawned += other.spawned;
    }
}

#[derive(Default)]
struct ShardCounters {
    remote_sent: AtomicU64,
    remote_received: AtomicU64,
    inline: AtomicU64,
    driver_entries: AtomicU64,
    spawned: AtomicU64,
}

impl ShardCounters {
    fn snapshot(&self) -> DispatchCounts {
        DispatchCounts {
            remote_sent: self.remote_sent.load(Ordering::Relaxed),
            remote_received: self.remote_received.load(Ordering::Relaxed),
            inline: self.inline.load(Ordering::Relaxed),
            driver_entries: self.driver_entries.load(Ordering::Relaxed),
            spawned: self.spawned.load(Ordering::Relaxed),
        }
    }
}

type Instance = Arc<dyn Any + Send + Sync>;

struct Shard {
    pool: rayon::ThreadPool,
    registry: RwLock<HashMap<Pid, Instance>>,
    counters: ShardCounters,
}

struct ClusterInner {
    id: ClusterId,
    tasks_per_locale: usize,
    shards: Vec<Shard>,
    next_pid: AtomicUsize,
}

/// Handle to a simulated cluster. Cheap to clone; all clones address the same
/// locales.
#[derive(Clone)]
pub struct Cluster {
    inner: Arc<ClusterInner>,
}

impl fmt::Debug for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Cluster")
            .field("id", &self.inner.id)
            .field("locales", &self.num_locales())
            .field("tasks_per_locale", &self.inner.tasks_per_locale)
            .finish()
    }
}

impl Cluster {
    /// Starts `num_locales` shards with `tasks_per_locale` workers each.
    pub fn spawn(num_locales: usize, tasks_per_locale: usize) -> Result<Cluster, RuntimeError> {
        if num_locales == 0 || tasks_per_locale == 0 {
            return Err(RuntimeError::InvalidShape {
                locales: num_locales,
                tasks: tasks_per_locale,
            });
        }
        let id = ClusterId(NEXT_CLUSTER.fetch_add(1, Ordering::Relaxed));
        let mut shards = Vec::with_capacity(num_locales);
        for locale in 0..num_locales {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(tasks_per_locale)
                .thread_name(move |t| format!("locale{locale}-task{t}"))
                .start_handler(move |_| CURRENT.with(|c| c.set(Some((id, locale)))))
                .build()
                .map_err(|e| RuntimeError::PoolStart {
                    locale,
                    reason: e.to_string(),
                })?;
            shards.push(Shard {
                pool,
                registry: RwLock::new(HashMap::new()),
                counters: ShardCounters::default(),
            });
        }
        Ok(Cluster {
            inner: Arc::new(ClusterInner {
                id,
                tasks_per_locale,
                shards,
                next_pid: AtomicUsize::new(0),
            }),
        })
    }

    pub fn id(&self) -> ClusterId {
        self.inner.id
    }

    pub fn num_locales(&self) -> usize {
        self.inner.shards.len()
    }

    pub fn tasks_per_locale(&self) -> usize {
        self.inner.tasks_per_locale
    }

    /// Logical locale of the calling thread.
    pub fn here(&self) -> LocaleId {
        here_in(self.inner.id)
    }

    fn shard(&self, locale: LocaleId) -> &Shard {
        match self.inner.shards.get(locale) {
            Some(s) => s,
            None => panic!("{}", RuntimeError::NoSuchLocale(locale)),
        }
    }

    /// Runs `work` in `locale`'s execution context and returns its result.
    ///
    /// A panic inside `work` is caught and returned as [`RemotePanic`].
    pub fn execute_on<R, F>(&self, locale: LocaleId, work: F) -> Result<R, RemotePanic>
    where
        R: Send,
        F: FnOnce() -> R + Send,
    {
        let target = self.shard(locale);
        let caller = worker_locale(self.inner.id);
        let guarded = move || panic::catch_unwind(AssertUnwindSafe(work));
        let result = match caller {
            Some(here) if here == locale => {
                target.counters.inline.fetch_add(1, Ordering::Relaxed);
                guarded()
            }
            None if locale == 0 => {
                target.counters.driver_entries.fetch_add(1, Ordering::Relaxed);
                target.pool.install(guarded)
            }
            _ => {
                let source = caller.unwrap_or(0);
                self.inner.shards[source]
                    .counters
                    .remote_sent
                    .fetch_add(1, Ordering::Relaxed);
                target.counters.remote_received.fetch_add(1, Ordering::Relaxed);
                target.pool.install(guarded)
            }
        };
        result.map_err(|payload| RemotePanic { locale, payload })
    }

    /// Like [`execute_on`](Self::execute_on) but re-raises a remote panic in
    /// the caller.
    pub fn on<R, F>(&self, locale: LocaleId, work: F) -> R
    where
        R: Send,
        F: FnOnce() -> R + Send,
    {
        match self.execute_on(locale, work) {
            Ok(r) => r,
            Err(p) => panic::resume_unwind(p.into_payload()),
        }
    }

    /// Fire-and-forget task attributed to `locale` (the `begin` statement).
    ///
    /// The task gets its own thread rather than a pool worker. A pool worker
    /// that blocks may run unrelated queued jobs on its stack, so a task that
    /// others wait for must not be one of them.
    pub fn spawn_on<F>(&self, locale: LocaleId, work: F)
    where
        F: FnOnce() + Send + 'static,
    {
        let shard = self.shard(locale);
        shard.counters.spawned.fetch_add(1, Ordering::Relaxed);
        let id = self.inner.id;
        std::thread::Builder::new()
            .name(format!("locale-{locale}-begin"))
            .spawn(move || {
                CURRENT.with(|c| c.set(Some((id, locale))));
                work()
            })
            .expect("failed to spawn task thread");
    }

    /// Runs `f(locale)` on every locale concurrently and waits for all of them
    /// (`coforall loc in Locales do on loc`).
    pub fn coforall_locales<F>(&self, f: F)
    where
        F: Fn(LocaleId) + Sync,
    {
        let f = &f;
        let here = self.here();
        std::thread::scope(|s| {
            for locale in 0..self.num_locales() {
                if locale == here {
                    continue;
                }
                s.spawn(move || {
                    // Inherit the caller's locale so the dispatch is attributed to it.
                    self.as_locale(here, || self.on(locale, || f(locale)))
                });
            }
            self.on(here, || f(here));
        });
    }

    fn as_locale<R>(&self, locale: LocaleId, f: impl FnOnce() -> R) -> R {
        let prev = CURRENT.with(|c| c.replace(Some((self.inner.id, locale))));
        let r = f();
        CURRENT.with(|c| c.set(prev));
        r
    }

    /// Runs `f(tid)` for `tid in 0..tasks_per_locale` as concurrent tasks of
    /// the caller's locale and waits for all of them.
    pub fn coforall_tasks<F>(&self, f: F)
    where
        F: Fn(usize) + Sync,
    {
        let tasks = self.inner.tasks_per_locale;
        let f = &f;
        self.on(self.here(), || {
            rayon::scope(|s| {
                for tid in 0..tasks {
                    s.spawn(move |_| f(tid));
                }
            })
        });
    }

    /// Allocates one instance per locale and returns the descriptor used to
    /// find it again.
    pub fn privatize<T, F>(&self, factory: F) -> Pid
    where
        T: Send + Sync + 'static,
        F: Fn(LocaleId) -> T,
    {
        let pid = Pid(self.inner.next_pid.fetch_add(1, Ordering::Relaxed));
        for (locale, shard) in self.inner.shards.iter().enumerate() {
            let instance: Instance = Arc::new(factory(locale));
            shard
                .registry
                .write()
                .expect("registry poisoned")
                .insert(pid, instance);
        }
        pid
    }

    /// Locale-local lookup of a privatized instance. Never communicates.
    pub fn privatized<T>(&self, pid: Pid, locale: LocaleId) -> Result<Arc<T>, RuntimeError>
    where
        T: Send + Sync + 'static,
    {
        let shard = self
            .inner
            .shards
            .get(locale)
            .ok_or(RuntimeError::NoSuchLocale(locale))?;
        let instance = shard
            .registry
            .read()
            .expect("registry poisoned")
            .get(&pid)
            .cloned()
            .ok_or(RuntimeError::UnknownPid(pid, locale))?;
        instance
            .downcast::<T>()
            .map_err(|_| RuntimeError::TypeMismatch(pid))
    }

    pub fn dispatch_counts(&self, locale: LocaleId) -> DispatchCounts {
        self.shard(locale).counters.snapshot()
    }

    /// Sum of all per-locale counters.
    pub fn total_dispatch_counts(&self) -> DispatchCounts {
        let mut total = DispatchCounts::default();
        for shard in &self.inner.shards {
            total.add(&shard.counters.snapshot());
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn spawned_task_runs_as_its_locale() {
        let c = Cluster::spawn(3, 1).unwrap();
        let (tx, rx) = std::sync::mpsc::channel();
        let c2 = c.clone();
        c.spawn_on(2, move || {
            let here = c2.here();
            let before = c2.dispatch_counts(2).remote_sent;
            c2.on(0, || ());
            tx.send((here, c2.dispatch_counts(2).remote_sent - before)).unwrap();
        });
        assert_eq!(rx.recv().unwrap(), (2, 1));
        assert_eq!(c.dispatch_counts(2).spawned, 1);
    }

    #[test]
    fn rejects_empty_shapes() {
        assert!(matches!(
            Cluster::spawn(0, 1),
            Err(RuntimeError::InvalidShape { .. })
        ));
        assert!(matches!(
            Cluster::spawn(2, 0),
            Err(RuntimeError::InvalidShape { .. })
        ));
    }

    #[test]
    fn single_locale_cluster() {
        let c = Cluster::spawn(1, 1).unwrap();
        assert_eq!(c.num_locales(), 1);
        assert_eq!(c.tasks_per_locale(), 1);
        assert_eq!(c.here(), 0);
        assert_eq!(c.on(0, || worker_locale(c.id())), Some(0));
    }

    #[test]
    fn block_distribution_is_balanced() {
        let d = BlockDistribution::new(4, 1024);
        assert_eq!(d.total_slots(), 4096);
        let mut owned = [0usize; 4];
        for idx in 0..d.total_slots() {
            owned[d.locale_of(idx)] += 1;
        }
        assert_eq!(owned, [1024; 4]);
        assert_eq!(d.locale_of(0), 0);
        assert_eq!(d.locale_of(1023), 0);
        assert_eq!(d.locale_of(1024), 1);
        assert_eq!(d.locale_of(4095), 3);
        // each locale's run is contiguous
        for loc in 0..4 {
            assert!(d.local_range(loc).all(|i| d.locale_of(i) == loc));
        }
    }

    #[test]
    fn execute_on_runs_in_target_context() {
        let c = Cluster::spawn(4, 2).unwrap();
        for target in 0..4 {
            let seen = c.on(target, || worker_locale(c.id()));
            assert_eq!(seen, Some(target));
        }
    }

    #[test]
    fn execute_on_self_is_inline() {
        let c = Cluster::spawn(3, 2).unwrap();
        let before = c.total_dispatch_counts();
        let (thread_before, thread_inside) = c.on(2, || {
            let outer = std::thread::current().id();
            let inner = c.on(2, || std::thread::current().id());
            (outer, inner)
        });
        assert_eq!(thread_before, thread_inside);
        let after = c.total_dispatch_counts();
        assert_eq!(after.inline - before.inline, 1);
        assert_eq!(after.remote_sent - before.remote_sent, 1);
    }

    #[test]
    fn remote_panics_become_errors() {
        let c = Cluster::spawn(2, 1).unwrap();
        let err = c
            .execute_on(1, || -> u32 { panic!("boom on the far side") })
            .unwrap_err();
        assert_eq!(err.locale, 1);
        assert!(err.message().contains("boom"));
        // the pool survives
        assert_eq!(c.on(1, || 7), 7);
    }

    #[test]
    fn many_concurrent_calls_to_one_shard_complete() {
        let c = Cluster::spawn(4, 2).unwrap();
        let hits = AtomicUsize::new(0);
        c.coforall_locales(|_| {
            c.coforall_tasks(|_| {
                for _ in 0..10_000 / 8 {
                    c.on(3, || hits.fetch_add(1, Ordering::Relaxed));
                }
            })
        });
        assert_eq!(hits.load(Ordering::Relaxed), 4 * 2 * (10_000 / 8));
    }

    #[test]
    fn privatized_lookup_is_local_and_stable() {
        let c = Cluster::spawn(4, 1).unwrap();
        let a = c.privatize(|loc| (loc, AtomicUsize::new(0)));
        let b = c.privatize(|loc| (loc, AtomicUsize::new(0)));
        assert_ne!(a, b);
        let before = c.total_dispatch_counts();
        for loc in 0..4 {
            let x = c.privatized::<(usize, AtomicUsize)>(a, loc).unwrap();
            let y = c.privatized::<(usize, AtomicUsize)>(a, loc).unwrap();
            assert_eq!(x.0, loc);
            assert!(Arc::ptr_eq(&x, &y));
            let other = c.privatized::<(usize, AtomicUsize)>(b, loc).unwrap();
            assert!(!Arc::ptr_eq(&x, &other));
        }
        assert_eq!(c.total_dispatch_counts(), before);
        assert!(matches!(
            c.privatized::<u64>(a, 0),
            Err(RuntimeError::TypeMismatch(_))
        ));
        assert!(matches!(
            c.privatized::<u64>(Pid(99), 0),
            Err(RuntimeError::UnknownPid(..))
        ));
    }

    #[test]
    fn full_scale_shape_is_constructible() {
        // 64 x 44 threads is heavy for CI; build the locale table at a lighter
        // task count and check the distribution math for the full shape.
        let d = BlockDistribution::new(64, 1024);
        assert_eq!(d.locale_of(d.total_slots() - 1), 63);
        let c = Cluster::spawn(64, 1).unwrap();
        assert_eq!(c.on(63, || worker_locale(c.id())), Some(63));
    }
}
