//! Destination-aggregated asynchronous operations.
//!
//! Each locale keeps one fixed-capacity buffer per remote destination. An
//! async operation on a remote key claims a slot with a single `fetch_add`;
//! whoever claims the last slot detaches the buffer, installs an empty one and
//! schedules [`emptyBuffer`](DistributedMap::flush_local_buffers)-style
//! delivery on its own locale. Delivery is one RPC to the destination, which
//! runs every record through the node-local routines in parallel. If the
//! batch contained lookups, the destination sends the results back in one
//! more RPC and the source resolves the futures. Records within one buffer
//! run in no particular order; flush between dependent operations.
//!
//! Operations on locally owned keys are never buffered.

use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::config::Execution;
use crate::dmap::{DistributedMap, MapInstance};
use crate::ebr::Token;
use crate::runtime::LocaleId;
use crate::table::{MapKey, MapValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapAction {
    Insert,
    Find,
    Erase,
}

const PENDING: u8 = 0;
const RESOLVING: u8 = 1;
const SUCCEEDED: u8 = 2;
const FAILED: u8 = 3;

struct FutureCell<V> {
    state: AtomicU8,
    value: OnceLock<V>,
}

/// Result slot of an asynchronous lookup.
pub struct MapFuture<V> {
    cell: Arc<FutureCell<V>>,
}

impl<V> Clone for MapFuture<V> {
    fn clone(&self) -> Self {
        MapFuture {
            cell: Arc::clone(&self.cell),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FutureState<V> {
    Pending,
    Succeeded(V),
    Failed,
}

impl<V: fmt::Debug + Clone> fmt::Debug for MapFuture<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("MapFuture").field(&self.state()).finish()
    }
}

impl<V: Clone> MapFuture<V> {
    pub(crate) fn pending() -> Self {
        MapFuture {
            cell: Arc::new(FutureCell {
                state: AtomicU8::new(PENDING),
                value: OnceLock::new(),
            }),
        }
    }

    fn begin_resolve(&self) {
        let won = self
            .cell
            .state
            .compare_exchange(PENDING, RESOLVING, Ordering::AcqRel, Ordering::Acquire)
            .is_ok();
        assert!(won, "future resolved twice");
    }

    pub(crate) fn succeed(&self, value: V) {
        self.begin_resolve();
        let _ = self.cell.value.set(value);
        self.cell.state.store(SUCCEEDED, Ordering::Release);
    }

    pub(crate) fn fail(&self) {
        self.begin_resolve();
        self.cell.state.store(FAILED, Ordering::Release);
    }

    pub(crate) fn resolve(&self, outcome: Option<V>) {
        match outcome {
            Some(v) => self.succeed(v),
            None => self.fail(),
        }
    }

    pub fn is_ready(&self) -> bool {
        matches!(self.cell.state.load(Ordering::Acquire), SUCCEEDED | FAILED)
    }

    pub fn state(&self) -> FutureState<V> {
        match self.cell.state.load(Ordering::Acquire) {
            SUCCEEDED => FutureState::Succeeded(self.cell.value.get().expect("value set").clone()),
            FAILED => FutureState::Failed,
            _ => FutureState::Pending,
        }
    }

    /// Blocks until resolved. Returns the value, or `None` if the key was
    /// absent. A future whose buffer is never flushed never resolves.
    pub fn wait(&self) -> Option<V> {
        wait_until(|| self.is_ready());
        match self.state() {
            FutureState::Succeeded(v) => Some(v),
            _ => None,
        }
    }
}

/// Spins until `done()` holds, running queued pool work meanwhile when called
/// from a worker thread.
pub(crate) fn wait_until(mut done: impl FnMut() -> bool) {
    while !done() {
        match rayon::yield_now() {
            Some(rayon::Yield::Executed) => {}
            _ => std::thread::yield_now(),
        }
    }
}

/// One buffered operation.
#[derive(Clone)]
pub(crate) enum OpRecord<K, V> {
    Insert(K, V),
    Find(K, MapFuture<V>),
    Erase(K),
}

impl<K, V> OpRecord<K, V> {
    /// Splits off the part that travels to the destination; futures stay home.
    fn into_remote(self) -> (RemoteOp<K, V>, Option<MapFuture<V>>) {
        match self {
            OpRecord::Insert(k, v) => (RemoteOp::Insert(k, v), None),
            OpRecord::Find(k, f) => (RemoteOp::Find(k), Some(f)),
            OpRecord::Erase(k) => (RemoteOp::Erase(k), None),
        }
    }
}

/// Wire form of a buffered operation.
pub(crate) enum RemoteOp<K, V> {
    Insert(K, V),
    Find(K),
    Erase(K),
}

/// Per-record result shipped back to the source, aligned by position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum FindOutcome<V> {
    NotFind,
    Found(V),
    Missing,
}

struct OpBuffer<K, V> {
    slots: Box<[OnceLock<OpRecord<K, V>>]>,
    claimed: AtomicUsize,
    written: AtomicUsize,
}

impl<K, V> OpBuffer<K, V> {
    fn new(capacity: usize) -> Self {
        OpBuffer {
            slots: (0..capacity).map(|_| OnceLock::new()).collect(),
            claimed: AtomicUsize::new(0),
            written: AtomicUsize::new(0),
        }
    }

    fn capacity(&self) -> usize {
        self.slots.len()
    }
}

/// Accounting for one delivered buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlushRecord {
    pub source: LocaleId,
    pub destination: LocaleId,
    pub records: usize,
    pub finds: usize,
    /// Cross-locale RPCs issued to deliver this buffer.
    pub dispatches: u32,
}

/// Aggregation counters summed over locales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AggregationStats {
    /// Records appended to buffers.
    pub enqueued: u64,
    /// Buffers delivered.
    pub flushes: u64,
    pub flushes_with_finds: u64,
    /// Records delivered by those flushes.
    pub records_flushed: u64,
    /// Records executed by destinations.
    pub records_executed: u64,
    /// RPCs issued by deliveries.
    pub dispatches: u64,
}

#[derive(Default)]
struct AggregatorCounters {
    enqueued: AtomicU64,
    flushes: AtomicU64,
    flushes_with_finds: AtomicU64,
    records_flushed: AtomicU64,
    records_executed: AtomicU64,
    dispatches: AtomicU64,
}

/// Source-side buffers of one locale, one per destination.
pub(crate) struct Aggregator<K, V> {
    buffers: Vec<ArcSwap<OpBuffer<K, V>>>,
    capacity: usize,
    outstanding: AtomicUsize,
    counters: AggregatorCounters,
    log: Mutex<Vec<FlushRecord>>,
}

impl<K: Clone, V: Clone> Aggregator<K, V> {
    pub(crate) fn new(num_locales: usize, capacity: usize) -> Self {
        Aggregator {
            buffers: (0..num_locales)
                .map(|_| ArcSwap::from_pointee(OpBuffer::new(capacity)))
                .collect(),
            capacity,
            outstanding: AtomicUsize::new(0),
            counters: AggregatorCounters::default(),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Appends `rec` to the buffer for `dest`. Returns the buffer's contents if
    /// this append filled it; the caller then owns delivery.
    pub(crate) fn aggregate(&self, dest: LocaleId, rec: OpRecord<K, V>) -> Option<Vec<OpRecord<K, V>>> {
        self.counters.enqueued.fetch_add(1, Ordering::Relaxed);
        loop {
            let buf = self.buffers[dest].load_full();
            let idx = buf.claimed.fetch_add(1, Ordering::AcqRel);
            if idx < buf.capacity() {
                if buf.slots[idx].set(rec).is_err() {
                    unreachable!("buffer slot claimed twice");
                }
                buf.written.fetch_add(1, Ordering::Release);
                if idx + 1 == buf.capacity() {
                    return Some(self.detach(dest, &buf, idx + 1));
                }
                return None;
            }
            // Full or sealed; its owner is about to install a fresh one.
            std::thread::yield_now();
        }
    }

    /// Seals the buffer for `dest` and takes whatever it holds. Returns `None`
    /// if it was empty or already owned by another flusher.
    pub(crate) fn seal(&self, dest: LocaleId) -> Option<Vec<OpRecord<K, V>>> {
        let buf = self.buffers[dest].load_full();
        if buf.claimed.load(Ordering::Acquire) == 0 {
            return None;
        }
        let cap = buf.capacity();
        let prev = buf.claimed.fetch_add(cap, Ordering::AcqRel);
        if prev >= cap {
            return None;
        }
        Some(self.detach(dest, &buf, prev))
    }

    fn detach(&self, dest: LocaleId, buf: &OpBuffer<K, V>, n: usize) -> Vec<OpRecord<K, V>> {
        self.buffers[dest].store(Arc::new(OpBuffer::new(self.capacity)));
        wait_until(|| buf.written.load(Ordering::Acquire) >= n);
        buf.slots[..n]
            .iter()
            .map(|s| s.get().expect("written slot").clone())
            .collect()
    }

    fn log_flush(&self, rec: FlushRecord) {
        let c = &self.counters;
        c.flushes.fetch_add(1, Ordering::Relaxed);
        if rec.finds > 0 {
            c.flushes_with_finds.fetch_add(1, Ordering::Relaxed);
        }
        c.records_flushed.fetch_add(rec.records as u64, Ordering::Relaxed);
        c.dispatches.fetch_add(rec.dispatches as u64, Ordering::Relaxed);
        self.log.lock().expect("flush log poisoned").push(rec);
    }
}

struct Outstanding<'a>(&'a AtomicUsize);

impl Drop for Outstanding<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::AcqRel);
    }
}

impl<K: MapKey, V: MapValue> MapInstance<K, V> {
    fn apply(&self, op: RemoteOp<K, V>, tok: &Token) -> FindOutcome<V> {
        let _pin = tok.pin_guard();
        match op {
            RemoteOp::Insert(k, v) => {
                self.insert_local(k, v, tok);
                FindOutcome::NotFind
            }
            RemoteOp::Find(k) => match self.find_local(&k, tok) {
                Some(v) => FindOutcome::Found(v),
                None => FindOutcome::Missing,
            },
            RemoteOp::Erase(k) => {
                self.erase_local(&k, tok);
                FindOutcome::NotFind
            }
        }
    }

    /// Destination side of a delivery: run every record, one token per worker.
    fn execute_batch(&self, ops: Vec<RemoteOp<K, V>>, exec: Execution) -> Vec<FindOutcome<V>> {
        let n = ops.len() as u64;
        #[cfg(feature = "parallel")]
        let results = if exec.is_parallel() {
            ops.into_par_iter()
                .map_init(|| self.token(), |tok, op| self.apply(op, tok))
                .collect()
        } else {
            let tok = self.token();
            ops.into_iter().map(|op| self.apply(op, &tok)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results = {
            let _ = exec;
            let tok = self.token();
            ops.into_iter().map(|op| self.apply(op, &tok)).collect()
        };
        self.aggregator
            .counters
            .records_executed
            .fetch_add(n, Ordering::Relaxed);
        results
    }
}

fn resolve_futures<V: MapValue>(futures: &[Option<MapFuture<V>>], results: Vec<FindOutcome<V>>, exec: Execution) {
    let resolve = |(f, r): (&Option<MapFuture<V>>, FindOutcome<V>)| {
        if let Some(f) = f {
            match r {
                FindOutcome::Found(v) => f.succeed(v),
                FindOutcome::Missing => f.fail(),
                FindOutcome::NotFind => unreachable!("lookup result lost its slot"),
            }
        }
    };
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        futures.par_iter().zip(results.into_par_iter()).for_each(resolve);
        return;
    }
    let _ = exec;
    futures.iter().zip(results).for_each(resolve);
}

impl<K: MapKey, V: MapValue> DistributedMap<K, V> {
    /// Asynchronous insert. Local keys are applied before returning; remote
    /// ones are buffered until their buffer fills or is flushed.
    pub fn insert_async(&self, key: K, value: V, tok: &Token) {
        let here = self.cluster().here();
        let owner = self.owner_of(&key);
        let inst = self.instance(here);
        if owner == here {
            let _pin = tok.pin_guard();
            inst.counters.immediate.fetch_add(1, Ordering::Relaxed);
            inst.insert_local(key, value, tok);
        } else {
            self.enqueue(&inst, owner, OpRecord::Insert(key, value));
        }
    }

    /// Asynchronous erase; same delivery rules as [`insert_async`](Self::insert_async).
    pub fn erase_async(&self, key: K, tok: &Token) {
        let here = self.cluster().here();
        let owner = self.owner_of(&key);
        let inst = self.instance(here);
        if owner == here {
            let _pin = tok.pin_guard();
            inst.counters.immediate.fetch_add(1, Ordering::Relaxed);
            inst.erase_local(&key, tok);
        } else {
            self.enqueue(&inst, owner, OpRecord::Erase(key));
        }
    }

    /// Asynchronous lookup. The future is already resolved for local keys.
    pub fn find_async(&self, key: K, tok: &Token) -> MapFuture<V> {
        let here = self.cluster().here();
        let owner = self.owner_of(&key);
        let inst = self.instance(here);
        let future = MapFuture::pending();
        if owner == here {
            let _pin = tok.pin_guard();
            inst.counters.immediate.fetch_add(1, Ordering::Relaxed);
            future.resolve(inst.find_local(&key, tok));
        } else {
            self.enqueue(&inst, owner, OpRecord::Find(key, future.clone()));
        }
        future
    }

    fn enqueue(&self, inst: &MapInstance<K, V>, owner: LocaleId, rec: OpRecord<K, V>) {
        if let Some(batch) = inst.aggregator.aggregate(owner, rec) {
            let source = inst.locale;
            inst.aggregator.outstanding.fetch_add(1, Ordering::AcqRel);
            let map = self.clone();
            self.cluster().spawn_on(source, move || {
                let inst = map.instance(source);
                let _done = Outstanding(&inst.aggregator.outstanding);
                map.empty_buffer(source, owner, batch);
            });
        }
    }

    /// Delivers one detached buffer from `source` (the calling locale) to `dest`.
    fn empty_buffer(&self, source: LocaleId, dest: LocaleId, batch: Vec<OpRecord<K, V>>) {
        let exec = self.config().execution;
        let records = batch.len();
        let (ops, futures): (Vec<_>, Vec<_>) = batch.into_iter().map(OpRecord::into_remote).unzip();
        let finds = futures.iter().filter(|f| f.is_some()).count();
        let futures = &futures;
        let returned = self.cluster().on(dest, move || {
            let results = self.instance(dest).execute_batch(ops, exec);
            let any_find = results.iter().any(|r| !matches!(r, FindOutcome::NotFind));
            if any_find {
                // return trip: results travel by value, futures never left home
                self.cluster().on(source, move || resolve_futures(futures, results, exec));
            }
            any_find
        });
        self.instance(source).aggregator.log_flush(FlushRecord {
            source,
            destination: dest,
            records,
            finds,
            dispatches: 1 + returned as u32,
        });
    }

    /// Delivers every partially filled buffer of the calling locale and waits
    /// for all deliveries it has started, including those scheduled when a
    /// buffer filled up.
    pub fn flush_local_buffers(&self) {
        let here = self.cluster().here();
        let inst = self.instance(here);
        let exec = self.config().execution;
        let dests: Vec<LocaleId> = (0..self.distribution().num_locales())
            .filter(|&d| d != here)
            .collect();
        self.cluster().on(here, || {
            let deliver = |&dest: &LocaleId| {
                if let Some(batch) = inst.aggregator.seal(dest) {
                    self.empty_buffer(here, dest, batch);
                }
            };
            #[cfg(feature = "parallel")]
            if exec.is_parallel() {
                dests.par_iter().for_each(deliver);
                return;
            }
            let _ = exec;
            dests.iter().for_each(deliver);
        });
        wait_until(|| inst.aggregator.outstanding.load(Ordering::Acquire) == 0);
    }

    /// [`flush_local_buffers`](Self::flush_local_buffers) on every locale.
    pub fn flush_all_buffers(&self) {
        self.cluster().coforall_locales(|_| self.flush_local_buffers());
    }

    pub fn aggregation_stats(&self) -> AggregationStats {
        let mut s = AggregationStats::default();
        for locale in 0..self.distribution().num_locales() {
            let c = &self.instance(locale).aggregator.counters;
            s.enqueued += c.enqueued.load(Ordering::Relaxed);
            s.flushes += c.flushes.load(Ordering::Relaxed);
            s.flushes_with_finds += c.flushes_with_finds.load(Ordering::Relaxed);
            s.records_flushed += c.records_flushed.load(Ordering::Relaxed);
            s.records_executed += c.records_executed.load(Ordering::Relaxed);
            s.dispatches += c.dispatches.load(Ordering::Relaxed);
        }
        s
    }

    /// Drains the per-locale delivery logs.
    pub fn take_flush_log(&self) -> Vec<FlushRecord> {
        let mut out = Vec::new();
        for locale in 0..self.distribution().num_locales() {
            let inst = self.instance(locale);
            out.append(&mut inst.aggregator.log.lock().expect("flush log poisoned"));
        }
        out
    }
}
