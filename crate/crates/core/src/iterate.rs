//! Whole-map iteration.
//!
//! Both variants visit one locale's tree on that locale and hold at most one
//! element-list lock at a time. A list that is locked when reached is not
//! waited for; its `(parent, slot)` is set aside and re-read later, since by
//! then the slot may hold a different list or a pointer list.
//!
//! The visitor runs while the visited list is locked. It must not call back
//! into the map.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dmap::{DistributedMap, MapInstance};
use crate::ebr::Token;
use crate::queue::LockFreeQueue;
use crate::runtime::LocaleId;
use crate::table::{classify, ElementList, LockState, MapKey, MapValue, Node, PointerList};

/// Visit accounting for one iteration.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IterStats {
    /// Visitor calls per locale.
    pub visits: Vec<u64>,
    pub element_lists: u64,
    pub pointer_lists: u64,
    /// Times a locked list was set aside.
    pub deferrals: u64,
    /// Largest number of workers that ran on one locale.
    pub workers: usize,
}

impl IterStats {
    pub fn total_visits(&self) -> u64 {
        self.visits.iter().sum()
    }

    fn merge(&mut self, locale: LocaleId, other: LocalStats) {
        self.visits[locale] = other.visits;
        self.element_lists += other.element_lists;
        self.pointer_lists += other.pointer_lists;
        self.deferrals += other.deferrals;
        self.workers = self.workers.max(other.workers);
    }
}

#[derive(Default)]
struct LocalStats {
    visits: u64,
    element_lists: u64,
    pointer_lists: u64,
    deferrals: u64,
    workers: usize,
}

#[derive(Default)]
struct SharedStats {
    visits: AtomicU64,
    element_lists: AtomicU64,
    pointer_lists: AtomicU64,
    deferrals: AtomicU64,
}

impl SharedStats {
    fn snapshot(&self, workers: usize) -> LocalStats {
        LocalStats {
            visits: self.visits.load(Ordering::Relaxed),
            element_lists: self.element_lists.load(Ordering::Relaxed),
            pointer_lists: self.pointer_lists.load(Ordering::Relaxed),
            deferrals: self.deferrals.load(Ordering::Relaxed),
            workers,
        }
    }
}

/// Pointer lists live as long as their table, so raw references to them may
/// be queued and shared between the table's workers.
#[derive(Clone, Copy)]
struct PlRef(*const PointerList);

unsafe impl Send for PlRef {}

impl PlRef {
    fn get<'a>(self) -> &'a PointerList {
        unsafe { &*self.0 }
    }
}

#[derive(Clone, Copy)]
enum WorkItem {
    PList(PlRef),
    Deferred(PlRef, usize),
}

enum SlotOutcome<'a> {
    Empty,
    Visited(u64),
    Inner(&'a PointerList),
    Locked,
}

/// Classifies slot `idx` of `plist`, visiting it if it holds an element list
/// that can be locked right now. The caller is pinned.
fn process_slot<'a, K: 'a, V: 'a>(plist: &'a PointerList, idx: usize, visit: &mut dyn FnMut(&K, &V)) -> SlotOutcome<'a> {
    loop {
        let p = plist.slot(idx).load(Ordering::Acquire);
        if p.is_null() {
            return SlotOutcome::Empty;
        }
        match unsafe { classify::<K, V>(p) } {
            Node::Pointers(child) => return SlotOutcome::Inner(child),
            Node::Elements(list) => {
                if list.try_lock() {
                    return SlotOutcome::Visited(visit_locked(list, visit));
                }
                // A retired list has already left its slot: a split publishes
                // its replacement first, an erase clears the slot first.
                if list.state() != LockState::Garbage {
                    return SlotOutcome::Locked;
                }
            }
        }
    }
}

fn visit_locked<K, V>(list: &ElementList<K, V>, visit: &mut dyn FnMut(&K, &V)) -> u64 {
    let entries = unsafe { list.entries() };
    for (k, v) in entries {
        visit(k, v);
    }
    let n = entries.len() as u64;
    list.unlock();
    n
}

fn random_start(rng: &Mutex<ChaCha8Rng>, len: usize) -> usize {
    rng.lock().expect("iteration rng poisoned").gen_range(0..len)
}

struct SerialSweep<'a, 'v, K, V> {
    rng: &'a Mutex<ChaCha8Rng>,
    deferrals: &'a AtomicU64,
    lazy: Vec<(PlRef, usize)>,
    stats: LocalStats,
    visit: &'v mut dyn FnMut(&K, &V),
}

impl<K, V> SerialSweep<'_, '_, K, V> {
    fn sweep(&mut self, plist: &PointerList) {
        let len = plist.len();
        let start = random_start(self.rng, len);
        for i in 0..len {
            self.slot(plist, (start + i) % len);
        }
    }

    fn slot(&mut self, plist: &PointerList, idx: usize) {
        match process_slot(plist, idx, self.visit) {
            SlotOutcome::Empty => {}
            SlotOutcome::Visited(n) => {
                self.stats.visits += n;
                self.stats.element_lists += 1;
            }
            SlotOutcome::Inner(child) => {
                self.stats.pointer_lists += 1;
                self.sweep(child);
            }
            SlotOutcome::Locked => {
                self.stats.deferrals += 1;
                self.deferrals.fetch_add(1, Ordering::Relaxed);
                self.lazy.push((PlRef(plist), idx));
            }
        }
    }

    fn drain_lazy(&mut self) {
        while !self.lazy.is_empty() {
            let pending = std::mem::take(&mut self.lazy);
            for (plist, idx) in pending {
                self.slot(plist.get(), idx);
            }
            if !self.lazy.is_empty() {
                std::thread::yield_now();
            }
        }
    }
}

impl<K: MapKey, V: MapValue> MapInstance<K, V> {
    fn serial_iterate_local(&self, visit: &mut dyn FnMut(&K, &V)) -> LocalStats {
        let tok = self.token();
        let _pin = tok.pin_guard();
        let mut s = SerialSweep {
            rng: &self.iter_rng,
            deferrals: &self.counters.deferrals,
            lazy: Vec::new(),
            stats: LocalStats {
                workers: 1,
                ..LocalStats::default()
            },
            visit,
        };
        s.sweep(self.table.root());
        s.drain_lazy();
        s.stats
    }

    fn parallel_iterate_local<F>(&self, tasks: usize, visit: &F) -> LocalStats
    where
        F: Fn(&K, &V) + Sync,
    {
        let it = ParallelIteration {
            inst: self,
            work: LockFreeQueue::new(),
            deferred: LockFreeQueue::new(),
            pending: AtomicUsize::new(0),
            stats: SharedStats::default(),
        };
        let tok = self.token();
        {
            let _pin = tok.pin_guard();
            let root = self.table.root();
            let len = root.len();
            let start = random_start(&self.iter_rng, len);
            for i in 0..len {
                it.classify_slot(root, (start + i) % len, &tok, visit);
            }
        }
        let workers = if self.execution.is_parallel() { tasks.max(1) } else { 1 };
        if workers == 1 {
            it.work_loop(&tok, visit);
        } else {
            rayon::scope(|s| {
                for _ in 0..workers {
                    let it = &it;
                    s.spawn(move |_| it.work_loop(&it.inst.token(), visit));
                }
            });
        }
        debug_assert_eq!(it.work.enqueued(), it.work.dequeued());
        debug_assert_eq!(it.deferred.enqueued(), it.deferred.dequeued());
        it.stats.snapshot(workers)
    }
}

/// Per-locale state of one parallel iteration: the work list of pointer lists
/// still to sweep and the defer list of slots found locked.
struct ParallelIteration<'a, K, V> {
    inst: &'a MapInstance<K, V>,
    work: LockFreeQueue<WorkItem>,
    deferred: LockFreeQueue<WorkItem>,
    /// Items enqueued and not yet fully processed.
    pending: AtomicUsize,
    stats: SharedStats,
}

impl<K: MapKey, V: MapValue> ParallelIteration<'_, K, V> {
    fn push(&self, queue: &LockFreeQueue<WorkItem>, item: WorkItem, tok: &Token) {
        self.pending.fetch_add(1, Ordering::AcqRel);
        queue.enqueue(item, tok);
    }

    fn classify_slot<F>(&self, plist: &PointerList, idx: usize, tok: &Token, visit: &F) -> bool
    where
        F: Fn(&K, &V) + Sync,
    {
        let mut f = |k: &K, v: &V| visit(k, v);
        match process_slot(plist, idx, &mut f) {
            SlotOutcome::Empty => true,
            SlotOutcome::Visited(n) => {
                self.stats.visits.fetch_add(n, Ordering::Relaxed);
                self.stats.element_lists.fetch_add(1, Ordering::Relaxed);
                true
            }
            SlotOutcome::Inner(child) => {
                self.stats.pointer_lists.fetch_add(1, Ordering::Relaxed);
                self.push(&self.work, WorkItem::PList(PlRef(child)), tok);
                true
            }
            SlotOutcome::Locked => {
                self.stats.deferrals.fetch_add(1, Ordering::Relaxed);
                self.inst.counters.deferrals.fetch_add(1, Ordering::Relaxed);
                self.push(&self.deferred, WorkItem::Deferred(PlRef(plist), idx), tok);
                false
            }
        }
    }

    fn work_loop<F>(&self, tok: &Token, visit: &F)
    where
        F: Fn(&K, &V) + Sync,
    {
        loop {
            let item = self.work.dequeue(tok).or_else(|| self.deferred.dequeue(tok));
            let Some(item) = item else {
                if self.pending.load(Ordering::Acquire) == 0 {
                    return;
                }
                std::thread::yield_now();
                continue;
            };
            {
                let _pin = tok.pin_guard();
                match item {
                    WorkItem::PList(p) => {
                        let plist = p.get();
                        let len = plist.len();
                        let start = random_start(&self.inst.iter_rng, len);
                        for i in 0..len {
                            self.classify_slot(plist, (start + i) % len, tok, visit);
                        }
                    }
                    WorkItem::Deferred(p, idx) => {
                        if !self.classify_slot(p.get(), idx, tok, visit) {
                            std::thread::yield_now();
                        }
                    }
                }
            }
            self.pending.fetch_sub(1, Ordering::AcqRel);
        }
    }
}

impl<K: MapKey, V: MapValue> DistributedMap<K, V> {
    /// Visits every pair, one locale after another. On each locale the
    /// visitor is called from a single task.
    pub fn serial_iterate<F>(&self, mut visit: F) -> IterStats
    where
        F: FnMut(&K, &V) + Send,
    {
        let n = self.distribution().num_locales();
        let mut stats = IterStats {
            visits: vec![0; n],
            ..IterStats::default()
        };
        for locale in 0..n {
            let visit = &mut visit;
            let local = self
                .cluster()
                .on(locale, || self.instance(locale).serial_iterate_local(visit));
            stats.merge(locale, local);
        }
        stats
    }

    /// Visits every pair using all locales and up to `tasks_per_locale`
    /// workers on each. The visitor is called concurrently.
    pub fn parallel_iterate<F>(&self, visit: F) -> IterStats
    where
        F: Fn(&K, &V) + Sync,
    {
        let n = self.distribution().num_locales();
        let tasks = self.cluster().tasks_per_locale();
        let per_locale: Vec<Mutex<Option<LocalStats>>> = (0..n).map(|_| Mutex::new(None)).collect();
        self.cluster().coforall_locales(|locale| {
            let local = self.instance(locale).parallel_iterate_local(tasks, &visit);
            *per_locale[locale].lock().expect("stats poisoned") = Some(local);
        });
        let mut stats = IterStats {
            visits: vec![0; n],
            ..IterStats::default()
        };
        for (locale, slot) in per_locale.into_iter().enumerate() {
            let local = slot.into_inner().expect("stats poisoned").expect("locale finished");
            stats.merge(locale, local);
        }
        stats
    }

    /// All pairs, collected by a serial iteration.
    pub fn iter(&self) -> std::vec::IntoIter<(K, V)> {
        let mut out = Vec::new();
        self.serial_iterate(|k, v| out.push((k.clone(), v.clone())));
        out.into_iter()
    }

    /// Locked lists set aside by iterations so far, summed over locales.
    pub fn iteration_deferrals(&self) -> u64 {
        (0..self.distribution().num_locales())
            .map(|l| self.instance(l).counters.deferrals.load(Ordering::Relaxed))
            .sum()
    }
}
