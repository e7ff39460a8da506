//! Node-local interlocked hash table.
//!
//! The table is a tree. Interior [`PointerList`]s hold atomic slots; each slot
//! is empty, points at a deeper pointer list, or points at an
//! [`ElementList`] leaf holding up to `bucket_num_elements` pairs. Every
//! node starts with a lock word, which doubles as the type tag:
//!
//! | state     | meaning                                  |
//! |-----------|------------------------------------------|
//! | `E_AVAIL` | unlocked element list                    |
//! | `E_LOCK`  | locked element list                      |
//! | `P_INNER` | pointer list (never locked, never freed) |
//! | `GARBAGE` | element list unlinked and retired        |
//!
//! An operation descends from its root slot to a leaf and locks exactly that
//! leaf. A full leaf found by an insert is split into a fresh pointer list
//! one level down. Once a slot refers to a pointer list it never changes
//! again, so a descent never needs to re-validate the path above the leaf.

use std::cell::UnsafeCell;
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU8, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::MapConfig;
use crate::ebr::Token;
use crate::lock_audit;
use crate::runtime::{BlockDistribution, LocaleId};

pub const E_AVAIL: u8 = 0;
pub const E_LOCK: u8 = 1;
pub const P_INNER: u8 = 2;
pub const GARBAGE: u8 = 3;

/// Decoded lock word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LockState {
    Available,
    Locked,
    Inner,
    Garbage,
}

impl LockState {
    pub fn from_raw(raw: u8) -> LockState {
        match raw {
            E_AVAIL => LockState::Available,
            E_LOCK => LockState::Locked,
            P_INNER => LockState::Inner,
            GARBAGE => LockState::Garbage,
            other => unreachable!("corrupt lock word {other}"),
        }
    }
}

/// Seeded 64-bit hash of `key`. Different seeds give unrelated slot choices.
pub fn hash_key<K: Hash + ?Sized>(key: &K, seed: u64) -> u64 {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    key.hash(&mut h);
    h.finish()
}

/// Bounds every key type stored in the map.
pub trait MapKey: Hash + Eq + Clone + Send + Sync + 'static {}
impl<T: Hash + Eq + Clone + Send + Sync + 'static> MapKey for T {}

/// Bounds every value type stored in the map.
pub trait MapValue: Clone + Send + Sync + 'static {}
impl<T: Clone + Send + Sync + 'static> MapValue for T {}

#[repr(C)]
pub(crate) struct Header {
    lock: AtomicU8,
}

impl Header {
    pub(crate) fn state(&self) -> LockState {
        LockState::from_raw(self.lock.load(Ordering::Acquire))
    }
}

#[repr(C)]
pub(crate) struct ElementList<K, V> {
    header: Header,
    parent: *const PointerList,
    entries: UnsafeCell<Vec<(K, V)>>,
}

unsafe impl<K: Send, V: Send> Send for ElementList<K, V> {}
unsafe impl<K: Send + Sync, V: Send + Sync> Sync for ElementList<K, V> {}

impl<K, V> ElementList<K, V> {
    fn alloc(parent: *const PointerList, state: u8, capacity: usize) -> *mut ElementList<K, V> {
        Box::into_raw(Box::new(ElementList {
            header: Header {
                lock: AtomicU8::new(state),
            },
            parent,
            entries: UnsafeCell::new(Vec::with_capacity(capacity)),
        }))
    }

    pub(crate) fn state(&self) -> LockState {
        self.header.state()
    }

    /// `E_AVAIL -> E_LOCK`. Fails on a locked or retired list.
    pub(crate) fn try_lock(&self) -> bool {
        let ok = self
            .header
            .lock
            .compare_exchange(E_AVAIL, E_LOCK, Ordering::Acquire, Ordering::Relaxed)
            .is_ok();
        if ok {
            lock_audit::acquired();
        }
        ok
    }

    pub(crate) fn unlock(&self) {
        debug_assert_eq!(self.state(), LockState::Locked);
        self.header.lock.store(E_AVAIL, Ordering::Release);
        lock_audit::released();
    }

    fn mark_garbage(&self) {
        debug_assert_eq!(self.state(), LockState::Locked);
        self.header.lock.store(GARBAGE, Ordering::Release);
        lock_audit::released();
    }

    /// # Safety
    /// The caller holds this list's lock.
    pub(crate) unsafe fn entries(&self) -> &Vec<(K, V)> {
        &*self.entries.get()
    }

    /// # Safety
    /// The caller holds this list's lock and no other reference to the
    /// entries is live.
    #[allow(clippy::mut_from_ref)]
    unsafe fn entries_mut(&self) -> &mut Vec<(K, V)> {
        &mut *self.entries.get()
    }
}

#[repr(C)]
pub(crate) struct PointerList {
    header: Header,
    parent: *const PointerList,
    seed: u64,
    depth: usize,
    buckets: Box<[AtomicPtr<Header>]>,
}

unsafe impl Send for PointerList {}
unsafe impl Sync for PointerList {}

impl PointerList {
    fn new(parent: *const PointerList, seed: u64, depth: usize, size: usize) -> PointerList {
        PointerList {
            header: Header {
                lock: AtomicU8::new(P_INNER),
            },
            parent,
            seed,
            depth,
            buckets: (0..size).map(|_| AtomicPtr::new(ptr::null_mut())).collect(),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.buckets.len()
    }

    pub(crate) fn slot(&self, idx: usize) -> &AtomicPtr<Header> {
        &self.buckets[idx]
    }

    fn index_of<K: Hash>(&self, key: &K) -> usize {
        (hash_key(key, self.seed) % self.buckets.len() as u64) as usize
    }
}

pub(crate) enum Node<'a, K, V> {
    Elements(&'a ElementList<K, V>),
    Pointers(&'a PointerList),
}

/// Reads the type tag of a non-null slot value.
///
/// # Safety
/// `p` must be non-null and protected by a pinned token (or the table must be
/// quiescent).
pub(crate) unsafe fn classify<'a, K, V>(p: *mut Header) -> Node<'a, K, V> {
    if (*p).lock.load(Ordering::Acquire) == P_INNER {
        Node::Pointers(&*(p as *const PointerList))
    } else {
        Node::Elements(&*(p as *const ElementList<K, V>))
    }
}

/// Yield first, then spin-wait with exponentially growing pauses capped at 64 µs.
pub(crate) struct Backoff {
    step: u32,
}

impl Backoff {
    pub(crate) fn new() -> Self {
        Backoff { step: 0 }
    }

    pub(crate) fn snooze(&mut self) {
        if self.step == 0 {
            std::thread::yield_now();
        } else {
            let pause = Duration::from_micros(1 << (self.step - 1).min(6));
            let until = Instant::now() + pause;
            while Instant::now() < until {
                std::hint::spin_loop();
                std::thread::yield_now();
            }
        }
        self.step = (self.step + 1).min(7);
    }
}

/// A locked element list returned by a descent. Unlocks on drop.
pub(crate) struct LockedList<'a, K, V> {
    list: &'a ElementList<K, V>,
    slot: &'a AtomicPtr<Header>,
}

impl<'a, K, V> LockedList<'a, K, V> {
    pub(crate) fn entries(&self) -> &Vec<(K, V)> {
        unsafe { self.list.entries() }
    }

    pub(crate) fn entries_mut(&mut self) -> &mut Vec<(K, V)> {
        unsafe { self.list.entries_mut() }
    }

    fn as_ptr(&self) -> *mut ElementList<K, V> {
        self.list as *const ElementList<K, V> as *mut ElementList<K, V>
    }
}

impl<'a, K: Send, V: Send> LockedList<'a, K, V> {
    /// Unlinks the (empty) list from its slot, marks it `GARBAGE`, and hands
    /// it to the epoch manager.
    fn retire(self, tok: &Token) {
        debug_assert!(self.entries().is_empty());
        let me = self.as_ptr();
        let unlinked = self
            .slot
            .compare_exchange(me as *mut Header, ptr::null_mut(), Ordering::AcqRel, Ordering::Acquire);
        // Only the lock holder may change a slot that refers to an element list.
        debug_assert!(unlinked.is_ok());
        self.list.mark_garbage();
        std::mem::forget(self);
        unsafe { tok.defer_destroy(me) };
    }
}

impl<K, V> Drop for LockedList<'_, K, V> {
    fn drop(&mut self) {
        self.list.unlock();
    }
}

/// What a slot currently holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Empty,
    Elements { len: usize, state: LockState },
    Pointers { depth: usize, size: usize },
}

/// Result of a full walk of one locale's tree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TableCensus {
    pub elements: usize,
    pub element_lists: usize,
    /// Inner pointer lists, not counting the root.
    pub pointer_lists: usize,
    /// Depth of the deepest pointer list (0 when only the root exists).
    pub max_depth: usize,
    pub longest_list: usize,
    /// Element lists whose `parent` does not match the list containing them.
    pub broken_parent_links: usize,
}

impl TableCensus {
    pub fn merge(&mut self, other: &TableCensus) {
        self.elements += other.elements;
        self.element_lists += other.element_lists;
        self.pointer_lists += other.pointer_lists;
        self.max_depth = self.max_depth.max(other.max_depth);
        self.longest_list = self.longest_list.max(other.longest_list);
        self.broken_parent_links += other.broken_parent_links;
    }
}

/// One locale's share of the map: the block of root slots it owns and the
/// subtrees below them.
pub struct LocaleTable<K, V> {
    locale: LocaleId,
    config: MapConfig,
    dist: BlockDistribution,
    root: Box<PointerList>,
    seed_rng: Mutex<ChaCha8Rng>,
    _marker: PhantomData<(K, V)>,
}

impl<K, V> fmt::Debug for LocaleTable<K, V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocaleTable")
            .field("locale", &self.locale)
            .field("root_slots", &self.root.len())
            .finish()
    }
}

impl<K: MapKey, V: MapValue> LocaleTable<K, V> {
    pub fn new(locale: LocaleId, dist: BlockDistribution, config: MapConfig) -> Self {
        debug_assert_eq!(dist.per_locale(), config.root_buckets_per_locale);
        let root = Box::new(PointerList::new(
            ptr::null(),
            config.root_seed,
            0,
            dist.per_locale(),
        ));
        let seed_rng = ChaCha8Rng::seed_from_u64(config.root_seed ^ locale as u64);
        LocaleTable {
            locale,
            config,
            dist,
            root,
            seed_rng: Mutex::new(seed_rng),
            _marker: PhantomData,
        }
    }

    pub fn locale(&self) -> LocaleId {
        self.locale
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub(crate) fn root(&self) -> &PointerList {
        &self.root
    }

    /// Global root slot of `key`.
    pub fn root_index(&self, key: &K) -> usize {
        (hash_key(key, self.config.root_seed) % self.dist.total_slots() as u64) as usize
    }

    fn local_root_index(&self, key: &K) -> usize {
        let idx = self.root_index(key);
        debug_assert_eq!(
            self.dist.locale_of(idx),
            self.locale,
            "key routed to a locale that does not own it"
        );
        idx - self.dist.local_range(self.locale).start
    }

    /// Descends to the element list responsible for `key` and locks it.
    ///
    /// Returns `None` only for lookups (`is_insert == false`) whose path ends
    /// at an empty slot. Inserts always get a list, creating or splitting
    /// nodes along the way.
    pub(crate) fn get_elist<'t>(
        &'t self,
        key: &K,
        is_insert: bool,
        tok: &Token,
    ) -> Option<LockedList<'t, K, V>> {
        debug_assert!(tok.is_pinned(), "descent without a pinned token");
        let mut backoff = Backoff::new();
        'restart: loop {
            let mut plist: &PointerList = &self.root;
            let mut idx = self.local_root_index(key);
            loop {
                let slot = plist.slot(idx);
                let cur = slot.load(Ordering::Acquire);
                if cur.is_null() {
                    if !is_insert {
                        return None;
                    }
                    let fresh = ElementList::<K, V>::alloc(plist, E_LOCK, self.config.bucket_num_elements);
                    lock_audit::acquired();
                    match slot.compare_exchange(
                        ptr::null_mut(),
                        fresh as *mut Header,
                        Ordering::AcqRel,
                        Ordering::Acquire,
                    ) {
                        Ok(_) => {
                            return Some(LockedList {
                                list: unsafe { &*fresh },
                                slot,
                            })
                        }
                        Err(_) => {
                            lock_audit::released();
                            unsafe { tok.defer_destroy(fresh) };
                            continue 'restart;
                        }
                    }
                }
                match unsafe { classify::<K, V>(cur) } {
                    Node::Pointers(next) => {
                        idx = next.index_of(key);
                        plist = next;
                    }
                    Node::Elements(list) => {
                        if !list.try_lock() {
                            backoff.snooze();
                            continue 'restart;
                        }
                        let locked = LockedList { list, slot };
                        if !(is_insert && self.must_split(&locked, plist, key)) {
                            return Some(locked);
                        }
                        let child = self.split(locked, plist, tok);
                        idx = child.index_of(key);
                        plist = child;
                    }
                }
            }
        }
    }

    fn must_split(&self, locked: &LockedList<'_, K, V>, parent: &PointerList, key: &K) -> bool {
        let entries = locked.entries();
        entries.len() >= self.config.bucket_num_elements
            && parent.depth < self.config.max_depth
            && !entries.iter().any(|(k, _)| k == key)
    }

    /// Rehashes a full, locked element list into a new pointer list one level
    /// below `parent`, publishes it in the list's slot, and retires the list.
    fn split<'t>(&'t self, mut locked: LockedList<'t, K, V>, parent: &PointerList, tok: &Token) -> &'t PointerList {
        let depth = parent.depth + 1;
        let size = self.config.level_size(depth);
        let seed = self.seed_rng.lock().expect("seed rng poisoned").next_u64();
        let child = Box::into_raw(Box::new(PointerList::new(parent, seed, depth, size)));
        let child_ref: &'t PointerList = unsafe { &*child };
        for (k, v) in std::mem::take(locked.entries_mut()) {
            let slot = child_ref.slot(child_ref.index_of(&k));
            let mut cur = slot.load(Ordering::Relaxed) as *mut ElementList<K, V>;
            if cur.is_null() {
                cur = ElementList::alloc(child, E_AVAIL, self.config.bucket_num_elements);
                slot.store(cur as *mut Header, Ordering::Relaxed);
            }
            // unpublished, so exclusively ours
            unsafe { (*cur).entries.get_mut().push((k, v)) };
        }
        locked.slot.store(child as *mut Header, Ordering::Release);
        let old = locked.as_ptr();
        locked.list.mark_garbage();
        std::mem::forget(locked);
        unsafe { tok.defer_destroy(old) };
        child_ref
    }

    /// Maps `key` to `value`, replacing any previous value.
    pub fn insert_local(&self, key: K, value: V, tok: &Token) {
        let mut list = self
            .get_elist(&key, true, tok)
            .expect("insert descent always yields a list");
        let entries = list.entries_mut();
        match entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => entries.push((key, value)),
        }
    }

    pub fn find_local(&self, key: &K, tok: &Token) -> Option<V> {
        let list = self.get_elist(key, false, tok)?;
        list.entries()
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
    }

    /// Removes `key` if present. An emptied list is unlinked and retired.
    pub fn erase_local(&self, key: &K, tok: &Token) {
        let Some(mut list) = self.get_elist(key, false, tok) else {
            return;
        };
        let entries = list.entries_mut();
        if let Some(pos) = entries.iter().position(|(k, _)| k == key) {
            entries.swap_remove(pos);
        }
        if list.entries().is_empty() {
            list.retire(tok);
        }
    }

    /// What root slot `local_idx` (0-based within this locale) holds right now.
    pub fn root_slot_kind(&self, local_idx: usize, tok: &Token) -> SlotKind {
        let _pin = tok.pin_guard();
        let p = self.root.slot(local_idx).load(Ordering::Acquire);
        if p.is_null() {
            return SlotKind::Empty;
        }
        match unsafe { classify::<K, V>(p) } {
            Node::Pointers(pl) => SlotKind::Pointers {
                depth: pl.depth,
                size: pl.len(),
            },
            Node::Elements(el) => {
                let state = el.state();
                // length is only stable under the lock; report what we can see
                let len = if el.try_lock() {
                    let n = unsafe { el.entries().len() };
                    el.unlock();
                    n
                } else {
                    0
                };
                SlotKind::Elements { len, state }
            }
        }
    }

    /// Walks the whole tree, locking each list while counting it. Exact only
    /// when no operation runs concurrently.
    pub fn census(&self, tok: &Token) -> TableCensus {
        let _pin = tok.pin_guard();
        let mut out = TableCensus::default();
        self.census_rec(&self.root, &mut out);
        out
    }

    fn census_rec(&self, plist: &PointerList, out: &mut TableCensus) {
        for idx in 0..plist.len() {
            self.with_slot(plist, idx, |node| match node {
                Node::Pointers(child) => {
                    out.pointer_lists += 1;
                    out.max_depth = out.max_depth.max(child.depth);
                    self.census_rec(child, out);
                }
                Node::Elements(list) => {
                    let n = unsafe { list.entries().len() };
                    out.elements += n;
                    out.element_lists += 1;
                    out.longest_list = out.longest_list.max(n);
                    if !ptr::eq(list.parent, plist) {
                        out.broken_parent_links += 1;
                    }
                }
            });
        }
    }

    /// Every pair in this locale's tree. Same caveat as [`census`](Self::census).
    pub fn entries(&self, tok: &Token) -> Vec<(K, V)> {
        let _pin = tok.pin_guard();
        let mut out = Vec::new();
        self.entries_rec(&self.root, &mut out);
        out
    }

    fn entries_rec(&self, plist: &PointerList, out: &mut Vec<(K, V)>) {
        for idx in 0..plist.len() {
            self.with_slot(plist, idx, |node| match node {
                Node::Pointers(child) => self.entries_rec(child, out),
                Node::Elements(list) => out.extend(unsafe { list.entries() }.iter().cloned()),
            });
        }
    }

    /// Runs `f` on slot `idx` of `plist`; element lists are locked for the
    /// duration of the call (pointer lists are passed straight through, so the
    /// callback may recurse without holding a lock).
    fn with_slot<F>(&self, plist: &PointerList, idx: usize, mut f: F)
    where
        F: FnMut(Node<'_, K, V>),
    {
        let mut backoff = Backoff::new();
        loop {
            let p = plist.slot(idx).load(Ordering::Acquire);
            if p.is_null() {
                return;
            }
            match unsafe { classify::<K, V>(p) } {
                Node::Pointers(child) => return f(Node::Pointers(child)),
                Node::Elements(list) => {
                    if list.try_lock() {
                        f(Node::Elements(list));
                        list.unlock();
                        return;
                    }
                    backoff.snooze();
                }
            }
        }
    }
}

impl<K, V> Drop for LocaleTable<K, V> {
    fn drop(&mut self) {
        unsafe fn free_children<K, V>(plist: &PointerList) {
            for slot in plist.buckets.iter() {
                let p = slot.load(Ordering::Relaxed);
                if p.is_null() {
                    continue;
                }
                match classify::<K, V>(p) {
                    Node::Pointers(child) => {
                        free_children::<K, V>(child);
                        drop(Box::from_raw(p as *mut PointerList));
                    }
                    Node::Elements(_) => drop(Box::from_raw(p as *mut ElementList<K, V>)),
                }
            }
        }
        unsafe { free_children::<K, V>(&self.root) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebr::EpochManager;
    use std::collections::{HashMap, HashSet};

    fn table(config: MapConfig) -> (LocaleTable<u64, u64>, EpochManager) {
        let dist = BlockDistribution::new(1, config.root_buckets_per_locale);
        (LocaleTable::new(0, dist, config), EpochManager::new(1))
    }

    #[test]
    fn hash_is_deterministic() {
        for k in 0..1000u64 {
            assert_eq!(hash_key(&k, 7), hash_key(&k, 7));
        }
        assert_ne!(hash_key(&1u64, 1), hash_key(&1u64, 2));
    }

    #[test]
    fn hash_spreads_keys_evenly() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut load = vec![0usize; 1024];
        let n = 100_000;
        for _ in 0..n {
            let k: u64 = rng.gen();
            load[(hash_key(&k, 42) % 1024) as usize] += 1;
        }
        let mean = n as f64 / 1024.0;
        let max = *load.iter().max().unwrap() as f64;
        assert!(max < 3.0 * mean, "max load {max} vs mean {mean}");
    }

    #[test]
    fn seeds_decorrelate_levels() {
        // For independent seeds, P[same slot] = 1/slots.
        let slots = 64u64;
        let n = 200_000u64;
        let same = (0..n)
            .filter(|k| hash_key(k, 11) % slots == hash_key(k, 12) % slots)
            .count() as f64;
        let expected = n as f64 / slots as f64;
        assert!((same - expected).abs() < 0.1 * expected, "{same} vs {expected}");
    }

    #[test]
    fn empty_table_lookup_is_absent() {
        let (t, m) = table(MapConfig::default());
        let tok = m.get_token(0);
        tok.pin();
        assert!(t.get_elist(&5, false, &tok).is_none());
        assert_eq!(t.find_local(&5, &tok), None);
        tok.unpin();
    }

    #[test]
    fn insert_descent_installs_a_locked_list() {
        let (t, m) = table(MapConfig::default());
        let tok = m.get_token(0);
        tok.pin();
        let idx = t.local_root_index(&5);
        {
            let list = t.get_elist(&5, true, &tok).unwrap();
            assert!(list.entries().is_empty());
            assert_eq!(lock_audit::held_by_current_thread(), 1);
            let p = t.root().slot(idx).load(Ordering::Acquire);
            assert_eq!(unsafe { (*p).state() }, LockState::Locked);
        }
        assert_eq!(lock_audit::held_by_current_thread(), 0);
        tok.unpin();
        assert_eq!(
            t.root_slot_kind(idx, &tok),
            SlotKind::Elements {
                len: 0,
                state: LockState::Available
            }
        );
    }

    #[test]
    fn insert_find_update() {
        let (t, m) = table(MapConfig::default());
        let tok = m.get_token(0);
        tok.pin();
        t.insert_local(1, 10, &tok);
        assert_eq!(t.find_local(&1, &tok), Some(10));
        t.insert_local(1, 20, &tok);
        assert_eq!(t.find_local(&1, &tok), Some(20));
        tok.unpin();
        assert_eq!(t.census(&tok).elements, 1);
    }

    #[test]
    fn erase_swaps_with_last() {
        // one root slot so every key shares a list
        let cfg = MapConfig {
            root_buckets_per_locale: 1,
            ..MapConfig::default()
        };
        let (t, m) = table(cfg);
        let tok = m.get_token(0);
        tok.pin();
        for k in [1, 2, 3] {
            t.insert_local(k, k * 100, &tok);
        }
        t.erase_local(&1, &tok);
        {
            let list = t.get_elist(&2, false, &tok).unwrap();
            assert_eq!(list.entries(), &vec![(3, 300), (2, 200)]);
        }
        assert_eq!(t.find_local(&2, &tok), Some(200));
        assert_eq!(t.find_local(&3, &tok), Some(300));
        assert_eq!(t.find_local(&1, &tok), None);
        tok.unpin();
    }

    #[test]
    fn erasing_last_key_retires_the_list_once() {
        let (t, m) = table(MapConfig::default());
        let tok = m.get_token(0);
        tok.pin();
        t.insert_local(9, 9, &tok);
        let idx = t.local_root_index(&9);
        t.erase_local(&9, &tok);
        t.erase_local(&9, &tok);
        tok.unpin();
        assert_eq!(t.root_slot_kind(idx, &tok), SlotKind::Empty);
        assert_eq!(m.retired(), 1);
        m.advance_quiescent(3);
        assert_eq!(m.reclaimed(), 1);
        // the slot is usable again
        tok.pin();
        t.insert_local(9, 1, &tok);
        assert_eq!(t.find_local(&9, &tok), Some(1));
        tok.unpin();
    }

    #[test]
    fn erase_absent_is_noop() {
        let (t, m) = table(MapConfig::default());
        let tok = m.get_token(0);
        tok.pin();
        t.insert_local(1, 1, &tok);
        t.erase_local(&2, &tok);
        assert_eq!(t.find_local(&1, &tok), Some(1));
        tok.unpin();
        assert_eq!(m.retired(), 0);
    }

    #[test]
    fn overflowing_a_root_slot_splits_it() {
        let cfg = MapConfig::default();
        let (t, m) = table(cfg.clone());
        let tok = m.get_token(0);
        // find bucket_num_elements + 1 keys sharing a root slot
        let target = t.root_index(&0u64);
        let keys: Vec<u64> = (0u64..)
            .filter(|k| t.root_index(k) == target)
            .take(cfg.bucket_num_elements + 1)
            .collect();
        tok.pin();
        for &k in &keys[..cfg.bucket_num_elements] {
            t.insert_local(k, k, &tok);
        }
        tok.unpin();
        assert!(matches!(
            t.root_slot_kind(target, &tok),
            SlotKind::Elements { len: 8, .. }
        ));
        tok.pin();
        t.insert_local(keys[cfg.bucket_num_elements], 0, &tok);
        tok.unpin();
        assert_eq!(
            t.root_slot_kind(target, &tok),
            SlotKind::Pointers { depth: 1, size: 1024 }
        );
        tok.pin();
        for &k in &keys[..cfg.bucket_num_elements] {
            assert_eq!(t.find_local(&k, &tok), Some(k));
        }
        tok.unpin();
        let c = t.census(&tok);
        assert_eq!(c.elements, keys.len());
        assert_eq!(c.pointer_lists, 1);
        assert_eq!(c.broken_parent_links, 0);
        // the split list was retired
        assert_eq!(m.retired(), 1);
    }

    #[test]
    fn full_list_at_max_depth_grows() {
        let cfg = MapConfig {
            root_buckets_per_locale: 1,
            inner_base_size: 1,
            max_depth: 2,
            bucket_num_elements: 2,
            ..MapConfig::default()
        };
        let (t, m) = table(cfg);
        let tok = m.get_token(0);
        tok.pin();
        for k in 0..50u64 {
            t.insert_local(k, k, &tok);
        }
        for k in 0..50u64 {
            assert_eq!(t.find_local(&k, &tok), Some(k));
        }
        tok.unpin();
        let c = t.census(&tok);
        assert_eq!(c.elements, 50);
        assert_eq!(c.max_depth, 2);
        // the deepest level has two slots, so at most two lists share 50 keys
        assert!(c.element_lists <= 2);
        assert!(c.longest_list >= 25);
    }

    #[test]
    fn many_inserts_census() {
        let (t, m) = table(MapConfig::default());
        let tok = m.get_token(0);
        tok.pin();
        for k in 0..100_000u64 {
            t.insert_local(k, k ^ 0xff, &tok);
        }
        for k in 0..100_000u64 {
            assert_eq!(t.find_local(&k, &tok), Some(k ^ 0xff));
        }
        tok.unpin();
        let c = t.census(&tok);
        assert_eq!(c.elements, 100_000);
        assert!(c.longest_list <= 8);
        let keys: HashSet<u64> = t.entries(&tok).into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys.len(), 100_000);
    }

    #[test]
    fn lookups_never_split() {
        let cfg = MapConfig {
            root_buckets_per_locale: 1,
            ..MapConfig::default()
        };
        let (t, m) = table(cfg);
        let tok = m.get_token(0);
        tok.pin();
        for k in 0..8u64 {
            t.insert_local(k, k, &tok);
        }
        for k in 0..100u64 {
            t.find_local(&k, &tok);
            t.erase_local(&(k + 1000), &tok);
        }
        tok.unpin();
        assert!(matches!(t.root_slot_kind(0, &tok), SlotKind::Elements { len: 8, .. }));
    }

    #[test]
    fn concurrent_disjoint_inserts_lose_nothing() {
        let cfg = MapConfig {
            root_buckets_per_locale: 8,
            inner_base_size: 4,
            bucket_num_elements: 4,
            max_depth: 6,
            ..MapConfig::default()
        };
        let (t, m) = table(cfg);
        let threads = 8u64;
        let per = 5_000u64;
        std::thread::scope(|s| {
            for tid in 0..threads {
                let t = &t;
                let m = &m;
                s.spawn(move || {
                    let tok = m.get_token(0);
                    for i in 0..per {
                        tok.pin();
                        t.insert_local(tid * per + i, tid, &tok);
                        tok.unpin();
                    }
                });
            }
        });
        let tok = m.get_token(0);
        let got: HashMap<u64, u64> = t.entries(&tok).into_iter().collect();
        assert_eq!(got.len() as u64, threads * per);
        for (k, v) in got {
            assert_eq!(k / per, v);
        }
        assert_eq!(t.census(&tok).broken_parent_links, 0);
    }

    #[test]
    fn concurrent_insert_erase_reclaims_everything() {
        let cfg = MapConfig {
            root_buckets_per_locale: 4,
            inner_base_size: 2,
            bucket_num_elements: 2,
            max_depth: 5,
            ..MapConfig::default()
        };
        let (t, m) = table(cfg);
        std::thread::scope(|s| {
            for tid in 0..4u64 {
                let t = &t;
                let m = &m;
                s.spawn(move || {
                    let tok = m.get_token(0);
                    for round in 0..2_000u64 {
                        let k = (round * 7 + tid) % 64;
                        tok.pin();
                        if round % 2 == 0 {
                            t.insert_local(k, round, &tok);
                        } else {
                            t.erase_local(&k, &tok);
                        }
                        tok.unpin();
                    }
                });
            }
        });
        m.advance_quiescent(3);
        assert_eq!(m.retired(), m.reclaimed());
        assert_eq!(lock_audit::violations(), 0);
    }
}
