//! Epoch-based memory reclamation.
//!
//! Tasks register a [`Token`] and pin it around every access to shared nodes.
//! Unlinked objects are handed to [`Token::defer_destroy`], which files them in
//! the limbo list of the current global epoch. The global epoch moves from `e`
//! to `e + 1` only when every pinned token announces `e`; at that point the
//! list filed under `e - 1` can no longer be reached by anyone and is freed in
//! one sweep. Three rotating lists cover the epochs that may still be live.
//!
//! The global epoch is a single counter shared by all locales; each locale
//! keeps its own registry of tokens and the advance scan walks all of them.

use std::fmt;
use std::sync::atomic::{fence, AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::runtime::LocaleId;

const UNPINNED: u64 = u64::MAX;
const LIMBO_LISTS: usize = 3;

/// Default number of retirements (and of unpins per token) between
/// opportunistic advance attempts.
pub const DEFAULT_ADVANCE_INTERVAL: u64 = 64;

struct Retired {
    ptr: *mut (),
    destroy: unsafe fn(*mut ()),
}

// Retired objects are exclusively owned by the limbo list.
unsafe impl Send for Retired {}

impl Retired {
    unsafe fn reclaim(self) {
        (self.destroy)(self.ptr)
    }
}

unsafe fn destroy_boxed<T>(ptr: *mut ()) {
    drop(Box::from_raw(ptr as *mut T));
}

struct Participant {
    epoch: AtomicU64,
    in_use: AtomicBool,
}

struct ManagerInner {
    global: AtomicU64,
    registries: Vec<Mutex<Vec<Arc<Participant>>>>,
    limbo: [Mutex<Vec<Retired>>; LIMBO_LISTS],
    advance_lock: Mutex<()>,
    retired: AtomicU64,
    reclaimed: AtomicU64,
    retire_ticks: AtomicU64,
    advance_interval: u64,
}

impl ManagerInner {
    fn pending(&self) -> u64 {
        self.retired.load(Ordering::Acquire) - self.reclaimed.load(Ordering::Acquire)
    }

    fn try_advance(&self) -> bool {
        let Ok(_serial) = self.advance_lock.try_lock() else {
            return false;
        };
        let current = self.global.load(Ordering::SeqCst);
        for registry in &self.registries {
            let tokens = registry.lock().expect("token registry poisoned");
            for p in tokens.iter() {
                let e = p.epoch.load(Ordering::SeqCst);
                if e != UNPINNED && e != current {
                    return false;
                }
            }
        }
        let next = current + 1;
        self.global.store(next, Ordering::SeqCst);
        // Everything filed under `next - 2` was retired before any currently
        // pinned token could have started its critical section.
        let stale = (next + 1) % LIMBO_LISTS as u64;
        let batch = std::mem::take(&mut *self.limbo[stale as usize].lock().expect("limbo poisoned"));
        let n = batch.len() as u64;
        for r in batch {
            unsafe { r.reclaim() };
        }
        self.reclaimed.fetch_add(n, Ordering::AcqRel);
        true
    }
}

impl Drop for ManagerInner {
    fn drop(&mut self) {
        for list in &self.limbo {
            let batch = std::mem::take(&mut *list.lock().unwrap_or_else(|e| e.into_inner()));
            let n = batch.len() as u64;
            for r in batch {
                unsafe { r.reclaim() };
            }
            self.reclaimed.fetch_add(n, Ordering::AcqRel);
        }
    }
}

/// Reclamation counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EpochStats {
    pub global_epoch: u64,
    pub retired: u64,
    pub reclaimed: u64,
    pub registered_tokens: usize,
    pub pinned_tokens: usize,
}

/// Cluster-wide epoch manager with one token registry per locale.
#[derive(Clone)]
pub struct EpochManager {
    inner: Arc<ManagerInner>,
}

impl fmt::Debug for EpochManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EpochManager").field("stats", &self.stats()).finish()
    }
}

impl EpochManager {
    pub fn new(num_locales: usize) -> Self {
        Self::with_advance_interval(num_locales, DEFAULT_ADVANCE_INTERVAL)
    }

    pub fn with_advance_interval(num_locales: usize, advance_interval: u64) -> Self {
        assert!(num_locales > 0);
        EpochManager {
            inner: Arc::new(ManagerInner {
                global: AtomicU64::new(0),
                registries: (0..num_locales).map(|_| Mutex::new(Vec::new())).collect(),
                limbo: Default::default(),
                advance_lock: Mutex::new(()),
                retired: AtomicU64::new(0),
                reclaimed: AtomicU64::new(0),
                retire_ticks: AtomicU64::new(0),
                advance_interval: advance_interval.max(1),
            }),
        }
    }

    /// Registers a new unpinned token in `locale`'s registry.
    pub fn get_token(&self, locale: LocaleId) -> Token {
        let mut registry = self.inner.registries[locale]
            .lock()
            .expect("token registry poisoned");
        let reused = registry.iter().find(|p| {
            p.in_use
                .compare_exchange(false, true, Ordering::AcqRel, Ordering::Relaxed)
                .is_ok()
        });
        let slot = match reused {
            Some(p) => Arc::clone(p),
            None => {
                let p = Arc::new(Participant {
                    epoch: AtomicU64::new(UNPINNED),
                    in_use: AtomicBool::new(true),
                });
                registry.push(Arc::clone(&p));
                p
            }
        };
        Token {
            slot,
            manager: Arc::clone(&self.inner),
            depth: AtomicU32::new(0),
            unpins: AtomicU64::new(0),
        }
    }

    pub fn global_epoch(&self) -> u64 {
        self.inner.global.load(Ordering::SeqCst)
    }

    /// Advances the global epoch if no token is pinned in an earlier epoch,
    /// reclaiming the list that just became two epochs stale.
    pub fn try_advance(&self) -> bool {
        self.inner.try_advance()
    }

    /// Calls [`try_advance`](Self::try_advance) until it has succeeded `n`
    /// times or refuses; returns the number of successful advances.
    pub fn advance_quiescent(&self, n: usize) -> usize {
        (0..n).take_while(|_| self.try_advance()).count()
    }

    pub fn retired(&self) -> u64 {
        self.inner.retired.load(Ordering::Acquire)
    }

    pub fn reclaimed(&self) -> u64 {
        self.inner.reclaimed.load(Ordering::Acquire)
    }

    pub fn stats(&self) -> EpochStats {
        let mut registered = 0;
        let mut pinned = 0;
        for registry in &self.inner.registries {
            let tokens = registry.lock().expect("token registry poisoned");
            for p in tokens.iter() {
                if p.in_use.load(Ordering::Acquire) {
                    registered += 1;
                }
                if p.epoch.load(Ordering::Acquire) != UNPINNED {
                    pinned += 1;
                }
            }
        }
        EpochStats {
            global_epoch: self.global_epoch(),
            retired: self.retired(),
            reclaimed: self.reclaimed(),
            registered_tokens: registered,
            pinned_tokens: pinned,
        }
    }
}

/// Participant handle. Owned by one task at a time; may be lent to work the
/// owner ships to another locale while it waits for the result.
pub struct Token {
    slot: Arc<Participant>,
    manager: Arc<ManagerInner>,
    depth: AtomicU32,
    unpins: AtomicU64,
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Token")
            .field("pinned_epoch", &self.pinned_epoch())
            .field("depth", &self.depth.load(Ordering::Relaxed))
            .finish()
    }
}

impl Token {
    /// Enters the current global epoch. Nested pins only bump a depth counter.
    pub fn pin(&self) {
        if self.depth.fetch_add(1, Ordering::Relaxed) > 0 {
            return;
        }
        let global = &self.manager.global;
        let mut e = global.load(Ordering::SeqCst);
        loop {
            self.slot.epoch.store(e, Ordering::SeqCst);
            fence(Ordering::SeqCst);
            let now = global.load(Ordering::SeqCst);
            if now == e {
                break;
            }
            e = now;
        }
    }

    /// Leaves the epoch once the outermost pin is released.
    pub fn unpin(&self) {
        let depth = self.depth.load(Ordering::Relaxed);
        debug_assert!(depth > 0, "unpin of a token that is not pinned");
        if depth == 0 {
            return;
        }
        self.depth.store(depth - 1, Ordering::Relaxed);
        if depth > 1 {
            return;
        }
        self.slot.epoch.store(UNPINNED, Ordering::SeqCst);
        let n = self.unpins.fetch_add(1, Ordering::Relaxed) + 1;
        if n.is_multiple_of(self.manager.advance_interval) && self.manager.pending() > 0 {
            self.manager.try_advance();
        }
    }

    /// Pins and returns a guard that unpins on drop.
    pub fn pin_guard(&self) -> PinGuard<'_> {
        self.pin();
        PinGuard { token: self }
    }

    pub fn is_pinned(&self) -> bool {
        self.depth.load(Ordering::Relaxed) > 0
    }

    /// Epoch this token announced when it was pinned, if pinned.
    pub fn pinned_epoch(&self) -> Option<u64> {
        match self.slot.epoch.load(Ordering::Acquire) {
            UNPINNED => None,
            e => Some(e),
        }
    }

    /// Hands a `Box`-allocated object to the epoch manager.
    ///
    /// # Safety
    ///
    /// `ptr` must come from `Box::<T>::into_raw`, must already be unreachable
    /// for tasks that pin after this call, and must not be retired twice.
    pub unsafe fn defer_destroy<T: Send>(&self, ptr: *mut T) {
        self.retire(Retired {
            ptr: ptr as *mut (),
            destroy: destroy_boxed::<T>,
        });
    }

    /// Defers dropping `object` until no pinned task can observe the epoch it
    /// was retired in.
    pub fn defer_drop<T: Send + 'static>(&self, object: T) {
        let ptr = Box::into_raw(Box::new(object));
        unsafe { self.defer_destroy(ptr) }
    }

    fn retire(&self, r: Retired) {
        assert!(self.is_pinned(), "deferred deletion requires a pinned token");
        let m = &*self.manager;
        // The current global epoch is at most one ahead of our pinned epoch.
        let e = m.global.load(Ordering::SeqCst);
        m.limbo[(e % LIMBO_LISTS as u64) as usize]
            .lock()
            .expect("limbo poisoned")
            .push(r);
        m.retired.fetch_add(1, Ordering::AcqRel);
        if (m.retire_ticks.fetch_add(1, Ordering::Relaxed) + 1).is_multiple_of(m.advance_interval) {
            m.try_advance();
        }
    }
}

impl Drop for Token {
    fn drop(&mut self) {
        debug_assert!(!self.is_pinned() || std::thread::panicking(), "token dropped while pinned");
        self.slot.epoch.store(UNPINNED, Ordering::SeqCst);
        self.slot.in_use.store(false, Ordering::Release);
    }
}

pub struct PinGuard<'a> {
    token: &'a Token,
}

impl Drop for PinGuard<'_> {
    fn drop(&mut self) {
        self.token.unpin();
    }
}
