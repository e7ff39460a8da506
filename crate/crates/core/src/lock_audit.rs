//! Held-lock instrumentation.
//!
//! Every element-list lock acquisition and release goes through here. A
//! thread that would hold two list locks at once is counted as a violation of
//! the one-lock-per-operation discipline.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

static VIOLATIONS: AtomicU64 = AtomicU64::new(0);
static MAX_HELD: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static HELD: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn acquired() {
    let held = HELD.with(|h| {
        let n = h.get() + 1;
        h.set(n);
        n
    });
    if held > 1 {
        VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        MAX_HELD.fetch_max(held, Ordering::Relaxed);
    }
}

pub(crate) fn released() {
    HELD.with(|h| {
        debug_assert!(h.get() > 0, "released a list lock that was never acquired");
        h.set(h.get().saturating_sub(1));
    });
}

/// List locks currently held by the calling thread.
pub fn held_by_current_thread() -> u64 {
    HELD.with(|h| h.get())
}

/// Process-wide count of acquisitions made while another list lock was held.
pub fn violations() -> u64 {
    VIOLATIONS.load(Ordering::Relaxed)
}

/// Largest number of simultaneously held locks observed on one thread when a
/// violation happened (0 if none ever happened).
pub fn max_held_on_violation() -> u64 {
    MAX_HELD.load(Ordering::Relaxed)
}
