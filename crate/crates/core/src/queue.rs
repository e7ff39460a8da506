//! Lock-free FIFO queue (Michael-Scott) with epoch-based node reclamation.
//!
//! `head` always points at a dummy node; the first real element is
//! `head.next`. A dequeuer that swings `head` forward takes the value out of
//! the new dummy and retires the old one through its token.

use std::mem::MaybeUninit;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU64, Ordering};

use crate::ebr::Token;

struct Node<T> {
    value: MaybeUninit<T>,
    next: AtomicPtr<Node<T>>,
}

impl<T> Node<T> {
    fn alloc(value: MaybeUninit<T>) -> *mut Node<T> {
        Box::into_raw(Box::new(Node {
            value,
            next: AtomicPtr::new(ptr::null_mut()),
        }))
    }
}

pub struct LockFreeQueue<T> {
    head: AtomicPtr<Node<T>>,
    tail: AtomicPtr<Node<T>>,
    enqueued: AtomicU64,
    dequeued: AtomicU64,
}

unsafe impl<T: Send> Send for LockFreeQueue<T> {}
unsafe impl<T: Send> Sync for LockFreeQueue<T> {}

impl<T: Send> Default for LockFreeQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Send> LockFreeQueue<T> {
    pub fn new() -> Self {
        let dummy = Node::alloc(MaybeUninit::uninit());
        LockFreeQueue {
            head: AtomicPtr::new(dummy),
            tail: AtomicPtr::new(dummy),
            enqueued: AtomicU64::new(0),
            dequeued: AtomicU64::new(0),
        }
    }

    pub fn enqueue(&self, value: T, tok: &Token) {
        let node = Node::alloc(MaybeUninit::new(value));
        let _pin = tok.pin_guard();
        loop {
            let tail = self.tail.load(Ordering::Acquire);
            // SAFETY: tail is reachable and we are pinned.
            let next = unsafe { (*tail).next.load(Ordering::Acquire) };
            if tail != self.tail.load(Ordering::Acquire) {
                continue;
            }
            if next.is_null() {
                let linked = unsafe {
                    (*tail)
                        .next
                        .compare_exchange(ptr::null_mut(), node, Ordering::AcqRel, Ordering::Acquire)
                        .is_ok()
                };
                if linked {
                    let _ = self
                        .tail
                        .compare_exchange(tail, node, Ordering::AcqRel, Ordering::Acquire);
                    self.enqueued.fetch_add(1, Ordering::Relaxed);
                    return;
                }
            } else {
                // help a lagging tail
                let _ = self
                    .tail
                    .compare_exchange(tail, next, Ordering::AcqRel, Ordering::Acquire);
            }
        }
    }

    pub fn dequeue(&self, tok: &Token) -> Option<T> {
        let _pin = tok.pin_guard();
        loop {
            let head = self.head.load(Ordering::Acquire);
            let tail = self.tail.load(Ordering::Acquire);
            // SAFETY: head is reachable and we are pinned.
            let next = unsafe { (*head).next.load(Ordering::Acquire) };
            if head != self.head.load(Ordering::Acquire) {
                continue;
            }
            if next.is_null() {
                return None;
            }
            if head == tail {
                let _ = self
                    .tail
                    .compare_exchange(tail, next, Ordering::AcqRel, Ordering::Acquire);
                continue;
            }
            if self
                .head
                .compare_exchange(head, next, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                // Only the winner reads the value; `next` is now the dummy and
                // its value slot is treated as uninitialised from here on.
                let value = unsafe { ptr::read((*next).value.as_ptr()) };
                unsafe { tok.defer_destroy(head) };
                self.dequeued.fetch_add(1, Ordering::Relaxed);
                return Some(value);
            }
        }
    }

    /// Whether the queue held no element at the moment of the check.
    pub fn is_empty(&self, tok: &Token) -> bool {
        let _pin = tok.pin_guard();
        let head = self.head.load(Ordering::Acquire);
        unsafe { (*head).next.load(Ordering::Acquire).is_null() }
    }

    pub fn enqueued(&self) -> u64 {
        self.enqueued.load(Ordering::Relaxed)
    }

    pub fn dequeued(&self) -> u64 {
        self.dequeued.load(Ordering::Relaxed)
    }
}

impl<T> Drop for LockFreeQueue<T> {
    fn drop(&mut self) {
        let head = *self.head.get_mut();
        // SAFETY: exclusive access; every node after the dummy holds a value.
        unsafe {
            let mut next = (*head).next.load(Ordering::Relaxed);
            drop(Box::from_raw(head));
            while !next.is_null() {
                let node = Box::from_raw(next);
                next = node.next.load(Ordering::Relaxed);
                drop(node.value.assume_init());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebr::EpochManager;
    use std::collections::HashSet;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    #[test]
    fn fifo_order_single_thread() {
        let m = EpochManager::new(1);
        let tok = m.get_token(0);
        let q = LockFreeQueue::new();
        assert!(q.is_empty(&tok));
        assert_eq!(q.dequeue(&tok), None);
        for i in 0..100 {
            q.enqueue(i, &tok);
        }
        assert!(!q.is_empty(&tok));
        for i in 0..100 {
            assert_eq!(q.dequeue(&tok), Some(i));
        }
        assert_eq!(q.dequeue(&tok), None);
        assert_eq!((q.enqueued(), q.dequeued()), (100, 100));
    }

    #[test]
    fn dequeued_nodes_are_reclaimed() {
        let m = EpochManager::new(1);
        let tok = m.get_token(0);
        let q = LockFreeQueue::new();
        for i in 0..1000 {
            q.enqueue(i, &tok);
        }
        while q.dequeue(&tok).is_some() {}
        m.advance_quiescent(3);
        assert_eq!(m.retired(), 1000);
        assert_eq!(m.reclaimed(), 1000);
    }

    struct Counted(Arc<AtomicUsize>);

    impl Drop for Counted {
        fn drop(&mut self) {
            self.0.fetch_add(1, Ordering::Relaxed);
        }
    }

    #[test]
    fn drop_releases_remaining_values_exactly_once() {
        let drops = Arc::new(AtomicUsize::new(0));
        let m = EpochManager::new(1);
        let tok = m.get_token(0);
        {
            let q = LockFreeQueue::new();
            for _ in 0..10 {
                q.enqueue(Counted(drops.clone()), &tok);
            }
            for _ in 0..4 {
                drop(q.dequeue(&tok));
            }
            assert_eq!(drops.load(Ordering::Relaxed), 4);
        }
        assert_eq!(drops.load(Ordering::Relaxed), 10);
        m.advance_quiescent(3);
        assert_eq!(drops.load(Ordering::Relaxed), 10);
    }

    #[test]
    fn concurrent_producers_and_consumers() {
        let m = EpochManager::new(1);
        let q = LockFreeQueue::new();
        let producers = 4u64;
        let per = 5_000u64;
        let done = AtomicUsize::new(0);
        let seen: Vec<Vec<u64>> = std::thread::scope(|s| {
            for p in 0..producers {
                let (q, m, done) = (&q, &m, &done);
                s.spawn(move || {
                    let tok = m.get_token(0);
                    for i in 0..per {
                        q.enqueue(p * per + i, &tok);
                    }
                    done.fetch_add(1, Ordering::Release);
                });
            }
            let consumers: Vec<_> = (0..4)
                .map(|_| {
                    let (q, m, done) = (&q, &m, &done);
                    s.spawn(move || {
                        let tok = m.get_token(0);
                        let mut got = Vec::new();
                        loop {
                            match q.dequeue(&tok) {
                                Some(v) => got.push(v),
                                None if done.load(Ordering::Acquire) == producers as usize => {
                                    if q.is_empty(&tok) {
                                        break;
                                    }
                                }
                                None => std::thread::yield_now(),
                            }
                        }
                        got
                    })
                })
                .collect();
            consumers.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut all = HashSet::new();
        for v in seen.iter().flatten() {
            assert!(all.insert(*v), "duplicate {v}");
        }
        assert_eq!(all.len() as u64, producers * per);
        // per-producer order is preserved within each consumer
        for got in &seen {
            for p in 0..producers {
                let mine: Vec<_> = got.iter().filter(|&&v| v / per == p).collect();
                assert!(mine.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
