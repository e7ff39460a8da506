//! Reference checks for recorded operation traces.
//!
//! [`oracle_replay`] checks a sequential trace against a `HashMap`.
//! [`check_history`] checks a concurrent history key by key: a find may
//! return the value of any write that was not already overwritten when the
//! find began and had started before the find ended. Absence counts as the
//! value of erases and of an initial write at time zero.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::aggregate::MapAction;

/// One completed operation. `value` is the inserted value for inserts and
/// the observed result for finds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOp<K, V> {
    pub action: MapAction,
    pub key: K,
    pub value: Option<V>,
}

impl<K, V> TraceOp<K, V> {
    pub fn insert(key: K, value: V) -> Self {
        TraceOp {
            action: MapAction::Insert,
            key,
            value: Some(value),
        }
    }

    pub fn erase(key: K) -> Self {
        TraceOp {
            action: MapAction::Erase,
            key,
            value: None,
        }
    }

    pub fn find(key: K, result: Option<V>) -> Self {
        TraceOp {
            action: MapAction::Find,
            key,
            value: result,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mismatch<K, V> {
    pub index: usize,
    pub key: K,
    pub expected: Option<V>,
    pub observed: Option<V>,
}

#[derive(Clone, Debug)]
pub struct Verdict<K, V> {
    pub mismatches: Vec<Mismatch<K, V>>,
    /// Reference map contents after the replay.
    pub final_state: HashMap<K, V>,
}

impl<K, V> Verdict<K, V> {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Replays `trace` in order and reports every find whose result differs.
pub fn oracle_replay<K, V>(trace: &[TraceOp<K, V>]) -> Verdict<K, V>
where
    K: Hash + Eq + Clone,
    V: PartialEq + Clone,
{
    let mut reference: HashMap<K, V> = HashMap::new();
    let mut mismatches = Vec::new();
    for (index, op) in trace.iter().enumerate() {
        match op.action {
            MapAction::Insert => {
                let v = op.value.clone().expect("insert without a value");
                reference.insert(op.key.clone(), v);
            }
            MapAction::Erase => {
                reference.remove(&op.key);
            }
            MapAction::Find => {
                let expected = reference.get(&op.key).cloned();
                if expected != op.value {
                    mismatches.push(Mismatch {
                        index,
                        key: op.key.clone(),
                        expected,
                        observed: op.value.clone(),
                    });
                }
            }
        }
    }
    Verdict {
        mismatches,
        final_state: reference,
    }
}

/// An operation with the logical times at which it was invoked and returned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedOp<K, V> {
    pub op: TraceOp<K, V>,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HistoryVerdict {
    pub finds_checked: usize,
    /// Indices into the history of finds no write can explain.
    pub unexplained: Vec<usize>,
}

impl HistoryVerdict {
    pub fn is_clean(&self) -> bool {
        self.unexplained.is_empty()
    }
}

struct Write<V> {
    start: u64,
    end: u64,
    value: Option<V>,
}

/// [`check_history_from`] with an empty initial map.
pub fn check_history<K, V>(history: &[TimedOp<K, V>]) -> HistoryVerdict
where
    K: Hash + Eq + Clone,
    V: PartialEq + Clone,
{
    check_history_from(history, &HashMap::new())
}

/// Checks every find in `history` against the writes to its key. Timestamps
/// must be positive; `initial` holds the contents before the history began.
pub fn check_history_from<K, V>(history: &[TimedOp<K, V>], initial: &HashMap<K, V>) -> HistoryVerdict
where
    K: Hash + Eq + Clone,
    V: PartialEq + Clone,
{
    let mut writes: HashMap<&K, Vec<Write<V>>> = HashMap::new();
    let mut finds: HashMap<&K, Vec<usize>> = HashMap::new();
    for (i, t) in history.iter().enumerate() {
        debug_assert!(t.start > 0 && t.start <= t.end);
        match t.op.action {
            MapAction::Find => finds.entry(&t.op.key).or_default().push(i),
            _ => writes.entry(&t.op.key).or_default().push(Write {
                start: t.start,
                end: t.end,
                value: t.op.value.clone(),
            }),
        }
    }

    let mut verdict = HistoryVerdict::default();
    for (key, key_finds) in finds {
        let mut ws = writes.remove(key).unwrap_or_default();
        ws.push(Write {
            start: 0,
            end: 0,
            value: initial.get(key).cloned(),
        });
        ws.sort_by_key(|w| w.end);
        // latest_start[i] = max start among the first i writes by end time
        let mut latest_start = Vec::with_capacity(ws.len() + 1);
        latest_start.push(0);
        for w in &ws {
            let prev = *latest_start.last().unwrap();
            latest_start.push(prev.max(w.start));
        }
        for i in key_finds {
            let f = &history[i];
            verdict.finds_checked += 1;
            // writes that returned before the find was invoked
            let done = ws.partition_point(|w| w.end < f.start);
            let overwritten_before = latest_start[done];
            let explained = ws
                .iter()
                .any(|w| w.start < f.end && w.end >= overwritten_before && w.value == f.op.value);
            if !explained {
                verdict.unexplained.push(i);
            }
        }
    }
    verdict.unexplained.sort_unstable();
    verdict
}
