use std::collections::{HashMap, HashSet};
use std::sync::Mutex;

use diht::{Cluster, DistributedMap, MapConfig, MapFuture};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum Op {
    Insert(u16, u32),
    Erase(u16),
    Find(u16),
}

fn op(keys: u16) -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..keys, any::<u32>()).prop_map(|(k, v)| Op::Insert(k, v)),
        1 => (0..keys).prop_map(Op::Erase),
        3 => (0..keys).prop_map(Op::Find),
    ]
}

/// Small lists and tiny inner levels so short op sequences split and erase
/// lists at every depth.
fn cramped(max_depth: usize) -> MapConfig {
    MapConfig {
        root_buckets_per_locale: 2,
        bucket_num_elements: 2,
        inner_base_size: 2,
        max_depth,
        buffer_size: 8,
        reclaim_interval: 4,
        ..MapConfig::default()
    }
}

fn sorted(mut v: Vec<(u16, u32)>) -> Vec<(u16, u32)> {
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sync_ops_match_a_sequential_model(
        locales in 1usize..4,
        max_depth in 1usize..4,
        ops in proptest::collection::vec(op(64), 0..400),
    ) {
        let cluster = Cluster::spawn(locales, 1).unwrap();
        let cfg = cramped(max_depth);
        let map: DistributedMap<u16, u32> = DistributedMap::new(&cluster, cfg.clone()).unwrap();
        let mut model = HashMap::new();
        {
            let tok = map.get_token();
            for op in &ops {
                match *op {
                    Op::Insert(k, v) => {
                        map.insert(k, v, &tok);
                        model.insert(k, v);
                    }
                    Op::Erase(k) => {
                        map.erase(&k, &tok);
                        model.remove(&k);
                    }
                    Op::Find(k) => prop_assert_eq!(map.find(&k, &tok), model.get(&k).copied()),
                }
            }
        }
        prop_assert_eq!(sorted(map.entries()), sorted(model.clone().into_iter().collect()));

        let census = map.census();
        prop_assert_eq!(census.elements, model.len());
        prop_assert_eq!(census.broken_parent_links, 0);
        prop_assert!(census.max_depth <= max_depth);
        if census.longest_list > cfg.bucket_num_elements {
            // only lists on the deepest level may grow past capacity
            prop_assert_eq!(census.max_depth, max_depth);
        }

        let mgr = map.epoch_manager();
        mgr.advance_quiescent(3);
        prop_assert_eq!(mgr.retired(), mgr.reclaimed());
    }

    #[test]
    fn async_batches_match_the_model(
        locales in 2usize..4,
        batches in proptest::collection::vec(proptest::collection::vec(op(48), 0..60), 1..6),
    ) {
        let cluster = Cluster::spawn(locales, 2).unwrap();
        let map: DistributedMap<u16, u32> = DistributedMap::new(&cluster, cramped(3)).unwrap();
        let tok = map.get_token();
        let mut model = HashMap::new();
        for batch in batches {
            // Records within one flush run in no particular order, so keep
            // one operation per key per batch.
            let mut used = HashSet::new();
            let batch: Vec<Op> = batch
                .into_iter()
                .filter(|op| used.insert(match *op { Op::Insert(k, _) | Op::Erase(k) | Op::Find(k) => k }))
                .collect();
            let mut pending: Vec<(MapFuture<u32>, Option<u32>)> = Vec::new();
            for op in &batch {
                match *op {
                    Op::Insert(k, v) => map.insert_async(k, v, &tok),
                    Op::Erase(k) => map.erase_async(k, &tok),
                    Op::Find(k) => pending.push((map.find_async(k, &tok), model.get(&k).copied())),
                }
            }
            map.flush_local_buffers();
            for (f, want) in pending {
                prop_assert!(f.is_ready());
                prop_assert_eq!(f.wait(), want);
            }
            for op in batch {
                match op {
                    Op::Insert(k, v) => { model.insert(k, v); }
                    Op::Erase(k) => { model.remove(&k); }
                    Op::Find(_) => {}
                }
            }
        }
        drop(tok);
        prop_assert_eq!(sorted(map.entries()), sorted(model.into_iter().collect()));
        let s = map.aggregation_stats();
        prop_assert_eq!(s.enqueued, s.records_executed);
        for rec in map.take_flush_log() {
            prop_assert_eq!(rec.dispatches, if rec.finds > 0 { 2 } else { 1 });
        }
    }

    #[test]
    fn both_iterations_visit_exactly_the_entries(
        locales in 1usize..4,
        tasks in 1usize..4,
        keys in proptest::collection::hash_set(any::<u16>(), 0..600),
    ) {
        let cluster = Cluster::spawn(locales, tasks).unwrap();
        let map: DistributedMap<u16, u32> = DistributedMap::new(&cluster, cramped(3)).unwrap();
        let tok = map.get_token();
        for &k in &keys {
            map.insert(k, u32::from(k) * 2, &tok);
        }
        let mut serial = Vec::new();
        let s = map.serial_iterate(|k, v| serial.push((*k, *v)));
        let parallel = Mutex::new(Vec::new());
        let p = map.parallel_iterate(|k, v| parallel.lock().unwrap().push((*k, *v)));
        let want = sorted(keys.iter().map(|&k| (k, u32::from(k) * 2)).collect());
        prop_assert_eq!(sorted(serial), want.clone());
        prop_assert_eq!(sorted(parallel.into_inner().unwrap()), want);
        prop_assert_eq!(s.total_visits(), keys.len() as u64);
        prop_assert_eq!(p.total_visits(), keys.len() as u64);
        prop_assert_eq!(s.pointer_lists, p.pointer_lists);
    }

    #[test]
    fn every_key_lives_on_its_owner(keys in proptest::collection::vec(any::<u64>(), 1..200)) {
        let cluster = Cluster::spawn(3, 1).unwrap();
        let map: DistributedMap<u64, u64> = DistributedMap::new(&cluster, MapConfig::default()).unwrap();
        let tok = map.get_token();
        for &k in &keys {
            map.insert(k, k, &tok);
        }
        let per_locale = map.serial_iterate(|_, _| {}).visits;
        let mut expected = vec![0u64; 3];
        for k in keys.iter().collect::<HashSet<_>>() {
            expected[map.owner_of(k)] += 1;
        }
        prop_assert_eq!(per_locale, expected);
    }
}
