//! Distributed interlocked hash table on a simulated PGAS cluster.
//!
//! A [`Cluster`] stands in for a set of compute nodes ("locales"), each with
//! its own worker pool. A [`DistributedMap`] spreads a block-distributed root
//! of buckets over the locales; every key is stored on the locale owning its
//! root slot, and operations on it run there.
//!
//! ```
//! use diht::{Cluster, DistributedMap, MapConfig};
//!
//! let cluster = Cluster::spawn(4, 2).unwrap();
//! let map: DistributedMap<u64, String> = DistributedMap::new(&cluster, MapConfig::default()).unwrap();
//! let tok = map.get_token();
//! map.insert(1, "one".into(), &tok);
//! assert_eq!(map.find(&1, &tok).as_deref(), Some("one"));
//!
//! let pending = map.find_async(1, &tok);
//! map.flush_local_buffers();
//! assert_eq!(pending.wait().as_deref(), Some("one"));
//! ```

pub mod aggregate;
pub mod bench;
pub mod config;
pub mod dmap;
pub mod ebr;
pub mod iterate;
pub mod lock_audit;
pub mod queue;
pub mod runtime;
pub mod table;

pub use aggregate::{AggregationStats, FlushRecord, FutureState, MapAction, MapFuture};
pub use config::{ConfigError, Execution, MapConfig};
pub use dmap::{DistributedMap, MapStats};
pub use ebr::{EpochManager, EpochStats, PinGuard, Token};
pub use iterate::IterStats;
pub use queue::LockFreeQueue;
pub use runtime::{BlockDistribution, Cluster, DispatchCounts, LocaleId, RemotePanic, RuntimeError};
pub use table::{LockState, SlotKind, TableCensus};
