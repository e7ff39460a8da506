use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How batch loops (buffer execution, future resolution, bulk pre-fill) run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    /// Data-parallel over the locale's worker pool. Falls back to
    /// [`Execution::Sequential`] when the `parallel` feature is disabled.
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Whether this build will actually run batch loops in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Upper bound on the slot count of any single pointer list.
pub const MAX_LEVEL_SLOTS: usize = 1 << 28;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("{field} = {value} is too large (limit {limit})")]
    TooLarge {
        field: &'static str,
        value: usize,
        limit: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Map shape and tuning knobs. Defaults follow the evaluated configuration:
/// 1024 root buckets per locale, 8 elements per list, 1024-slot inner lists
/// doubling per level, aggregation buffers of 10240 operations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub root_buckets_per_locale: usize,
    pub bucket_num_elements: usize,
    pub buffer_size: usize,
    pub root_seed: u64,
    /// Deepest level of inner pointer lists below the root. Element lists
    /// hanging off this level grow instead of splitting.
    pub max_depth: usize,
    /// Slot count of depth-1 pointer lists; doubles with each level below.
    pub inner_base_size: usize,
    /// Seed of the per-locale streams that pick random iteration offsets.
    pub iter_seed: u64,
    /// Retirements (and unpins per token) between epoch advance attempts.
    pub reclaim_interval: u64,
    pub execution: Execution,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            root_buckets_per_locale: 1024,
            bucket_num_elements: 8,
            buffer_size: 10240,
            root_seed: 0x9e37_79b9_7f4a_7c15,
            max_depth: 4,
            inner_base_size: 1024,
            iter_seed: 0x2545_f491_4f6c_dd1d,
            reclaim_interval: crate::ebr::DEFAULT_ADVANCE_INTERVAL,
            execution: Execution::Parallel,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("root_buckets_per_locale", self.root_buckets_per_locale),
            ("bucket_num_elements", self.bucket_num_elements),
            ("buffer_size", self.buffer_size),
            ("max_depth", self.max_depth),
            ("inner_base_size", self.inner_base_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::NotPositive(name));
            }
        }
        if self.reclaim_interval == 0 {
            return Err(ConfigError::NotPositive("reclaim_interval"));
        }
        // the deepest level has inner_base_size << (max_depth - 1) slots
        let deepest = (self.max_depth <= 64)
            .then(|| (self.inner_base_size as u128) << (self.max_depth - 1))
            .filter(|&n| n <= MAX_LEVEL_SLOTS as u128);
        if deepest.is_none() {
            return Err(ConfigError::TooLarge {
                field: "max_depth",
                value: self.max_depth,
                limit: MAX_LEVEL_SLOTS,
            });
        }
        Ok(())
    }

    /// Slot count of a pointer list at `depth` (1 = directly below the root).
    pub fn level_size(&self, depth: usize) -> usize {
        debug_assert!(depth >= 1);
        self.inner_base_size << (depth - 1)
    }
}
