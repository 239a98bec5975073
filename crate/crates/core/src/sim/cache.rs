use std::collections::{BTreeMap, HashMap};

use crate::trace::ExpertId;

/// A cached expert, keyed by layer and id.
pub type ExpertKey = (usize, ExpertId);

/// GPU expert cache with least-recently-used replacement.
///
/// The cache is one pool shared by all layers. A capacity of zero turns
/// every insert into a no-op.
#[derive(Clone, Debug, Default)]
pub struct CacheState {
    capacity: usize,
    clock: u64,
    stamp_of: HashMap<ExpertKey, u64>,
    by_stamp: BTreeMap<u64, ExpertKey>,
}

impl CacheState {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stamp_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamp_of.is_empty()
    }

    pub fn contains(&self, key: &ExpertKey) -> bool {
        self.stamp_of.contains_key(key)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Marks `key` most recently used. Returns false if it is not cached.
    pub fn touch(&mut self, key: &ExpertKey) -> bool {
        let Some(old) = self.stamp_of.get(key).copied() else {
            return false;
        };
        let now = self.tick();
        self.by_stamp.remove(&old);
        self.by_stamp.insert(now, *key);
        self.stamp_of.insert(*key, now);
        true
    }

    /// Inserts or refreshes `key`, returning the evicted expert if any.
    pub fn insert(&mut self, key: ExpertKey) -> Option<ExpertKey> {
        if self.capacity == 0 || self.touch(&key) {
            return None;
        }
        let evicted = if self.stamp_of.len() >= self.capacity {
            let (_, lru) = self.by_stamp.pop_first().expect("full cache is non-empty");
            self.stamp_of.remove(&lru);
            Some(lru)
        } else {
            None
        };
        let now = self.tick();
        self.by_stamp.insert(now, key);
        self.stamp_of.insert(key, now);
        evicted
    }

    /// Residents from most to least recently used.
    pub fn recency(&self) -> Vec<ExpertKey> {
        self.by_stamp.values().rev().copied().collect()
    }
}

/// Inserts `expert` into `cache` with LRU eviction.
pub fn cache_insert(cache: &mut CacheState, expert: ExpertKey) -> Option<ExpertKey> {
    cache.insert(expert)
}
