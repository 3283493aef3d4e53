//! Bounded LRU store of completed retrievals, keyed by request id.

use std::sync::Arc;

use parking_lot::RwLock;

use crate::retriever::ScoredDoc;

pub const DEFAULT_CAPACITY: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub request_id: u64,
    pub docs: Vec<ScoredDoc>,
    pub embeddings: Vec<Vec<f64>>,
    pub completion_time: f64,
    pub use_count: u32,
}

/// Entries are kept oldest-first; the tail is the most recently used.
#[derive(Debug, Clone)]
pub struct ResultCache {
    capacity: usize,
    entries: Vec<CacheEntry>,
}

impl Default for ResultCache {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl ResultCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "cache capacity must be positive");
        ResultCache {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Insert or replace; returns the evicted entry's id if the cache overflowed.
    pub fn put(&mut self, entry: CacheEntry) -> Option<u64> {
        if let Some(i) = self.position(entry.request_id) {
            self.entries.remove(i);
        }
        self.entries.push(entry);
        (self.entries.len() > self.capacity).then(|| self.entries.remove(0).request_id)
    }

    /// Look up and mark as most recently used.
    pub fn get(&mut self, id: u64) -> Option<&CacheEntry> {
        let i = self.position(id)?;
        let mut e = self.entries.remove(i);
        e.use_count += 1;
        self.entries.push(e);
        self.entries.last()
    }

    pub fn peek(&self, id: u64) -> Option<&CacheEntry> {
        self.position(id).map(|i| &self.entries[i])
    }

    pub fn contains(&self, id: u64) -> bool {
        self.position(id).is_some()
    }

    /// Ids from least to most recently used.
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.request_id).collect()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    fn position(&self, id: u64) -> Option<usize> {
        self.entries.iter().position(|e| e.request_id == id)
    }
}

/// Cache handle shared between the generation loop and retrieval workers.
pub type SharedCache = Arc<RwLock<ResultCache>>;

pub fn shared(capacity: usize) -> SharedCache {
    Arc::new(RwLock::new(ResultCache::new(capacity)))
}
