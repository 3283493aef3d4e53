//! Prefetch requests and their priority ordering.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use parking_lot::{Condvar, Mutex};

use crate::query::Query;

#[derive(Debug, Clone, PartialEq)]
pub struct PrefetchRequest {
    pub request_id: u64,
    pub queries: Vec<Query>,
    pub confidence: f64,
    pub issue_time: f64,
    pub predicted_need_token: usize,
    pub priority: f64,
}

impl PrefetchRequest {
    /// Priority is confidence per millisecond of expected completion time.
    pub fn priority_for(confidence: f64, expected_completion_ms: f64) -> f64 {
        confidence / expected_completion_ms
    }
}

/// Heap wrapper: higher priority first, then earlier issue time, then lower id.
#[derive(Debug, Clone)]
pub struct Ranked(pub PrefetchRequest);

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (&self.0, &other.0);
        a.priority
            .total_cmp(&b.priority)
            .then_with(|| b.issue_time.total_cmp(&a.issue_time))
            .then_with(|| b.request_id.cmp(&a.request_id))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

#[derive(Debug, Default, Clone)]
pub struct RequestQueue {
    heap: BinaryHeap<Ranked>,
}

impl RequestQueue {
    pub fn enqueue(&mut self, r: PrefetchRequest) {
        self.heap.push(Ranked(r));
    }

    pub fn dequeue(&mut self) -> Option<PrefetchRequest> {
        self.heap.pop().map(|r| r.0)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Drop a waiting request; true if it was queued.
    pub fn remove(&mut self, request_id: u64) -> bool {
        let before = self.heap.len();
        self.heap.retain(|r| r.0.request_id != request_id);
        self.heap.len() != before
    }

    pub fn drain(&mut self) -> Vec<PrefetchRequest> {
        let mut out = Vec::with_capacity(self.heap.len());
        while let Some(r) = self.dequeue() {
            out.push(r);
        }
        out
    }
}

/// Queue for worker threads: `dequeue` blocks until a request arrives or the
/// queue is closed.
#[derive(Debug, Default)]
pub struct BlockingQueue {
    inner: Mutex<(RequestQueue, bool)>,
    ready: Condvar,
}

impl BlockingQueue {
    pub fn enqueue(&self, r: PrefetchRequest) {
        self.inner.lock().0.enqueue(r);
        self.ready.notify_one();
    }

    pub fn dequeue(&self) -> Option<PrefetchRequest> {
        let mut g = self.inner.lock();
        loop {
            if let Some(r) = g.0.dequeue() {
                return Some(r);
            }
            if g.1 {
                return None;
            }
            self.ready.wait(&mut g);
        }
    }

    pub fn close(&self) {
        self.inner.lock().1 = true;
        self.ready.notify_all();
    }
}
