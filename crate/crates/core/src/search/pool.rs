use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use parking_lot::Mutex;

use crate::data::ItemId;

/// A scored item. Orders by score, then by lower item id (lower id ranks higher).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub item: ItemId,
    pub score: f64,
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.item.cmp(&self.item))
    }
}

/// Bounded pool holding the `capacity` best items ever pushed.
///
/// Safe to share between searcher threads; every operation takes one short
/// lock. Push is `O(log K)`.
#[derive(Debug)]
pub struct CandidatePool {
    capacity: usize,
    heap: Mutex<BinaryHeap<Reverse<Scored>>>,
}

impl CandidatePool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "pool capacity must be positive");
        CandidatePool {
            capacity,
            heap: Mutex::new(BinaryHeap::with_capacity(capacity + 1)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.heap.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.lock().is_empty()
    }

    /// Returns whether the entry made it into the pool.
    pub fn push(&self, item: ItemId, score: f64) -> bool {
        let entry = Scored { item, score };
        let mut heap = self.heap.lock();
        if heap.len() < self.capacity {
            heap.push(Reverse(entry));
            return true;
        }
        let worst = heap.peek().expect("full pool is nonempty").0;
        if entry > worst {
            heap.pop();
            heap.push(Reverse(entry));
            true
        } else {
            false
        }
    }

    /// Lowest-ranked entry, only once the pool is full.
    pub fn threshold(&self) -> Option<Scored> {
        let heap = self.heap.lock();
        (heap.len() == self.capacity).then(|| heap.peek().expect("nonempty").0)
    }

    /// Entries sorted best first.
    pub fn top(&self) -> Vec<Scored> {
        let heap = self.heap.lock();
        let mut v: Vec<Scored> = heap.iter().map(|r| r.0).collect();
        v.sort_by(|a, b| b.cmp(a));
        v
    }
}
