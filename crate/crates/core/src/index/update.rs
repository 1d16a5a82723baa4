//! Stream admission of new items into a live index.
//!
//! New items wait in a buffer. A flush happens once the buffer reaches
//! `batch_flush_size` or when any buffered item carries a click trigger.
//! During a flush, click-triggered items are always admitted; the others are
//! ranked by exponentially decayed activity and only those strictly above the
//! configured percentile rank are admitted (ties by lower item id). Everything
//! admitted is inserted in one batch in ascending id order.

use std::collections::{HashMap, HashSet};

use super::GraphIndex;
use crate::data::ItemId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PendingItem {
    pub item: ItemId,
    pub embedding: Vec<f64>,
    pub click_triggered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityEvent {
    pub item: ItemId,
    pub at: u64,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivityLog {
    pub now: u64,
    pub events: Vec<ActivityEvent>,
}

impl ActivityLog {
    /// `sum(weight * decay^(now - at))` per item.
    pub fn decayed_scores(&self, decay: f64) -> HashMap<ItemId, f64> {
        let mut out: HashMap<ItemId, f64> = HashMap::new();
        for e in &self.events {
            let age = self.now.saturating_sub(e.at);
            let factor = decay.powf(age as f64);
            *out.entry(e.item).or_insert(0.0) += e.weight * factor;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePolicy {
    /// Per-tick activity decay factor in (0, 1].
    pub decay: f64,
    /// Percentile in (0, 100]; non-triggered items must rank above it.
    pub percentile: f64,
    pub batch_flush_size: usize,
    pending: Vec<PendingItem>,
}

impl UpdatePolicy {
    pub fn new(decay: f64, percentile: f64, batch_flush_size: usize) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid("decay must lie in (0, 1]"));
        }
        if !(percentile > 0.0 && percentile <= 100.0) {
            return Err(Error::invalid("percentile must lie in (0, 100]"));
        }
        if batch_flush_size == 0 {
            return Err(Error::invalid("batch_flush_size must be at least 1"));
        }
        Ok(UpdatePolicy {
            decay,
            percentile,
            batch_flush_size,
            pending: Vec::new(),
        })
    }

    /// Buffers an item; a later entry for the same id replaces the earlier one.
    pub fn enqueue(&mut self, item: PendingItem) {
        self.pending.retain(|p| p.item != item.item);
        self.pending.push(item);
    }

    pub fn pending(&self) -> &[PendingItem] {
        &self.pending
    }
}

/// Admits buffered items into `index` according to `policy`; returns the
/// admitted ids in insertion order. Non-admitted items stay buffered.
pub fn flush_pending(
    index: &mut GraphIndex,
    policy: &mut UpdatePolicy,
    activity: &ActivityLog,
) -> Result<Vec<ItemId>> {
    // Items indexed through another path no longer need admission.
    policy.pending.retain(|p| !index.contains(p.item));
    if policy.pending.is_empty() {
        return Ok(Vec::new());
    }
    let triggered = policy.pending.iter().any(|p| p.click_triggered);
    if !triggered && policy.pending.len() < policy.batch_flush_size {
        return Ok(Vec::new());
    }
    if let Some(bad) = policy.pending.iter().find(|p| p.embedding.len() != index.dim()) {
        return Err(Error::invalid(format!(
            "pending item {} has dim {}, index expects {}",
            bad.item,
            bad.embedding.len(),
            index.dim()
        )));
    }

    let scores = activity.decayed_scores(policy.decay);
    let score = |id: ItemId| scores.get(&id).copied().unwrap_or(0.0);
    let mut ranked: Vec<ItemId> = policy
        .pending
        .iter()
        .filter(|p| !p.click_triggered)
        .map(|p| p.item)
        .collect();
    ranked.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    let n = ranked.len();
    let held = ((n as f64 * policy.percentile / 100.0) - 1e-9).ceil().max(0.0) as usize;
    let mut admitted: HashSet<ItemId> = ranked[..n - held.min(n)].iter().copied().collect();
    admitted.extend(policy.pending.iter().filter(|p| p.click_triggered).map(|p| p.item));

    let mut batch: Vec<PendingItem> = Vec::with_capacity(admitted.len());
    let mut kept = Vec::with_capacity(policy.pending.len() - admitted.len());
    for p in policy.pending.drain(..) {
        if admitted.contains(&p.item) {
            batch.push(p);
        } else {
            kept.push(p);
        }
    }
    policy.pending = kept;
    batch.sort_by_key(|p| p.item);
    let mut ids = Vec::with_capacity(batch.len());
    for p in batch {
        index.insert(p.item, &p.embedding)?;
        ids.push(p.item);
    }
    Ok(ids)
}
