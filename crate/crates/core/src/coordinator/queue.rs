//! Bounded outbound delta queue shared by the ingestion and publication
//! contexts.

use std::collections::{BTreeSet, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

use super::ledger::DeltaUpdate;

pub const DELTA_QUEUE_CAPACITY: usize = 100_000;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("delta queue full ({0} entries)")]
pub struct QueueFull(pub usize);

#[derive(Debug, Default)]
struct Inner {
    entries: VecDeque<DeltaUpdate>,
    capacity: usize,
    rejected: u64,
}

/// Entries stay queued until the broker acknowledges them. When full the
/// newest update is refused, so nothing already queued is ever reordered
/// or lost.
#[derive(Debug, Clone)]
pub struct DeltaQueue(Arc<Mutex<Inner>>);

impl Default for DeltaQueue {
    fn default() -> Self {
        Self::with_capacity(DELTA_QUEUE_CAPACITY)
    }
}

impl DeltaQueue {
    pub fn with_capacity(capacity: usize) -> Self {
        Self(Arc::new(Mutex::new(Inner {
            capacity: capacity.max(1),
            ..Inner::default()
        })))
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push(&self, update: DeltaUpdate) -> Result<(), QueueFull> {
        let mut q = self.lock();
        if q.entries.len() >= q.capacity {
            q.rejected += 1;
            return Err(QueueFull(q.capacity));
        }
        q.entries.push_back(update);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Updates refused because the queue was full.
    pub fn rejected(&self) -> u64 {
        self.lock().rejected
    }

    /// Oldest queued update of every sensor not in `busy`.
    pub fn heads(&self, busy: &BTreeSet<String>) -> Vec<DeltaUpdate> {
        let q = self.lock();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for u in &q.entries {
            if busy.contains(&u.sensor_id) || seen.contains(&u.sensor_id) {
                continue;
            }
            seen.insert(u.sensor_id.clone());
            out.push(u.clone());
        }
        out
    }

    pub fn remove(&self, sensor_id: &str, event_seq: u64) -> bool {
        let mut q = self.lock();
        match q
            .entries
            .iter()
            .position(|u| u.sensor_id == sensor_id && u.event_seq == event_seq)
        {
            Some(i) => {
                q.entries.remove(i);
                true
            }
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Direction;

    fn upd(sensor: &str, seq: u64) -> DeltaUpdate {
        DeltaUpdate {
            location_id: "L1".into(),
            sensor_id: sensor.into(),
            event_seq: seq,
            direction: Direction::Entry,
            timestamp_ms: 0,
        }
    }

    #[test]
    fn full_queue_rejects_newest() {
        let q = DeltaQueue::with_capacity(2);
        q.push(upd("a", 1)).unwrap();
        q.push(upd("a", 2)).unwrap();
        assert_eq!(q.push(upd("a", 3)), Err(QueueFull(2)));
        assert_eq!(q.rejected(), 1);
        let heads = q.heads(&BTreeSet::new());
        assert_eq!(heads, vec![upd("a", 1)]);
    }

    #[test]
    fn heads_are_per_sensor_oldest() {
        let q = DeltaQueue::default();
        for (s, n) in [("a", 1), ("b", 1), ("a", 2), ("c", 5)] {
            q.push(upd(s, n)).unwrap();
        }
        let busy: BTreeSet<String> = ["b".to_string()].into();
        assert_eq!(q.heads(&busy), vec![upd("a", 1), upd("c", 5)]);
        assert!(q.remove("a", 1));
        assert!(!q.remove("a", 1));
        assert_eq!(q.heads(&busy), vec![upd("a", 2), upd("c", 5)]);
    }
}
