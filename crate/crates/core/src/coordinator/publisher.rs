//! Reliable delta publication over an unreliable broker link.

use std::collections::{BTreeMap, BTreeSet};

use super::ledger::DeltaUpdate;
use super::queue::DeltaQueue;
use crate::wire::{to_payload, Frame};

pub const DEFAULT_RETRANSMIT_MS: u64 = 5_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PublisherStats {
    pub sent: u64,
    pub retransmitted: u64,
    pub acked: u64,
}

#[derive(Debug, Clone)]
struct Inflight {
    update: DeltaUpdate,
    mid: u32,
    next_send_ms: u64,
}

/// Drains a [`DeltaQueue`] at QoS 1.
///
/// Each sensor has at most one unacknowledged publication, so one sensor's
/// deltas reach the wire strictly in sequence order even when some are
/// lost and retransmitted. Different sensors proceed independently.
#[derive(Debug)]
pub struct Publisher {
    queue: DeltaQueue,
    inflight: BTreeMap<String, Inflight>,
    next_mid: u32,
    retransmit_ms: u64,
    stats: PublisherStats,
}

impl Publisher {
    pub fn new(queue: DeltaQueue) -> Self {
        Self::with_retransmit(queue, DEFAULT_RETRANSMIT_MS)
    }

    pub fn with_retransmit(queue: DeltaQueue, retransmit_ms: u64) -> Self {
        Self {
            queue,
            inflight: BTreeMap::new(),
            next_mid: 0,
            retransmit_ms,
            stats: PublisherStats::default(),
        }
    }

    pub fn queue(&self) -> &DeltaQueue {
        &self.queue
    }

    pub fn stats(&self) -> PublisherStats {
        self.stats
    }

    /// Nothing queued and nothing awaiting acknowledgement.
    pub fn is_idle(&self) -> bool {
        self.inflight.is_empty() && self.queue.is_empty()
    }

    fn frame(i: &Inflight) -> Frame {
        Frame::publish(i.update.topic(), i.mid, 1, to_payload(&i.update.payload()))
    }

    fn allocate_mid(&mut self) -> u32 {
        loop {
            self.next_mid = self.next_mid.wrapping_add(1);
            let mid = self.next_mid;
            if mid != 0 && self.inflight.values().all(|i| i.mid != mid) {
                return mid;
            }
        }
    }

    /// Frames to send now: overdue retransmissions, then the next update of
    /// every idle sensor.
    pub fn poll(&mut self, now_ms: u64) -> Vec<Frame> {
        let mut out = Vec::new();
        for i in self.inflight.values_mut() {
            if now_ms >= i.next_send_ms {
                i.next_send_ms = now_ms + self.retransmit_ms;
                self.stats.retransmitted += 1;
                out.push(Self::frame(i));
            }
        }
        let busy: BTreeSet<String> = self.inflight.keys().cloned().collect();
        for update in self.queue.heads(&busy) {
            let mid = self.allocate_mid();
            let i = Inflight {
                update,
                mid,
                next_send_ms: now_ms + self.retransmit_ms,
            };
            self.stats.sent += 1;
            out.push(Self::frame(&i));
            self.inflight.insert(i.update.sensor_id.clone(), i);
        }
        out
    }

    /// Completes the publication with this mid, if any.
    pub fn on_puback(&mut self, mid: u32) -> Option<DeltaUpdate> {
        let sensor = self
            .inflight
            .iter()
            .find(|(_, i)| i.mid == mid)
            .map(|(s, _)| s.clone())?;
        let done = self.inflight.remove(&sensor)?;
        self.queue.remove(&done.update.sensor_id, done.update.event_seq);
        self.stats.acked += 1;
        Some(done.update)
    }

    /// A new connection: everything unacknowledged goes out again at once.
    pub fn on_reconnect(&mut self, now_ms: u64) {
        for i in self.inflight.values_mut() {
            i.next_send_ms = now_ms;
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

    fn mids(frames: &[Frame]) -> Vec<u32> {
        frames
            .iter()
            .map(|f| match f {
                Frame::Pub { mid, .. } => *mid,
                _ => panic!("unexpected {f:?}"),
            })
            .collect()
    }

    #[test]
    fn healthy_link_drains_queue() {
        let q = DeltaQueue::default();
        for s in 1..=10 {
            q.push(upd("a", s)).unwrap();
        }
        let mut p = Publisher::new(q.clone());
        let mut acked = 0;
        while !p.is_idle() {
            for mid in mids(&p.poll(0)) {
                assert!(p.on_puback(mid).is_some());
                acked += 1;
            }
        }
        assert_eq!(acked, 10);
        assert!(q.is_empty());
    }

    #[test]
    fn one_inflight_per_sensor_and_retransmit_same_mid() {
        let q = DeltaQueue::default();
        for u in [upd("a", 1), upd("a", 2), upd("b", 1)] {
            q.push(u).unwrap();
        }
        let mut p = Publisher::with_retransmit(q, 100);
        let first = mids(&p.poll(0));
        assert_eq!(first.len(), 2);
        assert!(p.poll(99).is_empty());
        assert_eq!(mids(&p.poll(100)), first);
        assert_eq!(p.stats().retransmitted, 2);
        // Duplicate acks are harmless.
        assert_eq!(p.on_puback(first[0]).unwrap(), upd("a", 1));
        assert!(p.on_puback(first[0]).is_none());
        let next = p.poll(100);
        assert!(matches!(&next[0], Frame::Pub { payload, .. } if payload.contains("\"event_seq\":2")));
    }

    #[test]
    fn reconnect_resends_immediately() {
        let q = DeltaQueue::default();
        q.push(upd("a", 1)).unwrap();
        let mut p = Publisher::new(q);
        p.poll(0);
        p.on_reconnect(10);
        assert_eq!(p.poll(10).len(), 1);
    }
}
