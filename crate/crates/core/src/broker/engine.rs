//! Connection-level broker state machine.
//!
//! The engine never touches sockets: callers feed it decoded frames and the
//! current time, and carry out the returned [`Action`]s.

use std::collections::BTreeMap;

use rand::Rng;

use super::whitelist::{DeviceKey, Whitelist, WhitelistError};
use crate::topic::{TopicFilter, TopicName};
use crate::wire::{to_payload, Frame, KeyPayload};

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send(ConnId, Frame),
    /// Drop the connection. The session is already gone from the engine.
    Close(ConnId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrokerConfig {
    pub retransmit_ms: u64,
    /// Total transmissions of one QoS 1 delivery, first send included.
    pub max_attempts: u32,
    pub max_inflight: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            retransmit_ms: 5_000,
            max_attempts: 5,
            max_inflight: 1_000,
        }
    }
}

/// A client publication accepted for routing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inbound {
    pub device_id: String,
    pub topic: TopicName,
    pub payload: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BrokerStats {
    pub connections_accepted: u64,
    pub connections_rejected: u64,
    pub publishes_in: u64,
    pub publishes_denied: u64,
    pub deliveries: u64,
    pub retransmissions: u64,
    pub deliveries_abandoned: u64,
}

#[derive(Debug, Clone)]
struct Pending {
    topic: String,
    payload: String,
    attempts: u32,
    next_send_ms: u64,
}

#[derive(Debug, Clone)]
struct Identity {
    device_id: String,
    client_id: String,
    key: DeviceKey,
}

#[derive(Debug, Clone, Default)]
struct Session {
    identity: Option<Identity>,
    subs: Vec<TopicFilter>,
    inflight: BTreeMap<u32, Pending>,
    next_mid: u32,
}

impl Session {
    fn allocate_mid(&mut self) -> u32 {
        loop {
            self.next_mid = self.next_mid.wrapping_add(1);
            if self.next_mid != 0 && !self.inflight.contains_key(&self.next_mid) {
                return self.next_mid;
            }
        }
    }
}

/// Topics only the server may publish on.
pub fn is_server_owned(topic: &TopicName) -> bool {
    let l: Vec<&str> = topic.levels().collect();
    match l.as_slice() {
        ["devices", _, "config", ..] => true,
        ["devices", _, "key"] => true,
        ["locations", _, "occupancy"] => true,
        ["registry", ..] => true,
        _ => false,
    }
}

/// Topics whose last value is kept and replayed to new subscribers.
pub fn is_retained(topic: &TopicName) -> bool {
    let l: Vec<&str> = topic.levels().collect();
    matches!(l.as_slice(), ["devices", _, "config", _] | ["devices", _, "key"])
}

/// Device that owns a `devices/{id}/..` topic. Such topics are private to it.
fn device_scope(topic: &TopicName) -> Option<&str> {
    let mut l = topic.levels();
    match (l.next(), l.next()) {
        (Some("devices"), Some(id)) => Some(id),
        _ => None,
    }
}

fn may_receive(identity: &Identity, topic: &TopicName) -> bool {
    device_scope(topic).is_none_or(|d| d == identity.device_id)
}

#[derive(Debug)]
pub struct Broker {
    config: BrokerConfig,
    whitelist: Whitelist,
    whitelist_dirty: bool,
    sessions: BTreeMap<ConnId, Session>,
    retained: BTreeMap<TopicName, String>,
    stats: BrokerStats,
}

impl Broker {
    pub fn new(whitelist: Whitelist, config: BrokerConfig) -> Self {
        Self {
            config,
            whitelist,
            whitelist_dirty: false,
            sessions: BTreeMap::new(),
            retained: BTreeMap::new(),
            stats: BrokerStats::default(),
        }
    }

    pub fn config(&self) -> BrokerConfig {
        self.config
    }

    pub fn whitelist(&self) -> &Whitelist {
        &self.whitelist
    }

    pub fn stats(&self) -> BrokerStats {
        self.stats
    }

    /// True once since the last call if the whitelist changed internally
    /// (rotation completed or expired) and should be persisted.
    pub fn take_whitelist_dirty(&mut self) -> bool {
        std::mem::take(&mut self.whitelist_dirty)
    }

    pub fn retained(&self, topic: &TopicName) -> Option<&str> {
        self.retained.get(topic).map(String::as_str)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Device bound to an authenticated connection.
    pub fn device_of(&self, conn: ConnId) -> Option<&str> {
        self.sessions
            .get(&conn)
            .and_then(|s| s.identity.as_ref())
            .map(|i| i.device_id.as_str())
    }

    pub fn is_online(&self, device_id: &str) -> bool {
        self.sessions
            .values()
            .any(|s| s.identity.as_ref().is_some_and(|i| i.device_id == device_id))
    }

    pub fn inflight_len(&self, conn: ConnId) -> usize {
        self.sessions.get(&conn).map_or(0, |s| s.inflight.len())
    }

    /// Registers a new transport connection. It can do nothing but CONNECT
    /// until authenticated.
    pub fn open(&mut self, conn: ConnId) {
        self.sessions.insert(conn, Session::default());
    }

    /// The transport went away.
    pub fn closed(&mut self, conn: ConnId) {
        self.sessions.remove(&conn);
    }

    fn reject(&mut self, conn: ConnId, reason: &str, out: &mut Vec<Action>) {
        self.sessions.remove(&conn);
        out.push(Action::Send(
            conn,
            Frame::Reject {
                reason: reason.to_owned(),
            },
        ));
        out.push(Action::Close(conn));
    }

    /// A line that did not decode as a frame.
    pub fn on_malformed(&mut self, conn: ConnId, reason: &str) -> Vec<Action> {
        let mut out = Vec::new();
        tracing::debug!(conn, reason, "malformed frame");
        self.reject(conn, &format!("protocol error: {reason}"), &mut out);
        out
    }

    /// Handles one frame from `conn`. A returned [`Inbound`] is a client
    /// publication that was routed; the caller may intercept it before
    /// flushing the actions.
    pub fn on_frame(&mut self, conn: ConnId, frame: Frame, now_ms: u64) -> (Vec<Action>, Option<Inbound>) {
        let mut out = Vec::new();
        let Some(session) = self.sessions.get(&conn) else {
            return (out, None);
        };
        let authenticated = session.identity.is_some();
        match frame {
            Frame::Connect { key, client_id } if !authenticated => {
                self.connect(conn, &key, &client_id, &mut out);
                (out, None)
            }
            _ if !authenticated => {
                self.stats.connections_rejected += 1;
                self.reject(conn, "not authenticated", &mut out);
                (out, None)
            }
            Frame::Connect { .. } => {
                self.reject(conn, "protocol error: duplicate CONNECT", &mut out);
                (out, None)
            }
            Frame::Sub { filter } => {
                self.subscribe(conn, &filter, now_ms, &mut out);
                (out, None)
            }
            Frame::Pub {
                topic,
                mid,
                qos,
                payload,
            } => {
                let inbound = self.client_publish(conn, &topic, payload, now_ms, &mut out);
                if qos == 1 && self.sessions.contains_key(&conn) {
                    out.push(Action::Send(conn, Frame::Puback { mid }));
                }
                (out, inbound)
            }
            Frame::Puback { mid } => {
                if let Some(s) = self.sessions.get_mut(&conn) {
                    s.inflight.remove(&mid);
                }
                (out, None)
            }
            Frame::Ping => {
                out.push(Action::Send(conn, Frame::Pong));
                (out, None)
            }
            Frame::Pong => (out, None),
            Frame::Connack | Frame::Reject { .. } | Frame::Suback { .. } => {
                self.reject(conn, "protocol error: server-only frame", &mut out);
                (out, None)
            }
        }
    }

    fn connect(&mut self, conn: ConnId, key: &str, client_id: &str, out: &mut Vec<Action>) {
        let device = key
            .parse::<DeviceKey>()
            .ok()
            .and_then(|k| self.whitelist.authenticate(&k).map(|d| (k, d.to_owned())));
        let Some((key, device_id)) = device else {
            self.stats.connections_rejected += 1;
            self.reject(conn, "unauthorized", out);
            return;
        };
        // A reconnecting client replaces its stale session.
        let stale: Vec<ConnId> = self
            .sessions
            .iter()
            .filter(|(c, s)| {
                **c != conn && s.identity.as_ref().is_some_and(|i| i.client_id == client_id)
            })
            .map(|(c, _)| *c)
            .collect();
        for c in stale {
            self.reject(c, "session taken over", out);
        }
        let revoked = self.whitelist.on_authenticated(&key);
        if !revoked.is_empty() {
            self.whitelist_dirty = true;
            self.close_sessions_with(&revoked, out);
        }
        self.stats.connections_accepted += 1;
        if let Some(s) = self.sessions.get_mut(&conn) {
            s.identity = Some(Identity {
                device_id,
                client_id: client_id.to_owned(),
                key,
            });
            out.push(Action::Send(conn, Frame::Connack));
        }
    }

    fn subscribe(&mut self, conn: ConnId, filter: &str, now_ms: u64, out: &mut Vec<Action>) {
        let Ok(parsed) = TopicFilter::parse(filter) else {
            self.reject(conn, &format!("protocol error: bad filter {filter:?}"), out);
            return;
        };
        let Some(session) = self.sessions.get_mut(&conn) else {
            return;
        };
        if !session.subs.contains(&parsed) {
            session.subs.push(parsed.clone());
        }
        out.push(Action::Send(
            conn,
            Frame::Suback {
                filter: filter.to_owned(),
            },
        ));
        let identity = session.identity.clone().expect("authenticated");
        let replay: Vec<(TopicName, String)> = self
            .retained
            .iter()
            .filter(|(t, _)| parsed.matches(t) && may_receive(&identity, t))
            .map(|(t, p)| (t.clone(), p.clone()))
            .collect();
        for (topic, payload) in replay {
            self.deliver(conn, &topic, &payload, 1, now_ms, out);
        }
    }

    fn client_publish(
        &mut self,
        conn: ConnId,
        topic: &str,
        payload: String,
        now_ms: u64,
        out: &mut Vec<Action>,
    ) -> Option<Inbound> {
        let Ok(topic) = TopicName::parse(topic) else {
            self.reject(conn, &format!("protocol error: bad topic {topic:?}"), out);
            return None;
        };
        let device_id = self.device_of(conn)?.to_owned();
        self.stats.publishes_in += 1;
        if is_server_owned(&topic) || device_scope(&topic).is_some_and(|d| d != device_id) {
            self.stats.publishes_denied += 1;
            tracing::warn!(%topic, device_id, "publication denied");
            return None;
        }
        self.route(&topic, &payload, 1, now_ms, out);
        Some(Inbound {
            device_id,
            topic,
            payload,
        })
    }

    /// Publishes on behalf of the server. Retainable topics keep the payload
    /// for future subscribers.
    pub fn publish(&mut self, topic: &TopicName, payload: &str, qos: u8, now_ms: u64) -> Vec<Action> {
        let mut out = Vec::new();
        if is_retained(topic) {
            self.retained.insert(topic.clone(), payload.to_owned());
        }
        self.route(topic, payload, qos, now_ms, &mut out);
        out
    }

    fn route(&mut self, topic: &TopicName, payload: &str, qos: u8, now_ms: u64, out: &mut Vec<Action>) {
        let targets: Vec<ConnId> = self
            .sessions
            .iter()
            .filter(|(_, s)| {
                s.identity.as_ref().is_some_and(|i| may_receive(i, topic))
                    && s.subs.iter().any(|f| f.matches(topic))
            })
            .map(|(c, _)| *c)
            .collect();
        for conn in targets {
            self.deliver(conn, topic, payload, qos, now_ms, out);
        }
    }

    fn deliver(&mut self, conn: ConnId, topic: &TopicName, payload: &str, qos: u8, now_ms: u64, out: &mut Vec<Action>) {
        let max_inflight = self.config.max_inflight;
        let Some(s) = self.sessions.get_mut(&conn) else {
            return;
        };
        if qos == 0 {
            self.stats.deliveries += 1;
            out.push(Action::Send(conn, Frame::publish(topic.as_str(), 0, 0, payload)));
            return;
        }
        if s.inflight.len() >= max_inflight {
            tracing::warn!(conn, "inflight limit reached, closing session");
            self.reject(conn, "inflight limit exceeded", out);
            return;
        }
        let mid = s.allocate_mid();
        s.inflight.insert(
            mid,
            Pending {
                topic: topic.as_str().to_owned(),
                payload: payload.to_owned(),
                attempts: 1,
                next_send_ms: now_ms + self.config.retransmit_ms,
            },
        );
        self.stats.deliveries += 1;
        out.push(Action::Send(conn, Frame::publish(topic.as_str(), mid, 1, payload)));
    }

    /// Retransmits overdue deliveries and expires rotated keys.
    pub fn tick(&mut self, now_ms: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let expired = self.whitelist.expire(now_ms);
        if !expired.is_empty() {
            self.whitelist_dirty = true;
            self.close_sessions_with(&expired, &mut out);
        }
        let cfg = self.config;
        for (conn, s) in self.sessions.iter_mut() {
            s.inflight.retain(|mid, p| {
                if now_ms < p.next_send_ms {
                    return true;
                }
                if p.attempts >= cfg.max_attempts {
                    self.stats.deliveries_abandoned += 1;
                    tracing::warn!(conn, mid, topic = %p.topic, "delivery abandoned");
                    return false;
                }
                p.attempts += 1;
                p.next_send_ms = now_ms + cfg.retransmit_ms;
                self.stats.retransmissions += 1;
                out.push(Action::Send(*conn, Frame::publish(&p.topic, *mid, 1, &p.payload)));
                true
            });
        }
        out
    }

    fn close_sessions_with(&mut self, keys: &[DeviceKey], out: &mut Vec<Action>) {
        let victims: Vec<ConnId> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.identity.as_ref().is_some_and(|i| keys.contains(&i.key)))
            .map(|(c, _)| *c)
            .collect();
        for c in victims {
            self.reject(c, "key revoked", out);
        }
    }

    /// Revokes a key and terminates every session that authenticated with it.
    pub fn revoke(&mut self, key: &DeviceKey) -> Vec<Action> {
        let mut out = Vec::new();
        if self.whitelist.revoke(key) {
            self.whitelist_dirty = true;
            self.close_sessions_with(&[*key], &mut out);
        }
        out
    }

    /// Replaces the whitelist wholesale (an operator edited the file).
    /// Sessions whose key no longer authenticates are terminated.
    pub fn replace_whitelist(&mut self, whitelist: Whitelist) -> Vec<Action> {
        self.whitelist = whitelist;
        let dead: Vec<DeviceKey> = self
            .sessions
            .values()
            .filter_map(|s| s.identity.as_ref())
            .filter(|i| self.whitelist.authenticate(&i.key) != Some(i.device_id.as_str()))
            .map(|i| i.key)
            .collect();
        let mut out = Vec::new();
        self.close_sessions_with(&dead, &mut out);
        out
    }

    pub fn add_device(&mut self, device_id: &str, device_type: &str, key: DeviceKey) -> Result<(), WhitelistError> {
        self.whitelist.add_device(device_id, device_type, key)?;
        self.whitelist_dirty = true;
        Ok(())
    }

    /// Issues a fresh key for `device_id` and pushes it on the device's
    /// retained key topic. The old key keeps working until the device
    /// reconnects with the new one or the grace period runs out.
    pub fn rotate_key<R: Rng + ?Sized>(
        &mut self,
        device_id: &str,
        rng: &mut R,
        now_ms: u64,
    ) -> Result<(DeviceKey, Vec<Action>), WhitelistError> {
        let key = loop {
            let k = DeviceKey::generate(rng);
            if self.whitelist.status(&k).is_none() {
                break k;
            }
        };
        self.whitelist.begin_rotation(device_id, key, now_ms)?;
        self.whitelist_dirty = true;
        let topic = TopicName::parse(&format!("devices/{device_id}/key")).expect("valid device id");
        let payload = to_payload(&KeyPayload {
            device_id: device_id.to_owned(),
            key: key.to_hex(),
        });
        Ok((key, self.publish(&topic, &payload, 1, now_ms)))
    }
}
