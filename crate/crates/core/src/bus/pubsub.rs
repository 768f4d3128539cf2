use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::{Bus, BusError, Endpoint, Inner, MessageEnvelope, MessageKind, TopicPattern};
use crate::clock::SimTime;

pub(crate) struct SubShared {
    pub(crate) id: u64,
    pub(crate) pattern: TopicPattern,
    pub(crate) subscriber: Endpoint,
    tx: Sender<Vec<u8>>,
    delivered: AtomicU64,
    active: AtomicBool,
}

/// A decoded event as seen by a subscriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub topic: String,
    pub payload: Vec<u8>,
    pub sent_at: SimTime,
    /// Bus-wide publish sequence number.
    pub seq: u64,
}

/// Live subscription with its ordered delivery queue. Dropping it
/// unsubscribes.
pub struct Subscription {
    shared: Arc<SubShared>,
    rx: Receiver<Vec<u8>>,
    bus: Weak<Inner>,
}

impl std::fmt::Debug for Subscription {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Subscription")
            .field("id", &self.shared.id)
            .field("pattern", &self.shared.pattern.as_str())
            .finish()
    }
}

impl Subscription {
    pub fn pattern(&self) -> &TopicPattern {
        &self.shared.pattern
    }

    pub fn subscriber(&self) -> &Endpoint {
        &self.shared.subscriber
    }

    /// Number of events delivered to this subscription so far.
    pub fn delivery_count(&self) -> u64 {
        self.shared.delivered.load(Ordering::Acquire)
    }

    pub fn recv(&self) -> Option<Event> {
        self.rx.recv().ok().and_then(decode)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Event> {
        self.rx.recv_timeout(timeout).ok().and_then(decode)
    }

    pub fn try_recv(&self) -> Option<Event> {
        self.rx.try_recv().ok().and_then(decode)
    }

    /// Drains whatever is queued right now.
    pub fn drain(&self) -> Vec<Event> {
        self.rx.try_iter().filter_map(decode).collect()
    }

    pub fn receiver(&self) -> &Receiver<Vec<u8>> {
        &self.rx
    }

    pub fn decode_frame(frame: Vec<u8>) -> Option<Event> {
        decode(frame)
    }

    pub fn unsubscribe(self) {}
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.shared.active.store(false, Ordering::Release);
        if let Some(inner) = self.bus.upgrade() {
            inner.subs.write().retain(|s| s.id != self.shared.id);
        }
    }
}

fn decode(frame: Vec<u8>) -> Option<Event> {
    let env = MessageEnvelope::decode(&frame).ok()?;
    Some(Event {
        topic: env.topic_or_target,
        payload: env.payload,
        sent_at: env.sent_at,
        seq: env.correlation_id,
    })
}

impl Bus {
    pub fn subscribe(&self, pattern: &str) -> Result<Subscription, BusError> {
        let id = self.inner.next_sub.load(Ordering::Relaxed);
        self.subscribe_as(pattern, &Endpoint::inproc(format!("sub-{id}"), 1))
    }

    /// Subscribes on behalf of a named endpoint. Overlapping patterns held
    /// by the same endpoint each receive a copy unless
    /// `BusConfig::dedup_overlapping` is set.
    pub fn subscribe_as(&self, pattern: &str, subscriber: &Endpoint) -> Result<Subscription, BusError> {
        let pattern =
            TopicPattern::parse(pattern).ok_or_else(|| BusError::MalformedTopic(pattern.to_string()))?;
        let (tx, rx) = unbounded();
        let shared = Arc::new(SubShared {
            id: self.inner.next_sub.fetch_add(1, Ordering::Relaxed),
            pattern,
            subscriber: subscriber.clone(),
            tx,
            delivered: AtomicU64::new(0),
            active: AtomicBool::new(true),
        });
        self.inner.subs.write().push(shared.clone());
        Ok(Subscription {
            shared,
            rx,
            bus: Arc::downgrade(&self.inner),
        })
    }

    /// Publishes to every current matching subscription. Returns the number
    /// of deliveries initiated.
    pub fn publish(&self, topic: &str, payload: Vec<u8>) -> Result<usize, BusError> {
        if !super::is_valid_name(topic) {
            return Err(BusError::MalformedTopic(topic.to_string()));
        }
        let mut env = MessageEnvelope::new(MessageKind::Event, topic, payload);
        env.sent_at = self.inner.clock.now();
        // Subscriber list is read-locked for the whole fan-out so a single
        // publish is atomic with respect to subscribe/unsubscribe.
        let subs = self.inner.subs.read();
        env.correlation_id = self.inner.next_corr.fetch_add(1, Ordering::Relaxed);
        let frame = env.encode()?;
        let mut seen: HashSet<&Endpoint> = HashSet::new();
        let mut count = 0;
        for s in subs.iter() {
            if !s.active.load(Ordering::Acquire) || !s.pattern.matches(topic) {
                continue;
            }
            if self.inner.config.dedup_overlapping && !seen.insert(&s.subscriber) {
                continue;
            }
            if s.tx.send(frame.clone()).is_ok() {
                s.delivered.fetch_add(1, Ordering::AcqRel);
                count += 1;
            }
        }
        Ok(count)
    }

    pub fn subscription_count(&self) -> usize {
        self.inner.subs.read().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::BusConfig;
    use crate::clock::SimClock;

    fn bus() -> Bus {
        Bus::new(SimClock::new_virtual())
    }

    #[test]
    fn publish_without_subscribers() {
        assert_eq!(bus().publish("status/beam01/motor", vec![1]).unwrap(), 0);
    }

    #[test]
    fn fan_out_and_mismatch() {
        let b = bus();
        let s1 = b.subscribe("status/beam01/*").unwrap();
        let s2 = b.subscribe("status/beam01/*").unwrap();
        let other = b.subscribe("status/beam02/*").unwrap();
        assert_eq!(b.publish("status/beam01/motor", b"x".to_vec()).unwrap(), 2);
        assert_eq!(s1.try_recv().unwrap().payload, b"x");
        assert_eq!(s2.try_recv().unwrap().topic, "status/beam01/motor");
        assert!(other.try_recv().is_none());
        assert_eq!(s1.delivery_count(), 1);
        assert_eq!(other.delivery_count(), 0);
    }

    #[test]
    fn fifo_per_publisher() {
        let b = bus();
        let s = b.subscribe("t/*").unwrap();
        for i in 0..3u8 {
            b.publish("t/x", vec![i]).unwrap();
        }
        let got: Vec<u8> = s.drain().into_iter().map(|e| e.payload[0]).collect();
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn unsubscribe_stops_delivery() {
        let b = bus();
        let s = b.subscribe("t/*").unwrap();
        s.unsubscribe();
        assert_eq!(b.publish("t/x", vec![]).unwrap(), 0);
        assert_eq!(b.subscription_count(), 0);
    }

    #[test]
    fn overlapping_patterns_default_and_dedup() {
        let b = bus();
        let me = Endpoint::inproc("console", 1);
        let a = b.subscribe_as("a/*", &me).unwrap();
        let ab = b.subscribe_as("a/b", &me).unwrap();
        assert_eq!(b.publish("a/b", vec![]).unwrap(), 2);
        drop((a, ab));

        let d = Bus::with_config(
            SimClock::new_virtual(),
            BusConfig {
                dedup_overlapping: true,
                ..BusConfig::default()
            },
        );
        let _a = d.subscribe_as("a/*", &me).unwrap();
        let _ab = d.subscribe_as("a/b", &me).unwrap();
        assert_eq!(d.publish("a/b", vec![]).unwrap(), 1);
    }

    #[test]
    fn malformed_topics() {
        let b = bus();
        assert!(matches!(b.subscribe("a//b"), Err(BusError::MalformedTopic(_))));
        assert!(matches!(b.publish("a/*", vec![]), Err(BusError::MalformedTopic(_))));
    }

    #[test]
    fn concurrent_publishers_keep_their_own_order() {
        let b = bus();
        let s = b.subscribe("p/*").unwrap();
        let hs: Vec<_> = (0..4u8)
            .map(|p| {
                let b = b.clone();
                std::thread::spawn(move || {
                    for i in 0..500u16 {
                        let mut v = vec![p];
                        v.extend_from_slice(&i.to_be_bytes());
                        b.publish(&format!("p/{p}"), v).unwrap();
                    }
                })
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        let mut last = [None::<u16>; 4];
        let events = s.drain();
        assert_eq!(events.len(), 2000);
        assert_eq!(s.delivery_count(), 2000);
        for e in events {
            let p = e.payload[0] as usize;
            let i = u16::from_be_bytes([e.payload[1], e.payload[2]]);
            if let Some(prev) = last[p] {
                assert_eq!(i, prev + 1);
            }
            last[p] = Some(i);
        }
    }
}
