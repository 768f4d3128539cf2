//! Multicast stream channels (camera video).
//!
//! Consumers join at the live edge: nothing is replayed. A slow consumer's
//! full buffer drops frames for that consumer only; the gap shows up in its
//! sequence numbers.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use parking_lot::Mutex;

use super::{is_valid_name, Bus, BusError, Inner, MessageEnvelope, MessageKind};
use crate::clock::SimTime;

pub(crate) struct StreamShared {
    id: String,
    rate_hz: f64,
    consumers: Mutex<Vec<(u64, Sender<Vec<u8>>)>>,
    next_consumer: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamFrame {
    pub stream_id: String,
    pub sequence: u64,
    pub sent_at: SimTime,
    pub payload: Vec<u8>,
}

/// Producing side. Dropping it removes the stream.
pub struct StreamProducer {
    shared: Arc<StreamShared>,
    next_seq: u64,
    bus: Weak<Inner>,
}

impl StreamProducer {
    pub fn stream_id(&self) -> &str {
        &self.shared.id
    }

    pub fn consumer_count(&self) -> usize {
        self.shared.consumers.lock().len()
    }

    /// Sends one frame to every consumer. Returns its sequence number.
    pub fn push(&mut self, payload: Vec<u8>) -> u64 {
        self.next_seq += 1;
        let seq = self.next_seq;
        let sent_at = self
            .bus
            .upgrade()
            .map(|i| i.clock.now())
            .unwrap_or_default();
        let mut env = MessageEnvelope::new(MessageKind::StreamFrame, self.shared.id.clone(), payload);
        env.sequence = seq;
        env.sent_at = sent_at;
        let frame = match env.encode() {
            Ok(f) => f,
            Err(_) => return seq,
        };
        self.shared.consumers.lock().retain(|(_, tx)| match tx.try_send(frame.clone()) {
            Ok(()) | Err(TrySendError::Full(_)) => true,
            Err(TrySendError::Disconnected(_)) => false,
        });
        seq
    }
}

impl Drop for StreamProducer {
    fn drop(&mut self) {
        if let Some(inner) = self.bus.upgrade() {
            let mut streams = inner.streams.write();
            if streams
                .get(&self.shared.id)
                .is_some_and(|s| Arc::ptr_eq(s, &self.shared))
            {
                streams.remove(&self.shared.id);
            }
        }
    }
}

/// Consuming side of a stream.
pub struct StreamConsumer {
    stream_id: String,
    rate_hz: f64,
    rx: Receiver<Vec<u8>>,
    last_seq: Option<u64>,
    gaps: u64,
    received: u64,
}

impl StreamConsumer {
    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// Producer's declared frame rate.
    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Option<StreamFrame> {
        let raw = self.rx.recv_timeout(timeout).ok()?;
        self.accept(raw)
    }

    pub fn try_recv(&mut self) -> Option<StreamFrame> {
        let raw = self.rx.try_recv().ok()?;
        self.accept(raw)
    }

    /// Frames missing between consecutive received sequence numbers.
    pub fn gaps(&self) -> u64 {
        self.gaps
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    fn accept(&mut self, raw: Vec<u8>) -> Option<StreamFrame> {
        let env = MessageEnvelope::decode(&raw).ok()?;
        if let Some(prev) = self.last_seq {
            self.gaps += env.sequence.saturating_sub(prev + 1);
        }
        self.last_seq = Some(env.sequence);
        self.received += 1;
        Some(StreamFrame {
            stream_id: env.topic_or_target,
            sequence: env.sequence,
            sent_at: env.sent_at,
            payload: env.payload,
        })
    }
}

impl Bus {
    /// Declares a stream produced at `rate_hz`. Re-registering an id replaces
    /// the previous producer.
    pub fn register_stream(&self, stream_id: &str, rate_hz: f64) -> Result<StreamProducer, BusError> {
        if !is_valid_name(stream_id) {
            return Err(BusError::MalformedName(stream_id.to_string()));
        }
        let shared = Arc::new(StreamShared {
            id: stream_id.to_string(),
            rate_hz,
            consumers: Mutex::new(Vec::new()),
            next_consumer: AtomicU64::new(1),
        });
        self.inner
            .streams
            .write()
            .insert(stream_id.to_string(), shared.clone());
        Ok(StreamProducer {
            shared,
            next_seq: 0,
            bus: Arc::downgrade(&self.inner),
        })
    }

    pub fn open_stream(&self, stream_id: &str) -> Result<StreamConsumer, BusError> {
        let shared = self
            .inner
            .streams
            .read()
            .get(stream_id)
            .cloned()
            .ok_or_else(|| BusError::StreamNotFound(stream_id.to_string()))?;
        let (tx, rx) = bounded(self.inner.config.stream_buffer);
        let id = shared.next_consumer.fetch_add(1, Ordering::Relaxed);
        shared.consumers.lock().push((id, tx));
        Ok(StreamConsumer {
            stream_id: stream_id.to_string(),
            rate_hz: shared.rate_hz,
            rx,
            last_seq: None,
            gaps: 0,
            received: 0,
        })
    }

    pub fn streams(&self) -> Vec<String> {
        let mut v: Vec<String> = self.inner.streams.read().keys().cloned().collect();
        v.sort();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;

    #[test]
    fn unknown_stream() {
        let b = Bus::new(SimClock::new_virtual());
        assert!(matches!(b.open_stream("video/none"), Err(BusError::StreamNotFound(_))));
    }

    #[test]
    fn multicast_same_sequence_numbers() {
        let b = Bus::new(SimClock::new_virtual());
        let mut p = b.register_stream("video/cam01", 10.0).unwrap();
        let mut c1 = b.open_stream("video/cam01").unwrap();
        let mut c2 = b.open_stream("video/cam01").unwrap();
        for _ in 0..5 {
            p.push(vec![1, 2, 3]);
        }
        let s1: Vec<u64> = (0..5).map(|_| c1.try_recv().unwrap().sequence).collect();
        let s2: Vec<u64> = (0..5).map(|_| c2.try_recv().unwrap().sequence).collect();
        assert_eq!(s1, vec![1, 2, 3, 4, 5]);
        assert_eq!(s1, s2);
        assert_eq!(c1.gaps(), 0);
    }

    #[test]
    fn late_consumer_joins_at_live_edge() {
        let b = Bus::new(SimClock::new_virtual());
        let mut p = b.register_stream("video/cam01", 10.0).unwrap();
        p.push(vec![]);
        p.push(vec![]);
        let mut late = b.open_stream("video/cam01").unwrap();
        assert!(late.try_recv().is_none());
        p.push(vec![]);
        assert_eq!(late.try_recv().unwrap().sequence, 3);
    }

    #[test]
    fn producer_drop_removes_stream() {
        let b = Bus::new(SimClock::new_virtual());
        let p = b.register_stream("video/x", 10.0).unwrap();
        drop(p);
        assert!(b.streams().is_empty());
    }

    #[test]
    fn overflow_is_counted_as_gap() {
        let b = Bus::new(SimClock::new_virtual());
        let mut p = b.register_stream("video/x", 10.0).unwrap();
        let mut c = b.open_stream("video/x").unwrap();
        for _ in 0..(b.config().stream_buffer + 10) {
            p.push(vec![]);
        }
        while c.try_recv().is_some() {}
        p.push(vec![]);
        c.try_recv().unwrap();
        assert_eq!(c.gaps(), 10);
    }
}
