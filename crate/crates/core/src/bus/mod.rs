//! Distribution bus: naming, request/reply, publish/subscribe and multicast
//! stream channels.
//!
//! Every message crosses the bus as an encoded [`MessageEnvelope`], whether
//! the target lives in this process (`inproc://` addresses, crossbeam
//! mailboxes) or behind a TCP bridge (`tcp://` addresses).

mod envelope;
mod pubsub;
mod stream;
pub mod tcp;
mod topic;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender, TrySendError};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

pub use envelope::{read_frame, write_frame, EnvelopeError, MessageEnvelope, MessageKind};
pub use pubsub::{Event, Subscription};
pub use stream::{StreamConsumer, StreamFrame, StreamProducer};
pub use topic::{is_valid_name, TopicPattern};

use crate::clock::{SimClock, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub node_id: String,
    pub address: String,
    pub incarnation: u64,
}

impl Endpoint {
    /// In-process endpoint whose address is derived from the node id and
    /// incarnation, so a restarted node never reuses a dead mailbox.
    pub fn inproc(node_id: impl Into<String>, incarnation: u64) -> Self {
        let node_id = node_id.into();
        Endpoint {
            address: format!("inproc://{node_id}#{incarnation}"),
            node_id,
            incarnation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameRecord {
    pub name: String,
    pub endpoint: Endpoint,
    pub registered_at: SimTime,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum BusError {
    #[error("malformed name {0:?}")]
    MalformedName(String),
    #[error("malformed topic {0:?}")]
    MalformedTopic(String),
    #[error("stale incarnation for {name}: offered {offered}, live {live}")]
    StaleIncarnation { name: String, offered: u64, live: u64 },
    #[error("name not found: {0}")]
    NameNotFound(String),
    #[error("deadline of {deadline:?} exceeded waiting on {target}")]
    DeadlineExceeded { target: String, deadline: Duration },
    #[error("target unavailable: {0}")]
    TargetUnavailable(String),
    #[error("command queue full at {0}")]
    QueueFull(String),
    #[error("stream not found: {0}")]
    StreamNotFound(String),
    #[error("deadline must be positive")]
    InvalidDeadline,
    #[error("address already bound: {0}")]
    AddressInUse(String),
    #[error("port unavailable: {0}")]
    PortUnavailable(String),
    #[error("reply correlation {got} does not match request {expected}")]
    CorrelationMismatch { expected: u64, got: u64 },
    #[error("envelope: {0}")]
    Envelope(#[from] EnvelopeError),
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone)]
pub struct BusConfig {
    /// Deliver an event once per subscriber endpoint even when several of its
    /// subscriptions match.
    pub dedup_overlapping: bool,
    /// Extra time a caller may stay blocked past its deadline.
    pub deadline_slack: Duration,
    pub default_mailbox_depth: usize,
    pub stream_buffer: usize,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            dedup_overlapping: false,
            deadline_slack: Duration::from_millis(20),
            default_mailbox_depth: 64,
            stream_buffer: 64,
        }
    }
}

pub struct Inbound {
    frame: Vec<u8>,
    reply: Sender<Vec<u8>>,
}

pub(crate) struct Inner {
    pub(crate) clock: SimClock,
    pub(crate) config: BusConfig,
    names: RwLock<BTreeMap<String, NameRecord>>,
    incarnations: RwLock<HashMap<String, u64>>,
    mailboxes: RwLock<HashMap<String, Sender<Inbound>>>,
    pub(crate) subs: RwLock<Vec<Arc<pubsub::SubShared>>>,
    pub(crate) streams: RwLock<HashMap<String, Arc<stream::StreamShared>>>,
    next_corr: AtomicU64,
    pub(crate) next_sub: AtomicU64,
    tcp: tcp::Pool,
}

/// Handle to one bus. Clones share state.
#[derive(Clone)]
pub struct Bus {
    pub(crate) inner: Arc<Inner>,
}

impl std::fmt::Debug for Bus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bus")
            .field("names", &self.inner.names.read().len())
            .finish()
    }
}

impl Bus {
    pub fn new(clock: SimClock) -> Self {
        Self::with_config(clock, BusConfig::default())
    }

    pub fn with_config(clock: SimClock, config: BusConfig) -> Self {
        Bus {
            inner: Arc::new(Inner {
                clock,
                config,
                names: RwLock::new(BTreeMap::new()),
                incarnations: RwLock::new(HashMap::new()),
                mailboxes: RwLock::new(HashMap::new()),
                subs: RwLock::new(Vec::new()),
                streams: RwLock::new(HashMap::new()),
                next_corr: AtomicU64::new(1),
                next_sub: AtomicU64::new(1),
                tcp: tcp::Pool::default(),
            }),
        }
    }

    pub fn clock(&self) -> &SimClock {
        &self.inner.clock
    }

    pub fn config(&self) -> &BusConfig {
        &self.inner.config
    }

    // ---- naming -------------------------------------------------------

    pub fn register_name(&self, name: &str, endpoint: &Endpoint) -> Result<NameRecord, BusError> {
        if !is_valid_name(name) {
            return Err(BusError::MalformedName(name.to_string()));
        }
        let mut names = self.inner.names.write();
        if let Some(live) = names.get(name) {
            if endpoint.incarnation < live.endpoint.incarnation {
                return Err(BusError::StaleIncarnation {
                    name: name.to_string(),
                    offered: endpoint.incarnation,
                    live: live.endpoint.incarnation,
                });
            }
        }
        let record = NameRecord {
            name: name.to_string(),
            endpoint: endpoint.clone(),
            registered_at: self.inner.clock.now(),
        };
        names.insert(name.to_string(), record.clone());
        let mut inc = self.inner.incarnations.write();
        let e = inc.entry(endpoint.node_id.clone()).or_insert(0);
        *e = (*e).max(endpoint.incarnation);
        Ok(record)
    }

    pub fn resolve_name(&self, name: &str) -> Result<Endpoint, BusError> {
        self.inner
            .names
            .read()
            .get(name)
            .map(|r| r.endpoint.clone())
            .ok_or_else(|| BusError::NameNotFound(name.to_string()))
    }

    pub fn lookup(&self, name: &str) -> Option<NameRecord> {
        self.inner.names.read().get(name).cloned()
    }

    pub fn deregister_name(&self, name: &str) -> Result<NameRecord, BusError> {
        self.inner
            .names
            .write()
            .remove(name)
            .ok_or_else(|| BusError::NameNotFound(name.to_string()))
    }

    /// Removes every name pointing at `node_id`. Returns how many were removed.
    pub fn deregister_node(&self, node_id: &str) -> usize {
        let mut names = self.inner.names.write();
        let before = names.len();
        names.retain(|_, r| r.endpoint.node_id != node_id);
        before - names.len()
    }

    /// Removes the names bound to exactly this endpoint incarnation.
    pub fn deregister_endpoint(&self, endpoint: &Endpoint) -> usize {
        let mut names = self.inner.names.write();
        let before = names.len();
        names.retain(|_, r| r.endpoint != *endpoint);
        before - names.len()
    }

    /// Incarnation to use for the next start of `node_id`.
    pub fn next_incarnation(&self, node_id: &str) -> u64 {
        self.inner
            .incarnations
            .read()
            .get(node_id)
            .map_or(1, |i| i + 1)
    }

    pub fn names(&self) -> Vec<NameRecord> {
        self.inner.names.read().values().cloned().collect()
    }

    // ---- in-process transport ----------------------------------------

    /// Binds a mailbox for an `inproc://` endpoint.
    pub fn bind(&self, endpoint: &Endpoint, depth: Option<usize>) -> Result<Inbox, BusError> {
        let depth = depth.unwrap_or(self.inner.config.default_mailbox_depth);
        let mut boxes = self.inner.mailboxes.write();
        if boxes.contains_key(&endpoint.address) {
            return Err(BusError::AddressInUse(endpoint.address.clone()));
        }
        let (tx, rx) = bounded(depth);
        boxes.insert(endpoint.address.clone(), tx);
        Ok(Inbox {
            address: endpoint.address.clone(),
            rx,
            bus: self.clone(),
        })
    }

    pub(crate) fn unbind(&self, address: &str) {
        self.inner.mailboxes.write().remove(address);
    }

    /// Binds a mailbox, registers `names` and runs `handler` on a dedicated
    /// thread, one request at a time.
    pub fn serve<F>(&self, endpoint: &Endpoint, names: &[&str], mut handler: F) -> Result<ServiceHandle, BusError>
    where
        F: FnMut(&Request) -> Vec<u8> + Send + 'static,
    {
        let inbox = self.bind(endpoint, None)?;
        for n in names {
            self.register_name(n, endpoint)?;
        }
        let thread = std::thread::Builder::new()
            .name(endpoint.node_id.clone())
            .spawn(move || {
                while let Some(req) = inbox.recv() {
                    let out = handler(&req);
                    req.reply(out);
                }
            })
            .map_err(|e| BusError::Transport(e.to_string()))?;
        Ok(ServiceHandle {
            bus: self.clone(),
            endpoint: endpoint.clone(),
            thread: Some(thread),
        })
    }

    // ---- request / reply ----------------------------------------------

    pub fn request(&self, target: &str, payload: Vec<u8>, deadline: Duration) -> Result<Vec<u8>, BusError> {
        if deadline.is_zero() {
            return Err(BusError::InvalidDeadline);
        }
        let endpoint = self.resolve_name(target)?;
        let mut env = MessageEnvelope::new(MessageKind::Request, target, payload);
        env.correlation_id = self.inner.next_corr.fetch_add(1, Ordering::Relaxed);
        env.deadline = Some(deadline);
        env.sent_at = self.inner.clock.now();
        let frame = env.encode()?;
        let reply = if let Some(addr) = endpoint.address.strip_prefix("tcp://") {
            self.inner.tcp.exchange(addr, target, &frame, deadline)?
        } else {
            self.exchange_inproc(&endpoint, target, frame, deadline)?
        };
        let reply = MessageEnvelope::decode(&reply)?;
        if reply.kind != MessageKind::Reply || reply.correlation_id != env.correlation_id {
            return Err(BusError::CorrelationMismatch {
                expected: env.correlation_id,
                got: reply.correlation_id,
            });
        }
        Ok(reply.payload)
    }

    fn exchange_inproc(
        &self,
        endpoint: &Endpoint,
        target: &str,
        frame: Vec<u8>,
        deadline: Duration,
    ) -> Result<Vec<u8>, BusError> {
        let tx = self
            .inner
            .mailboxes
            .read()
            .get(&endpoint.address)
            .cloned()
            .ok_or_else(|| BusError::TargetUnavailable(target.to_string()))?;
        let (reply_tx, reply_rx) = bounded(1);
        match tx.try_send(Inbound { frame, reply: reply_tx }) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => return Err(BusError::QueueFull(target.to_string())),
            Err(TrySendError::Disconnected(_)) => {
                return Err(BusError::TargetUnavailable(target.to_string()))
            }
        }
        drop(tx);
        match reply_rx.recv_timeout(deadline) {
            Ok(bytes) => Ok(bytes),
            Err(RecvTimeoutError::Timeout) => Err(BusError::DeadlineExceeded {
                target: target.to_string(),
                deadline,
            }),
            Err(RecvTimeoutError::Disconnected) => Err(BusError::TargetUnavailable(target.to_string())),
        }
    }

    /// Dispatches an already-encoded request frame to a local service. Used
    /// by the TCP bridge.
    pub(crate) fn dispatch_frame(&self, frame: Vec<u8>) -> Result<Vec<u8>, BusError> {
        let env = MessageEnvelope::decode(&frame)?;
        let deadline = env.deadline.unwrap_or(Duration::from_secs(5));
        let endpoint = self.resolve_name(&env.topic_or_target)?;
        if endpoint.address.starts_with("tcp://") {
            return Err(BusError::TargetUnavailable(format!(
                "{} is not hosted on this bus",
                env.topic_or_target
            )));
        }
        self.exchange_inproc(&endpoint, &env.topic_or_target, frame, deadline)
    }
}

/// Receiving side of an in-process mailbox.
pub struct Inbox {
    address: String,
    rx: Receiver<Inbound>,
    bus: Bus,
}

impl Inbox {
    pub fn recv(&self) -> Option<Request> {
        loop {
            let inbound = self.rx.recv().ok()?;
            if let Some(r) = self.decode(inbound) {
                return Some(r);
            }
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Request>, RecvTimeoutError> {
        let inbound = self.rx.recv_timeout(timeout)?;
        Ok(self.decode(inbound))
    }

    /// Raw receiver for use in `crossbeam_channel::select!`; decode with
    /// [`Inbox::accept`].
    pub fn receiver(&self) -> &Receiver<Inbound> {
        &self.rx
    }

    pub fn accept(&self, inbound: Inbound) -> Option<Request> {
        self.decode(inbound)
    }

    fn decode(&self, inbound: Inbound) -> Option<Request> {
        match MessageEnvelope::decode(&inbound.frame) {
            Ok(envelope) => Some(Request {
                envelope,
                reply: inbound.reply,
                clock: self.bus.inner.clock.clone(),
            }),
            Err(e) => {
                tracing::warn!(address = %self.address, error = %e, "dropping undecodable frame");
                None
            }
        }
    }

    pub fn address(&self) -> &str {
        &self.address
    }
}

impl Drop for Inbox {
    fn drop(&mut self) {
        self.bus.unbind(&self.address);
    }
}

/// One received request. Replying consumes it; dropping it unanswered makes
/// the caller see `TargetUnavailable`.
pub struct Request {
    pub envelope: MessageEnvelope,
    reply: Sender<Vec<u8>>,
    clock: SimClock,
}

impl Request {
    pub fn target(&self) -> &str {
        &self.envelope.topic_or_target
    }

    pub fn payload(&self) -> &[u8] {
        &self.envelope.payload
    }

    pub fn reply(self, payload: Vec<u8>) {
        let env = self.envelope.reply_to(payload, self.clock.now());
        if let Ok(frame) = env.encode() {
            let _ = self.reply.send(frame);
        }
    }
}

/// Owns a service thread started by [`Bus::serve`].
pub struct ServiceHandle {
    bus: Bus,
    endpoint: Endpoint,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Unbinds the mailbox and deregisters the node's names, then joins.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.bus.deregister_endpoint(&self.endpoint);
        self.bus.unbind(&self.endpoint.address);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
