//! TCP transport: length-prefixed envelopes over plain sockets.
//!
//! A [`TcpBridge`] exposes a local bus to other processes. Requests arriving
//! on the bridge are dispatched to local services by target name; events are
//! re-published locally. The reserved target `bus/register` lets a remote
//! process register a name pointing back at its own bridge.
//!
//! A reply whose `sequence` field is non-zero carries a bus-level error code
//! instead of a service payload (see [`error_code`]).

use std::collections::HashMap;
use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{read_frame, write_frame, Bus, BusError, Endpoint, MessageEnvelope, MessageKind};
use crate::clock::SimTime;

pub const REGISTER_TARGET: &str = "bus/register";

fn error_code(e: &BusError) -> u64 {
    match e {
        BusError::NameNotFound(_) => 1,
        BusError::TargetUnavailable(_) => 2,
        BusError::DeadlineExceeded { .. } => 3,
        BusError::QueueFull(_) => 4,
        _ => 5,
    }
}

fn error_from_code(code: u64, target: &str, msg: String, deadline: Duration) -> BusError {
    match code {
        1 => BusError::NameNotFound(target.to_string()),
        2 => BusError::TargetUnavailable(target.to_string()),
        3 => BusError::DeadlineExceeded {
            target: target.to_string(),
            deadline,
        },
        4 => BusError::QueueFull(target.to_string()),
        _ => BusError::Transport(msg),
    }
}

fn io_err(target: &str, deadline: Duration, e: io::Error) -> BusError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => BusError::DeadlineExceeded {
            target: target.to_string(),
            deadline,
        },
        _ => BusError::TargetUnavailable(format!("{target}: {e}")),
    }
}

/// Outbound connection pool keyed by `host:port`.
#[derive(Default)]
pub(crate) struct Pool {
    idle: Mutex<HashMap<String, Vec<TcpStream>>>,
}

impl Pool {
    pub(crate) fn exchange(
        &self,
        addr: &str,
        target: &str,
        frame: &[u8],
        deadline: Duration,
    ) -> Result<Vec<u8>, BusError> {
        let pooled = self.idle.lock().get_mut(addr).and_then(|v| v.pop());
        let mut stream = match pooled {
            Some(s) => s,
            None => connect(addr, deadline).map_err(|e| io_err(target, deadline, e))?,
        };
        stream
            .set_read_timeout(Some(deadline))
            .and_then(|_| stream.set_write_timeout(Some(deadline)))
            .map_err(|e| io_err(target, deadline, e))?;
        write_frame(&mut stream, frame).map_err(|e| io_err(target, deadline, e))?;
        let reply = read_frame(&mut stream).map_err(|e| io_err(target, deadline, e))?;
        let env = MessageEnvelope::decode(&reply)?;
        self.idle.lock().entry(addr.to_string()).or_default().push(stream);
        if env.kind == MessageKind::Reply && env.sequence != 0 {
            let msg = String::from_utf8_lossy(&env.payload).into_owned();
            return Err(error_from_code(env.sequence, target, msg, deadline));
        }
        Ok(reply)
    }
}

fn connect(addr: &str, timeout: Duration) -> io::Result<TcpStream> {
    use std::net::ToSocketAddrs;
    let mut last = io::Error::new(ErrorKind::NotFound, "no address");
    for sa in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&sa, timeout) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

#[derive(Debug, Serialize, Deserialize)]
struct RegisterRequest {
    name: String,
    endpoint: Endpoint,
}

/// Listens on a TCP address and serves the local bus to remote peers.
pub struct TcpBridge {
    local: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl TcpBridge {
    pub fn bind(bus: &Bus, addr: &str) -> Result<TcpBridge, BusError> {
        let listener = TcpListener::bind(addr).map_err(|e| BusError::PortUnavailable(format!("{addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| BusError::Transport(e.to_string()))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| BusError::Transport(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let bus = bus.clone();
        let accept = std::thread::Builder::new()
            .name(format!("tcp-bridge-{local}"))
            .spawn(move || {
                while !stop2.load(Ordering::Acquire) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let bus = bus.clone();
                            let stop = stop2.clone();
                            std::thread::spawn(move || serve_conn(bus, stream, stop));
                        }
                        Err(e) if e.kind() == ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(5));
                        }
                        Err(e) => {
                            tracing::warn!(error = %e, "bridge accept failed");
                            std::thread::sleep(Duration::from_millis(5));
                        }
                    }
                }
            })
            .map_err(|e| BusError::Transport(e.to_string()))?;
        Ok(TcpBridge {
            local,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    /// Endpoint that routes requests for `node_id` through this bridge.
    pub fn endpoint(&self, node_id: &str, incarnation: u64) -> Endpoint {
        Endpoint {
            node_id: node_id.to_string(),
            address: format!("tcp://{}", self.local),
            incarnation,
        }
    }
}

impl Drop for TcpBridge {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

fn serve_conn(bus: Bus, mut stream: TcpStream, stop: Arc<AtomicBool>) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    loop {
        if stop.load(Ordering::Acquire) {
            return;
        }
        let frame = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(_) => return,
        };
        let env = match MessageEnvelope::decode(&frame) {
            Ok(e) => e,
            Err(_) => return,
        };
        match env.kind {
            MessageKind::Event => {
                let _ = bus.publish(&env.topic_or_target, env.payload);
            }
            MessageKind::Request => {
                let reply = if env.topic_or_target == REGISTER_TARGET {
                    let result = serde_json::from_slice::<RegisterRequest>(&env.payload)
                        .map_err(|e| BusError::Transport(e.to_string()))
                        .and_then(|r| bus.register_name(&r.name, &r.endpoint));
                    match result {
                        Ok(_) => env.reply_to(b"ok".to_vec(), bus.clock().now()).encode(),
                        Err(e) => error_reply(&env, &e, bus.clock().now()).encode(),
                    }
                } else {
                    match bus.dispatch_frame(frame) {
                        Ok(bytes) => Ok(bytes),
                        Err(e) => error_reply(&env, &e, bus.clock().now()).encode(),
                    }
                };
                match reply {
                    Ok(bytes) => {
                        if write_frame(&mut stream, &bytes).is_err() {
                            return;
                        }
                    }
                    Err(_) => return,
                }
            }
            _ => {}
        }
    }
}

fn error_reply(req: &MessageEnvelope, e: &BusError, now: SimTime) -> MessageEnvelope {
    let mut r = req.reply_to(e.to_string().into_bytes(), now);
    r.sequence = error_code(e);
    r
}

/// Client for a remote bus reachable through its [`TcpBridge`].
pub struct RemoteClient {
    addr: String,
    pool: Pool,
    next_corr: AtomicU64,
}

impl RemoteClient {
    pub fn connect(addr: impl Into<String>) -> Result<Self, BusError> {
        let addr = addr.into();
        connect(&addr, Duration::from_secs(2)).map_err(|e| BusError::TargetUnavailable(format!("{addr}: {e}")))?;
        Ok(RemoteClient {
            addr,
            pool: Pool::default(),
            next_corr: AtomicU64::new(1),
        })
    }

    pub fn request(&self, target: &str, payload: Vec<u8>, deadline: Duration) -> Result<Vec<u8>, BusError> {
        if deadline.is_zero() {
            return Err(BusError::InvalidDeadline);
        }
        let mut env = MessageEnvelope::new(MessageKind::Request, target, payload);
        env.correlation_id = self.next_corr.fetch_add(1, Ordering::Relaxed);
        env.deadline = Some(deadline);
        let reply = self.pool.exchange(&self.addr, target, &env.encode()?, deadline)?;
        let reply = MessageEnvelope::decode(&reply)?;
        if reply.correlation_id != env.correlation_id {
            return Err(BusError::CorrelationMismatch {
                expected: env.correlation_id,
                got: reply.correlation_id,
            });
        }
        Ok(reply.payload)
    }

    pub fn register(&self, name: &str, endpoint: &Endpoint) -> Result<(), BusError> {
        let body = serde_json::to_vec(&RegisterRequest {
            name: name.to_string(),
            endpoint: endpoint.clone(),
        })
        .map_err(|e| BusError::Transport(e.to_string()))?;
        self.request(REGISTER_TARGET, body, Duration::from_secs(2)).map(|_| ())
    }

    pub fn publish(&self, topic: &str, payload: Vec<u8>) -> Result<(), BusError> {
        let env = MessageEnvelope::new(MessageKind::Event, topic, payload);
        let mut s = connect(&self.addr, Duration::from_secs(2))
            .map_err(|e| BusError::TargetUnavailable(e.to_string()))?;
        write_frame(&mut s, &env.encode()?).map_err(|e| BusError::Transport(e.to_string()))
    }
}
