//! HTTP gateway for operator consoles.
//!
//! | route | |
//! |---|---|
//! | `GET /status` | rollup and shot status |
//! | `GET /alerts` | active alerts |
//! | `GET /shot` | shot status |
//! | `POST /command` | `{operator, point_id, command}` |
//! | `POST /reserve` | `{operator, resource, action?, lease_ms?}` |
//! | `POST /shot/hold`, `/shot/resume`, `/shot/abort` | director controls |
//! | `GET /events` | server-sent events, one per bus event |
//! | `GET /video/{camera_id}` | `multipart/x-mixed-replace` of 8-bit PGM frames |

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

use super::launch::{FacilityDriver, HarnessError};
use super::metrics::{self, Metrics};
use crate::bus::Bus;
use crate::director::{Director, DirectorError, ShotStatus};
use crate::fep::{point_target, video_stream, CommandAck, Frame, FepRequest, PointCommand};
use crate::services::Services;
use crate::supervisors::{RollupSnapshot, StatusRollup};
use crate::wire::{self, CallError, ErrorKind};

pub const MULTIPART_BOUNDARY: &str = "frame";

/// Event topics forwarded on `/events`.
pub const EVENT_TOPICS: [&str; 5] = ["alert/*", "shot/phase", "clock/tick", "status/*/*", "status/*/*/*"];

#[derive(Clone)]
pub struct GatewayState {
    pub bus: Bus,
    pub services: Arc<Services>,
    pub director: Director,
    pub rollup: Arc<StatusRollup>,
    pub metrics: Arc<Metrics>,
    pub driver: Arc<FacilityDriver>,
    pub deadline: Duration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusView {
    pub rollup: RollupSnapshot,
    pub shot: ShotStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandBody {
    pub operator: String,
    pub point_id: String,
    pub command: PointCommand,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandReply {
    pub ack: CommandAck,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReserveAction {
    #[default]
    Reserve,
    Release,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReserveBody {
    pub operator: String,
    pub resource: String,
    #[serde(default)]
    pub action: ReserveAction,
    pub lease_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HoldBody {
    #[serde(default)]
    pub reason: String,
    pub duration_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AbortBody {
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Deserialize)]
struct VideoQuery {
    /// Ends the response after this many frames.
    frames: Option<u64>,
}

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(code: StatusCode, kind: &str, message: impl std::fmt::Display) -> Self {
        ApiError(
            code,
            ErrorBody {
                kind: kind.to_string(),
                message: message.to_string(),
            },
        )
    }
}

impl From<CallError> for ApiError {
    fn from(e: CallError) -> Self {
        match &e {
            CallError::Remote(r) => ApiError::new(StatusCode::CONFLICT, &r.kind, &r.message),
            CallError::Bus(b) => {
                let kind = crate::supervisors::bus_kind(b);
                let code = if kind == "NameNotFound" {
                    StatusCode::NOT_FOUND
                } else {
                    StatusCode::SERVICE_UNAVAILABLE
                };
                ApiError::new(code, kind, b)
            }
            CallError::Decode(m) => ApiError::new(StatusCode::BAD_GATEWAY, "Decode", m),
        }
    }
}

impl From<DirectorError> for ApiError {
    fn from(e: DirectorError) -> Self {
        ApiError::new(StatusCode::CONFLICT, e.kind(), &e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Panic", e)),
    }
}

async fn status(State(s): State<GatewayState>) -> ApiResult<StatusView> {
    blocking(move || {
        Ok(StatusView {
            rollup: s.rollup.snapshot(),
            shot: s.director.status(),
        })
    })
    .await
}

async fn alerts(State(s): State<GatewayState>) -> Json<Vec<crate::services::Alert>> {
    Json(s.services.alerts.active())
}

async fn shot(State(s): State<GatewayState>) -> Json<ShotStatus> {
    Json(s.director.status())
}

async fn command(State(s): State<GatewayState>, Json(b): Json<CommandBody>) -> ApiResult<CommandReply> {
    blocking(move || {
        let t0 = Instant::now();
        let ack: CommandAck = wire::call(
            &s.bus,
            &point_target(&b.point_id),
            &FepRequest::Command {
                point_id: b.point_id.clone(),
                command: b.command,
                caller: b.operator,
            },
            s.deadline,
        )?;
        let d = t0.elapsed();
        s.metrics.record(metrics::COMMAND_ROUND_TRIP, d);
        Ok(CommandReply {
            ack,
            elapsed_us: d.as_micros() as u64,
        })
    })
    .await
}

async fn reserve(State(s): State<GatewayState>, Json(b): Json<ReserveBody>) -> Response {
    let r = &s.services.reservations;
    let out = match b.action {
        ReserveAction::Reserve => {
            let lease = b.lease_ms.map(Duration::from_millis);
            r.reserve(&b.resource, &b.operator, lease).map(|res| Json(res).into_response())
        }
        ReserveAction::Release => r
            .release(&b.resource, &b.operator)
            .map(|_| StatusCode::NO_CONTENT.into_response()),
    };
    out.unwrap_or_else(|e| ApiError::new(StatusCode::CONFLICT, e.kind(), &e).into_response())
}

async fn hold(State(s): State<GatewayState>, body: Option<Json<HoldBody>>) -> ApiResult<ShotStatus> {
    let b = body.map(|Json(b)| b).unwrap_or_default();
    blocking(move || Ok(s.director.hold(&b.reason, b.duration_ms.map(Duration::from_millis))?)).await
}

async fn resume(State(s): State<GatewayState>) -> ApiResult<ShotStatus> {
    blocking(move || Ok(s.director.resume()?)).await
}

async fn abort(State(s): State<GatewayState>, body: Option<Json<AbortBody>>) -> ApiResult<Vec<String>> {
    let b = body.map(|Json(b)| b).unwrap_or_default();
    let reason = if b.reason.is_empty() { "operator abort".to_string() } else { b.reason };
    blocking(move || Ok(s.director.abort(&reason)?)).await
}

fn channel_stream<T: Send + 'static>(rx: mpsc::Receiver<T>) -> impl Stream<Item = T> {
    futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|v| (v, rx)) })
}

async fn events(State(s): State<GatewayState>) -> Result<Sse<impl Stream<Item = Result<SseEvent, std::convert::Infallible>>>, ApiError> {
    let (tx, rx) = mpsc::channel::<SseEvent>(1024);
    for pattern in EVENT_TOPICS {
        let sub = s
            .bus
            .subscribe(pattern)
            .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "Subscribe", e))?;
        let tx = tx.clone();
        std::thread::Builder::new()
            .name("sse".into())
            .spawn(move || loop {
                if tx.is_closed() {
                    break;
                }
                let Some(ev) = sub.recv_timeout(Duration::from_millis(200)) else {
                    continue;
                };
                let e = SseEvent::default()
                    .event(ev.topic)
                    .id(ev.seq.to_string())
                    .data(String::from_utf8_lossy(&ev.payload));
                if tx.blocking_send(e).is_err() {
                    break;
                }
            })
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Spawn", e))?;
    }
    let stream = futures::StreamExt::map(channel_stream(rx), Ok::<_, std::convert::Infallible>);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

/// 8-bit binary PGM, pixels scaled down from 12 bits.
pub fn frame_to_pgm(f: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", f.width, f.height).into_bytes();
    out.extend(f.pixels.iter().map(|&p| (p.min(4095) >> 4) as u8));
    out
}

fn multipart_part(pgm: &[u8]) -> Bytes {
    let mut part = format!(
        "--{MULTIPART_BOUNDARY}\r\nContent-Type: image/x-portable-graymap\r\nContent-Length: {}\r\n\r\n",
        pgm.len()
    )
    .into_bytes();
    part.extend_from_slice(pgm);
    part.extend_from_slice(b"\r\n");
    Bytes::from(part)
}

async fn video(
    State(s): State<GatewayState>,
    Path(camera_id): Path<String>,
    Query(q): Query<VideoQuery>,
) -> Result<Response, ApiError> {
    let mut consumer = s
        .bus
        .open_stream(&video_stream(&camera_id))
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "UnknownStream", e))?;
    let (tx, rx) = mpsc::channel::<Result<Bytes, std::io::Error>>(16);
    let limit = q.frames.unwrap_or(u64::MAX);
    let driver = s.driver.clone();
    std::thread::Builder::new()
        .name("video".into())
        .spawn(move || {
            use crate::supervisors::Driver;
            let mut sent = 0;
            while sent < limit && !tx.is_closed() {
                let f = if driver.clock().is_virtual() {
                    match consumer.try_recv() {
                        Some(f) => Some(f),
                        None => {
                            std::thread::sleep(Duration::from_millis(5));
                            None
                        }
                    }
                } else {
                    consumer.recv_timeout(Duration::from_millis(200))
                };
                let Some(f) = f else { continue };
                let Some(frame) = Frame::decode(&f.payload) else { continue };
                if tx.blocking_send(Ok(multipart_part(&frame_to_pgm(&frame)))).is_err() {
                    break;
                }
                sent += 1;
            }
        })
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Spawn", e))?;
    Ok((
        [(
            header::CONTENT_TYPE,
            format!("multipart/x-mixed-replace; boundary={MULTIPART_BOUNDARY}"),
        )],
        Body::from_stream(channel_stream(rx)),
    )
        .into_response())
}

pub fn router(state: GatewayState) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/alerts", get(alerts))
        .route("/shot", get(shot))
        .route("/command", post(command))
        .route("/reserve", post(reserve))
        .route("/shot/hold", post(hold))
        .route("/shot/resume", post(resume))
        .route("/shot/abort", post(abort))
        .route("/events", get(events))
        .route("/video/{*camera_id}", get(video))
        .with_state(state)
}

/// A running gateway on its own runtime thread.
pub struct Gateway {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Gateway {
    pub fn start(addr: &str, state: GatewayState) -> Result<Gateway, HarnessError> {
        let listener =
            std::net::TcpListener::bind(addr).map_err(|_| HarnessError::PortUnavailable(addr.to_string()))?;
        let local = listener.local_addr().map_err(|e| HarnessError::Failed(e.to_string()))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| HarnessError::Failed(e.to_string()))?;
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .thread_name("gateway")
            .enable_all()
            .build()
            .map_err(|e| HarnessError::Failed(e.to_string()))?;
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let app = router(state);
        let thread = std::thread::Builder::new()
            .name("gateway-main".into())
            .spawn(move || {
                rt.block_on(async move {
                    let Ok(l) = tokio::net::TcpListener::from_std(listener) else {
                        return;
                    };
                    let serve = std::future::IntoFuture::into_future(axum::serve(l, app));
                    tokio::select! {
                        _ = serve => {}
                        _ = stop_rx => {}
                    }
                });
                rt.shutdown_timeout(Duration::from_millis(500));
            })
            .map_err(|e| HarnessError::Failed(e.to_string()))?;
        tracing::info!(addr = %local, "gateway listening");
        Ok(Gateway {
            addr: local,
            stop: Some(stop_tx),
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.halt();
    }
}
