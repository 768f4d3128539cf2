//! Subsystem supervisors. Each runs as a `sup/<name>` bus peer reacting to
//! countdown marks from the shot director.

pub mod alignment;
pub mod beam_control;
pub mod centroid;
pub mod diagnostics;
pub mod lpom;
pub mod power;
pub mod rollup;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use alignment::{run_alignment, AlignError, AlignmentConfig, AlignmentRig, AlignmentStep, AlignmentTrace, BenchRig};
pub use beam_control::BeamControl;
pub use centroid::{compute_centroid, CentroidError};
pub use diagnostics::{collect_diagnostics, DiagBundle, DiagEntry, Diagnostics};
pub use lpom::{lpom_setup, Lpom, LpomConfig, LpomError, Setpoint, SetpointBundle};
pub use power::{charge_permissive, ChargeConfig, ChargeError, ChargeStage, ChargeState, PowerConditioning};
pub use rollup::{RollupConfig, RollupSnapshot, StatusRollup, SubsystemStatus};

use crate::bus::{Bus, BusError, Endpoint, ServiceHandle};
use crate::clock::{SimClock, SimTime};
use crate::services::{EventCategory, Services};
use crate::wire::{self, err_reply, ok_reply, reply_from, CallError, ErrorKind};

/// Moves simulated time forward. With a virtual clock this steps the clock
/// and lets every time-driven component catch up; with a wall clock it
/// sleeps.
pub trait Driver: Send + Sync {
    fn clock(&self) -> &SimClock;
    fn advance(&self, dt: Duration);
}

/// Driver for a bare clock with nothing else to catch up.
pub struct ClockDriver(pub SimClock);

impl Driver for ClockDriver {
    fn clock(&self) -> &SimClock {
        &self.0
    }

    fn advance(&self, dt: Duration) {
        if self.0.is_virtual() {
            self.0.advance(dt);
        } else {
            std::thread::sleep(dt);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkAction {
    Setup,
    Arm,
    Charge,
    FinalCheck,
    Fire,
}

impl MarkAction {
    pub fn as_str(self) -> &'static str {
        match self {
            MarkAction::Setup => "setup",
            MarkAction::Arm => "arm",
            MarkAction::Charge => "charge",
            MarkAction::FinalCheck => "final_check",
            MarkAction::Fire => "fire",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "setup" => MarkAction::Setup,
            "arm" => MarkAction::Arm,
            "charge" => MarkAction::Charge,
            "final_check" => MarkAction::FinalCheck,
            "fire" => MarkAction::Fire,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArmedPoint {
    pub fep_id: String,
    pub point_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkAck {
    pub participant: String,
    pub action: MarkAction,
    pub armed: Vec<ArmedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readiness {
    pub ready: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SupRequest {
    Ready,
    Mark {
        shot_id: String,
        action: MarkAction,
    },
    Abort {
        shot_id: String,
        reason: String,
    },
    PostShot {
        shot_id: String,
    },
    Status,
    Align {
        beam_id: String,
    },
    Setup {
        shot_id: String,
        goals: BTreeMap<String, f64>,
    },
    ChargeStates,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum SupError {
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Charge(#[from] ChargeError),
    #[error(transparent)]
    Lpom(#[from] LpomError),
    #[error("partial collection, missing {missing:?}")]
    PartialCollection { missing: Vec<String> },
    #[error("{target}: {kind}: {message}")]
    Remote { target: String, kind: String, message: String },
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("{0} not supported here")]
    Unsupported(String),
    #[error("storage: {0}")]
    Storage(String),
}

impl SupError {
    pub fn remote(target: &str, e: CallError) -> Self {
        let (kind, message) = match &e {
            CallError::Remote(r) => (r.kind.clone(), r.message.clone()),
            CallError::Bus(b) => (bus_kind(b).to_string(), b.to_string()),
            CallError::Decode(m) => ("Decode".to_string(), m.clone()),
        };
        SupError::Remote {
            target: target.to_string(),
            kind,
            message,
        }
    }
}

pub fn bus_kind(e: &BusError) -> &'static str {
    match e {
        BusError::NameNotFound(_) => "NameNotFound",
        BusError::DeadlineExceeded { .. } => "DeadlineExceeded",
        BusError::TargetUnavailable(_) => "TargetUnavailable",
        BusError::QueueFull(_) => "QueueFull",
        _ => "BusError",
    }
}

impl ErrorKind for SupError {
    fn kind(&self) -> &'static str {
        match self {
            SupError::Align(e) => e.kind(),
            SupError::Charge(e) => e.kind(),
            SupError::Lpom(e) => e.kind(),
            SupError::PartialCollection { .. } => "PartialCollection",
            SupError::Remote { .. } => "RemoteFailure",
            SupError::NotReady(_) => "NotReady",
            SupError::Unsupported(_) => "Unsupported",
            SupError::Storage(_) => "StorageFailure",
        }
    }
}

/// What a supervisor sees of the facility.
#[derive(Clone)]
pub struct Ctx {
    /// Bus name, `sup/<name>`; also the reservation holder.
    pub name: String,
    pub bus: Bus,
    pub services: Arc<Services>,
    pub rollup: Arc<StatusRollup>,
    pub driver: Arc<dyn Driver>,
    pub deadline: Duration,
}

impl Ctx {
    pub fn now(&self) -> SimTime {
        self.bus.clock().now()
    }

    pub fn call<Req: Serialize, R: DeserializeOwned>(&self, target: &str, req: &Req) -> Result<R, SupError> {
        wire::call(&self.bus, target, req, self.deadline).map_err(|e| SupError::remote(target, e))
    }

    pub fn log(&self, category: EventCategory, payload: &str) {
        let _ = self.services.log(&self.name, category, payload);
    }

    /// Reserves `resources` for this supervisor and records it in the event
    /// log before any device is touched.
    pub fn reserve_all(&self, resources: &[String]) -> Result<(), SupError> {
        for r in resources {
            self.services
                .reservations
                .reserve_default(r, &self.name)
                .map_err(|e| SupError::NotReady(e.to_string()))?;
        }
        if !resources.is_empty() {
            self.log(EventCategory::OperatorAction, &format!("reserve {}", resources.join(",")));
        }
        Ok(())
    }

    pub fn release_all(&self, resources: &[String]) {
        let mut released = Vec::new();
        for r in resources {
            if self.services.reservations.release(r, &self.name).is_ok() {
                released.push(r.as_str());
            }
        }
        if !released.is_empty() {
            self.log(EventCategory::OperatorAction, &format!("release {}", released.join(",")));
        }
    }

    pub fn readiness(&self) -> Readiness {
        match self.rollup.subsystem(&self.name) {
            Some(s) if !s.ready => Readiness {
                ready: false,
                reason: Some(if let Some(f) = s.faults.first() {
                    format!("{} {}", f.point_id, f.reason)
                } else if !s.down.is_empty() {
                    format!("fep down: {}", s.down.join(","))
                } else {
                    format!("{} points unreported", s.unreported)
                }),
            },
            _ => Readiness {
                ready: true,
                reason: None,
            },
        }
    }
}

pub trait Supervisor: Send {
    fn on_mark(&mut self, ctx: &Ctx, shot_id: &str, action: MarkAction) -> Result<MarkAck, SupError>;

    /// Drives owned equipment safe. Returns what was done.
    fn on_abort(&mut self, _ctx: &Ctx, _shot_id: &str) -> Vec<String> {
        Vec::new()
    }

    fn on_post_shot(&mut self, _ctx: &Ctx, _shot_id: &str) -> Result<Option<DiagBundle>, SupError> {
        Ok(None)
    }

    fn ready(&mut self, ctx: &Ctx) -> Readiness {
        ctx.readiness()
    }

    /// Supervisor-specific requests.
    fn other(&mut self, _ctx: &Ctx, req: SupRequest) -> Vec<u8> {
        reply_from::<(), SupError>(Err(SupError::Unsupported(format!("{req:?}"))))
    }
}

pub fn ack(ctx: &Ctx, action: MarkAction) -> MarkAck {
    MarkAck {
        participant: ctx.name.clone(),
        action,
        armed: Vec::new(),
    }
}

/// Supervisor with no behavior of its own beyond reporting the health of
/// its points.
pub struct StatusOnly;

impl Supervisor for StatusOnly {
    fn on_mark(&mut self, ctx: &Ctx, _shot_id: &str, action: MarkAction) -> Result<MarkAck, SupError> {
        Ok(ack(ctx, action))
    }
}

pub struct SupervisorHost {
    service: Option<ServiceHandle>,
    name: String,
}

impl SupervisorHost {
    pub fn start(ctx: Ctx, sup: Box<dyn Supervisor>) -> Result<SupervisorHost, BusError> {
        let node = ctx.name.replace('/', "-");
        let ep = Endpoint::inproc(node.clone(), ctx.bus.next_incarnation(&node));
        let name = ctx.name.clone();
        let sup = Arc::new(Mutex::new(sup));
        let service = ctx.bus.clone().serve(&ep, &[name.as_str()], move |req| {
            let Ok(r) = wire::from_bytes::<SupRequest>(req.payload()) else {
                return err_reply("BadRequest", "undecodable supervisor request");
            };
            let mut s = sup.lock();
            match r {
                SupRequest::Ready => ok_reply(s.ready(&ctx)),
                SupRequest::Mark { shot_id, action } => reply_from(s.on_mark(&ctx, &shot_id, action)),
                SupRequest::Abort { shot_id, .. } => ok_reply(s.on_abort(&ctx, &shot_id)),
                SupRequest::PostShot { shot_id } => reply_from(s.on_post_shot(&ctx, &shot_id)),
                SupRequest::Status => ok_reply(ctx.rollup.subsystem(&ctx.name)),
                other => s.other(&ctx, other),
            }
        })?;
        Ok(SupervisorHost {
            service: Some(service),
            name,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stop(&mut self) {
        if let Some(s) = self.service.take() {
            s.stop();
        }
    }
}

impl Drop for SupervisorHost {
    fn drop(&mut self) {
        self.stop();
    }
}
