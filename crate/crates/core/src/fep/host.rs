//! FEP as a bus peer: one mailbox, one worker thread, status publication and
//! camera video.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, never, select, tick, Receiver, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::devices::Frame;
use super::runtime::{
    CommandAck, Fep, FepConfig, FepError, PointCommand, ShotDataRecord, StatusReading,
};
use crate::bus::{Bus, BusError, Endpoint, Inbox, StreamProducer};
use crate::clock::SimTime;
use crate::services::Services;
use crate::wire::{self, err_reply, ok_reply, reply_from};

pub const VIDEO_RATE_HZ: f64 = 10.0;
pub const DEFAULT_HEARTBEAT: Duration = Duration::from_secs(2);
const WALL_TICK: Duration = Duration::from_millis(20);

pub fn fep_target(fep_id: &str) -> String {
    format!("fep/{fep_id}")
}

pub fn point_target(point_id: &str) -> String {
    format!("pt/{point_id}")
}

pub fn video_stream(camera_id: &str) -> String {
    format!("video/{camera_id}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum FepRequest {
    Command {
        point_id: String,
        command: PointCommand,
        caller: String,
    },
    Status {
        point_id: String,
    },
    StatusAll,
    Arm {
        shot_id: String,
        points: Vec<String>,
    },
    Disarm {
        shot_id: Option<String>,
    },
    Trigger {
        shot_id: String,
        t0_ps: i64,
        offsets_ps: BTreeMap<String, i64>,
        energies_j: BTreeMap<String, f64>,
    },
    ReadShotData {
        shot_id: String,
    },
    GrabFrame {
        camera_id: String,
    },
    InjectFault {
        point_id: String,
        reason: String,
    },
    ClearFault {
        point_id: String,
    },
    SafeState,
    /// `(point_id, shot_id)` for every armed point.
    Armed,
    Ping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FepInfo {
    pub fep_id: String,
    pub incarnation: u64,
    pub points: usize,
    pub now: SimTime,
}

#[derive(Debug, thiserror::Error)]
pub enum FepStartError {
    #[error(transparent)]
    Config(#[from] FepError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

struct Shared {
    fep: Mutex<Fep>,
    bus: Bus,
    services: Arc<Services>,
    incarnation: u64,
    heartbeat: Duration,
    video: Mutex<BTreeMap<String, StreamProducer>>,
    /// Next heartbeat and next video frame, in simulated time.
    next_heartbeat: Mutex<SimTime>,
    next_frame: Mutex<SimTime>,
}

impl Shared {
    fn publish_changes(&self, fep: &mut Fep, everything: bool) {
        for r in fep.take_changes(everything) {
            let _ = self
                .bus
                .publish(&format!("status/{}", r.point_id), wire::to_bytes(&r));
        }
    }

    fn heartbeat(&self, fep: &Fep) {
        let info = self.info(fep);
        let _ = self
            .bus
            .publish(&format!("heartbeat/{}", fep.id()), wire::to_bytes(&info));
    }

    fn info(&self, fep: &Fep) -> FepInfo {
        FepInfo {
            fep_id: fep.id().to_string(),
            incarnation: self.incarnation,
            points: fep.point_ids().count(),
            now: fep.now(),
        }
    }

    fn push_video(&self, fep: &mut Fep) {
        let mut video = self.video.lock();
        for (cam, producer) in video.iter_mut() {
            if producer.consumer_count() == 0 {
                continue;
            }
            if let Ok(frame) = fep.grab_frame(cam) {
                producer.push(frame.encode());
            }
        }
    }

    /// Brings the device models up to the bus clock and emits whatever
    /// heartbeats and video frames fall due on the way.
    fn sync(&self) {
        let target = self.bus.clock().now();
        let mut fep = self.fep.lock();
        let frame_period = Duration::from_secs_f64(1.0 / VIDEO_RATE_HZ);
        loop {
            let now = fep.now();
            if now >= target {
                break;
            }
            let nf = *self.next_frame.lock();
            let nh = *self.next_heartbeat.lock();
            let step_to = target.min(nf).min(nh);
            if step_to > now {
                fep.advance(step_to.saturating_sub(now)).expect("positive step");
            }
            if fep.now() >= nf {
                self.push_video(&mut fep);
                *self.next_frame.lock() = nf.add(frame_period);
            }
            if fep.now() >= nh {
                self.publish_changes(&mut fep, true);
                self.heartbeat(&fep);
                *self.next_heartbeat.lock() = nh.add(self.heartbeat);
            }
        }
        self.publish_changes(&mut fep, false);
    }

    fn check_reservation(&self, point_id: &str, caller: &str) -> Result<(), FepError> {
        let mut prefix = String::new();
        for seg in point_id.split('/') {
            if !prefix.is_empty() {
                prefix.push('/');
            }
            prefix.push_str(seg);
            if let Some(holder) = self.services.reservations.holder_of(&prefix) {
                if holder != caller {
                    return Err(FepError::NotReservationHolder {
                        point: point_id.to_string(),
                        holder,
                    });
                }
            }
        }
        Ok(())
    }

    fn handle(&self, req: FepRequest) -> Vec<u8> {
        self.sync();
        let mut fep = self.fep.lock();
        let out = match req {
            FepRequest::Command {
                point_id,
                command,
                caller,
            } => {
                let r: Result<CommandAck, FepError> = self
                    .check_reservation(&point_id, &caller)
                    .and_then(|_| fep.apply_command(&point_id, &command));
                reply_from(r)
            }
            FepRequest::Status { point_id } => reply_from(fep.sample_status(&point_id)),
            FepRequest::StatusAll => ok_reply(fep.all_status()),
            FepRequest::Arm { shot_id, points } => reply_from(fep.arm_for_shot(&shot_id, &points)),
            FepRequest::Disarm { shot_id } => ok_reply(fep.disarm(shot_id.as_deref())),
            FepRequest::Trigger {
                shot_id,
                t0_ps,
                offsets_ps,
                energies_j,
            } => ok_reply(fep.trigger(&shot_id, t0_ps, &offsets_ps, &energies_j)),
            FepRequest::ReadShotData { shot_id } => reply_from(fep.read_shot_data(&shot_id)),
            FepRequest::GrabFrame { camera_id } => reply_from(fep.grab_frame(&camera_id)),
            FepRequest::InjectFault { point_id, reason } => reply_from(fep.inject_fault(&point_id, &reason)),
            FepRequest::ClearFault { point_id } => reply_from(fep.clear_fault(&point_id)),
            FepRequest::SafeState => ok_reply(fep.safe_state()),
            FepRequest::Armed => ok_reply(fep.armed()),
            FepRequest::Ping => ok_reply(self.info(&fep)),
        };
        self.publish_changes(&mut fep, false);
        out
    }
}

struct Worker {
    stop: Sender<()>,
    thread: JoinHandle<Inbox>,
}

/// Running FEP. [`FepHost::stop`] shuts it down cleanly; [`FepHost::kill`]
/// simulates a crash.
pub struct FepHost {
    shared: Arc<Shared>,
    endpoint: Endpoint,
    worker: Mutex<Option<Worker>>,
}

impl FepHost {
    pub fn start(bus: &Bus, services: Arc<Services>, config: &FepConfig) -> Result<FepHost, FepStartError> {
        Self::start_with(bus, services, config, DEFAULT_HEARTBEAT)
    }

    pub fn start_with(
        bus: &Bus,
        services: Arc<Services>,
        config: &FepConfig,
        heartbeat: Duration,
    ) -> Result<FepHost, FepStartError> {
        let now = bus.clock().now();
        let fep = Fep::configure(config, now)?;
        let node = fep_target(&config.fep_id).replace('/', "-");
        let incarnation = bus.next_incarnation(&node);
        let endpoint = Endpoint::inproc(node, incarnation);
        let inbox = bus.bind(&endpoint, None)?;
        let mut names = vec![fep_target(&config.fep_id)];
        names.extend(fep.point_ids().map(point_target));
        for n in &names {
            if let Err(e) = bus.register_name(n, &endpoint) {
                bus.deregister_endpoint(&endpoint);
                return Err(e.into());
            }
        }
        let mut video = BTreeMap::new();
        for cam in fep.cameras() {
            video.insert(cam.clone(), bus.register_stream(&video_stream(&cam), VIDEO_RATE_HZ)?);
        }
        let shared = Arc::new(Shared {
            fep: Mutex::new(fep),
            bus: bus.clone(),
            services,
            incarnation,
            heartbeat,
            video: Mutex::new(video),
            next_heartbeat: Mutex::new(now.add(heartbeat)),
            next_frame: Mutex::new(now.add(Duration::from_secs_f64(1.0 / VIDEO_RATE_HZ))),
        });
        {
            let mut fep = shared.fep.lock();
            shared.publish_changes(&mut fep, true);
            shared.heartbeat(&fep);
        }
        let (stop_tx, stop_rx) = bounded::<()>(1);
        let s = shared.clone();
        let wall = !bus.clock().is_virtual();
        let thread = std::thread::Builder::new()
            .name(endpoint.node_id.clone())
            .spawn(move || run(s, inbox, stop_rx, wall))
            .map_err(|e| BusError::Transport(e.to_string()))?;
        Ok(FepHost {
            shared,
            endpoint,
            worker: Mutex::new(Some(Worker { stop: stop_tx, thread })),
        })
    }

    pub fn id(&self) -> String {
        self.shared.fep.lock().id().to_string()
    }

    pub fn incarnation(&self) -> u64 {
        self.shared.incarnation
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Catches the device models up with a virtual clock. Wall-mode FEPs do
    /// this on their own.
    pub fn sync(&self) {
        self.shared.sync();
    }

    pub fn with_fep<R>(&self, f: impl FnOnce(&mut Fep) -> R) -> R {
        f(&mut self.shared.fep.lock())
    }

    pub fn status(&self) -> Vec<StatusReading> {
        self.shared.fep.lock().all_status()
    }

    pub fn read_shot_data(&self, shot_id: &str) -> Result<Vec<ShotDataRecord>, FepError> {
        self.shared.fep.lock().read_shot_data(shot_id)
    }

    pub fn grab_frame(&self, camera_id: &str) -> Result<Frame, FepError> {
        self.shared.fep.lock().grab_frame(camera_id)
    }

    pub fn is_running(&self) -> bool {
        self.worker.lock().is_some()
    }

    fn halt(&self) -> bool {
        let Some(w) = self.worker.lock().take() else {
            return false;
        };
        let _ = w.stop.send(());
        let inbox = w.thread.join().ok();
        drop(inbox);
        self.shared.video.lock().clear();
        true
    }

    /// Crash: the mailbox goes away but the names stay, so callers see
    /// `TargetUnavailable` until a new incarnation registers.
    pub fn kill(&self) {
        self.halt();
    }

    pub fn stop(&self) {
        if self.halt() {
            self.shared.bus.deregister_endpoint(&self.endpoint);
        }
    }
}

impl Drop for FepHost {
    fn drop(&mut self) {
        self.stop();
    }
}

fn run(s: Arc<Shared>, inbox: Inbox, stop: Receiver<()>, wall: bool) -> Inbox {
    let ticks = if wall { tick(WALL_TICK) } else { never() };
    loop {
        select! {
            recv(inbox.receiver()) -> msg => {
                let Ok(inbound) = msg else { break };
                let Some(req) = inbox.accept(inbound) else { continue };
                let out = match wire::from_bytes::<FepRequest>(req.payload()) {
                    Ok(r) => s.handle(r),
                    Err(e) => err_reply("BadRequest", e),
                };
                req.reply(out);
            }
            recv(ticks) -> _ => s.sync(),
            recv(stop) -> _ => break,
        }
    }
    inbox
}
