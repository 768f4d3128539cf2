//! Starting, driving and stopping a whole facility in one process.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::RwLock;

use super::config::{FacilityConfig, SupervisorConfig, SupervisorKind};
use super::gateway::{Gateway, GatewayState};
use super::metrics::{self, Metrics, MetricsError, MetricsReport};
use crate::bus::tcp::TcpBridge;
use crate::bus::{Bus, BusError, ServiceHandle};
use crate::clock::{wall_micros, ClockMode, SimClock};
use crate::director::{Director, DirectorConfig, DIRECTOR};
use crate::fep::{fep_target, point_target, video_stream, DeviceParams, FepHost, FepRequest, PointCommand};
use crate::plc::PlcHandle;
use crate::services::{AlertNotice, Services, ServicesHost};
use crate::supervisors::{
    AlignmentConfig, AlignmentTrace, ArmedPoint, BeamControl, ChargeConfig, Ctx, Diagnostics, Driver, Lpom,
    LpomConfig, PowerConditioning, RollupConfig, StatusOnly, StatusRollup, SupRequest, Supervisor, SupervisorHost,
};
use crate::timing::{TimingHost, TimingLimits};
use crate::wire;

#[derive(Debug, Clone)]
pub struct LaunchOptions {
    pub mode: ClockMode,
    /// Persistent event log and archive; in memory when `None`.
    pub data_dir: Option<PathBuf>,
    /// Exposes the bus to other processes.
    pub tcp_addr: Option<String>,
    pub gateway_addr: Option<String>,
    pub startup_timeout: Duration,
    /// Deadline for calls the harness and supervisors make.
    pub deadline: Duration,
}

impl LaunchOptions {
    pub fn virtual_clock() -> Self {
        LaunchOptions {
            mode: ClockMode::Virtual,
            data_dir: None,
            tcp_addr: None,
            gateway_addr: None,
            startup_timeout: Duration::from_secs(10),
            deadline: Duration::from_secs(2),
        }
    }

    pub fn wall_clock() -> Self {
        LaunchOptions {
            mode: ClockMode::Wall,
            ..Self::virtual_clock()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HarnessError {
    #[error("address {0} is unavailable")]
    PortUnavailable(String),
    #[error("{component} not ready after {waited:?}")]
    StartupTimeout { component: String, waited: Duration },
    #[error("{component}: {message}")]
    Component { component: String, message: String },
    #[error("unknown {what} {id}")]
    Unknown { what: &'static str, id: String },
    #[error("{0}")]
    Failed(String),
}

fn component(name: &str, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Component {
        component: name.to_string(),
        message: e.to_string(),
    }
}

fn bind_error(addr: &str, e: BusError) -> HarnessError {
    match e {
        BusError::PortUnavailable(_) => HarnessError::PortUnavailable(addr.to_string()),
        e => component("tcp", e),
    }
}

type FepMap = Arc<RwLock<BTreeMap<String, Arc<FepHost>>>>;

/// Steps a virtual clock and brings every FEP and the PLC up to date; with
/// a wall clock it sleeps.
pub struct FacilityDriver {
    clock: SimClock,
    feps: FepMap,
    plc: PlcHandle,
}

impl Driver for FacilityDriver {
    fn clock(&self) -> &SimClock {
        &self.clock
    }

    fn advance(&self, dt: Duration) {
        if !self.clock.is_virtual() {
            std::thread::sleep(dt);
            return;
        }
        self.clock.advance(dt);
        for f in self.feps.read().values() {
            if f.is_running() {
                f.sync();
            }
        }
        self.plc.advance(dt);
    }
}

pub struct Facility {
    config: FacilityConfig,
    opts: LaunchOptions,
    bus: Bus,
    services: Arc<Services>,
    services_host: Option<ServicesHost>,
    timing: Option<TimingHost>,
    plc: PlcHandle,
    rollup: Arc<StatusRollup>,
    feps: FepMap,
    driver: Arc<FacilityDriver>,
    supervisors: Vec<SupervisorHost>,
    director: Director,
    director_service: Option<ServiceHandle>,
    tcp: Option<TcpBridge>,
    gateway: Option<Gateway>,
    metrics: Arc<Metrics>,
    alert_watch: Option<(Arc<AtomicBool>, JoinHandle<()>)>,
    point_fep: BTreeMap<String, String>,
    ready_elapsed: Duration,
    stopped: bool,
}

/// Points whose id starts with one of `prefixes`.
fn owned_points<'a>(cfg: &'a FacilityConfig, prefixes: &'a [String]) -> impl Iterator<Item = (&'a str, &'a crate::fep::PointConfig)> {
    cfg.points()
        .filter(move |(_, p)| prefixes.iter().any(|pre| p.point_id.starts_with(pre.as_str())))
}

pub fn rollup_config(cfg: &FacilityConfig) -> RollupConfig {
    let subsystems = cfg
        .supervisors
        .iter()
        .map(|s| {
            let pts: BTreeSet<String> = owned_points(cfg, &s.owns).map(|(_, p)| p.point_id.clone()).collect();
            (s.name.clone(), pts)
        })
        .collect();
    let feps = cfg
        .feps
        .iter()
        .map(|f| (f.fep_id.clone(), f.points.iter().map(|p| p.point_id.clone()).collect()))
        .collect();
    RollupConfig {
        subsystems,
        feps,
        stale_after: cfg.heartbeat * 3,
    }
}

fn build_supervisor(cfg: &FacilityConfig, s: &SupervisorConfig, now: crate::clock::SimTime) -> Box<dyn Supervisor> {
    match s.kind {
        SupervisorKind::Status => Box::new(StatusOnly),
        SupervisorKind::Power => Box::new(PowerConditioning::new(
            s.charge_modules.clone(),
            ChargeConfig::default(),
            now,
        )),
        SupervisorKind::Diagnostics => Box::new(Diagnostics::new(
            owned_points(cfg, &s.owns)
                .filter(|(_, p)| p.kind().armable())
                .map(|(f, p)| ArmedPoint {
                    fep_id: f.to_string(),
                    point_id: p.point_id.clone(),
                })
                .collect(),
        )),
        SupervisorKind::Lpom => Box::new(Lpom::new(LpomConfig::default())),
        SupervisorKind::BeamControl => Box::new(BeamControl::new(alignment_configs(cfg, s))),
    }
}

/// One alignment loop per owned camera with coupled motors.
pub fn alignment_configs(cfg: &FacilityConfig, s: &SupervisorConfig) -> Vec<AlignmentConfig> {
    owned_points(cfg, &s.owns)
        .filter_map(|(_, p)| match &p.params {
            DeviceParams::Camera {
                motors: Some((mx, my)),
                gain,
                ..
            } => {
                let beam = crate::fep::beam_of(&p.point_id);
                let mut a = AlignmentConfig::new(beam, s.target, *gain);
                a.camera_id = p.point_id.clone();
                a.motor_x = mx.clone();
                a.motor_y = my.clone();
                Some(a)
            }
            _ => None,
        })
        .collect()
}

impl Facility {
    /// Starts every component and waits for a ready rollup. Records the
    /// time taken under `restart_elapsed`.
    pub fn launch(config: FacilityConfig, opts: LaunchOptions) -> Result<Facility, HarnessError> {
        let started = Instant::now();
        super::config::validate(&config).map_err(|e| component("config", e))?;
        let bus = Bus::new(SimClock::new(opts.mode));
        let services = match &opts.data_dir {
            Some(d) => Services::open(&bus, d).map_err(|e| component("services", e))?,
            None => Services::in_memory(&bus),
        };
        let metrics = Arc::new(Metrics::new());
        let alert_watch = watch_alerts(&bus, metrics.clone()).map_err(|e| component("alerts", e))?;
        let services_host = ServicesHost::start(&bus, services.clone()).map_err(|e| component("services", e))?;
        let timing = TimingHost::start(&bus, TimingLimits::default()).map_err(|e| component("timing", e))?;
        let segment = config.plc.segment().map_err(|e| component("plc", e))?;
        let plc = PlcHandle::start(&bus, segment, config.plc.scan_period).map_err(|e| component("plc", e))?;
        let rollup = StatusRollup::start(&bus, rollup_config(&config)).map_err(|e| component("rollup", e))?;
        let feps: FepMap = Arc::default();
        let driver = Arc::new(FacilityDriver {
            clock: bus.clock().clone(),
            feps: feps.clone(),
            plc: plc.clone(),
        });
        let mut fac = Facility {
            point_fep: config
                .points()
                .map(|(f, p)| (p.point_id.clone(), f.to_string()))
                .collect(),
            director: Director::new(
                Ctx {
                    name: DIRECTOR.to_string(),
                    bus: bus.clone(),
                    services: services.clone(),
                    rollup: rollup.clone(),
                    driver: driver.clone(),
                    deadline: opts.deadline,
                },
                DirectorConfig {
                    feps: config.feps.iter().map(|f| f.fep_id.clone()).collect(),
                    seed: config.seed,
                    ..DirectorConfig::default()
                },
            ),
            config,
            bus,
            services,
            services_host: Some(services_host),
            timing: Some(timing),
            plc,
            rollup,
            feps,
            driver,
            supervisors: Vec::new(),
            director_service: None,
            tcp: None,
            gateway: None,
            metrics,
            alert_watch: Some(alert_watch),
            ready_elapsed: Duration::ZERO,
            stopped: false,
            opts,
        };
        if let Err(e) = fac.start_rest() {
            fac.shutdown();
            return Err(e);
        }
        fac.ready_elapsed = match fac.wait_ready(fac.opts.startup_timeout.saturating_sub(started.elapsed())) {
            Ok(_) => started.elapsed(),
            Err(e) => {
                fac.shutdown();
                return Err(e);
            }
        };
        fac.metrics.record(metrics::RESTART_ELAPSED, fac.ready_elapsed);
        tracing::info!(facility = %fac.config.name, elapsed = ?fac.ready_elapsed, "ready");
        Ok(fac)
    }

    fn start_rest(&mut self) -> Result<(), HarnessError> {
        for f in &self.config.feps {
            let h = FepHost::start_with(&self.bus, self.services.clone(), f, self.config.heartbeat)
                .map_err(|e| component(&fep_target(&f.fep_id), e))?;
            self.feps.write().insert(f.fep_id.clone(), Arc::new(h));
        }
        let now = self.bus.clock().now();
        for s in &self.config.supervisors {
            let sup = build_supervisor(&self.config, s, now);
            let h = SupervisorHost::start(self.ctx(&s.name), sup).map_err(|e| component(&s.name, e))?;
            self.supervisors.push(h);
        }
        self.director_service = Some(self.director.serve().map_err(|e| component(DIRECTOR, e))?);
        if let Some(addr) = self.opts.tcp_addr.clone() {
            self.tcp = Some(TcpBridge::bind(&self.bus, &addr).map_err(|e| bind_error(&addr, e))?);
        }
        if let Some(addr) = self.opts.gateway_addr.clone() {
            self.start_gateway(&addr)?;
        }
        Ok(())
    }

    /// Bus names every component registers once started.
    pub fn expected_names(&self) -> Vec<String> {
        let mut v = vec![
            crate::services::host::ALERTS.to_string(),
            crate::timing::TIMING_TARGET.to_string(),
            crate::plc::PLC_TARGET.to_string(),
            DIRECTOR.to_string(),
        ];
        v.extend(self.config.feps.iter().map(|f| fep_target(&f.fep_id)));
        v.extend(self.config.supervisors.iter().map(|s| s.name.clone()));
        v
    }

    /// Waits until every component is registered and the rollup is ready.
    pub fn wait_ready(&self, timeout: Duration) -> Result<Duration, HarnessError> {
        let t0 = Instant::now();
        for n in self.expected_names() {
            while self.bus.lookup(&n).is_none() {
                if t0.elapsed() > timeout {
                    return Err(HarnessError::StartupTimeout {
                        component: n,
                        waited: t0.elapsed(),
                    });
                }
                std::thread::sleep(Duration::from_millis(1));
            }
        }
        loop {
            let snap = self.rollup.snapshot();
            if snap.ready {
                return Ok(t0.elapsed());
            }
            if t0.elapsed() > timeout {
                let waiting: Vec<String> = snap.subsystems.into_iter().filter(|s| !s.ready).map(|s| s.name).collect();
                return Err(HarnessError::StartupTimeout {
                    component: format!("rollup ({})", waiting.join(",")),
                    waited: t0.elapsed(),
                });
            }
            if self.bus.clock().is_virtual() {
                self.driver.advance(Duration::from_millis(10));
            } else {
                std::thread::sleep(Duration::from_millis(2));
            }
        }
    }

    pub fn start_gateway(&mut self, addr: &str) -> Result<SocketAddr, HarnessError> {
        let gw = Gateway::start(addr, self.gateway_state())?;
        let a = gw.local_addr();
        self.gateway = Some(gw);
        Ok(a)
    }

    pub fn gateway_state(&self) -> GatewayState {
        GatewayState {
            bus: self.bus.clone(),
            services: self.services.clone(),
            director: self.director.clone(),
            rollup: self.rollup.clone(),
            metrics: self.metrics.clone(),
            driver: self.driver.clone(),
            deadline: self.opts.deadline,
        }
    }

    pub fn ctx(&self, name: &str) -> Ctx {
        Ctx {
            name: name.to_string(),
            bus: self.bus.clone(),
            services: self.services.clone(),
            rollup: self.rollup.clone(),
            driver: self.driver.clone(),
            deadline: self.opts.deadline,
        }
    }

    pub fn config(&self) -> &FacilityConfig {
        &self.config
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    pub fn director(&self) -> &Director {
        &self.director
    }

    pub fn rollup(&self) -> &Arc<StatusRollup> {
        &self.rollup
    }

    pub fn plc(&self) -> &PlcHandle {
        &self.plc
    }

    pub fn driver(&self) -> Arc<FacilityDriver> {
        self.driver.clone()
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    pub fn metrics_report(&self) -> Result<MetricsReport, MetricsError> {
        self.metrics.report(&self.config.budgets)
    }

    pub fn ready_elapsed(&self) -> Duration {
        self.ready_elapsed
    }

    pub fn tcp_addr(&self) -> Option<SocketAddr> {
        self.tcp.as_ref().map(|t| t.local_addr())
    }

    pub fn gateway_addr(&self) -> Option<SocketAddr> {
        self.gateway.as_ref().map(|g| g.local_addr())
    }

    pub fn deadline(&self) -> Duration {
        self.opts.deadline
    }

    pub fn fep(&self, fep_id: &str) -> Option<Arc<FepHost>> {
        self.feps.read().get(fep_id).cloned()
    }

    pub fn fep_ids(&self) -> Vec<String> {
        self.config.feps.iter().map(|f| f.fep_id.clone()).collect()
    }

    pub fn fep_of(&self, point_id: &str) -> Result<&str, HarnessError> {
        self.point_fep.get(point_id).map(String::as_str).ok_or_else(|| HarnessError::Unknown {
            what: "point",
            id: point_id.to_string(),
        })
    }

    pub fn participants(&self) -> Vec<String> {
        self.config.supervisors.iter().map(|s| s.name.clone()).collect()
    }

    pub fn advance(&self, dt: Duration) {
        self.driver.advance(dt);
    }

    /// Simulated crash of one FEP.
    pub fn kill_fep(&self, fep_id: &str) -> Result<(), HarnessError> {
        let h = self.fep(fep_id).ok_or_else(|| HarnessError::Unknown {
            what: "fep",
            id: fep_id.to_string(),
        })?;
        h.kill();
        tracing::info!(fep = fep_id, "killed");
        Ok(())
    }

    /// Starts a new incarnation and waits for its rollup entry to be ready.
    /// Records the time under `restart_elapsed`.
    pub fn restart_fep(&self, fep_id: &str) -> Result<u64, HarnessError> {
        let cfg = self
            .config
            .feps
            .iter()
            .find(|f| f.fep_id == fep_id)
            .ok_or_else(|| HarnessError::Unknown {
                what: "fep",
                id: fep_id.to_string(),
            })?;
        let t0 = Instant::now();
        if let Some(old) = self.feps.write().remove(fep_id) {
            old.stop();
        }
        let h = FepHost::start_with(&self.bus, self.services.clone(), cfg, self.config.heartbeat)
            .map_err(|e| component(&fep_target(fep_id), e))?;
        let inc = h.incarnation();
        self.feps.write().insert(fep_id.to_string(), Arc::new(h));
        let name = fep_target(fep_id);
        loop {
            if self.rollup.subsystem(&name).is_some_and(|s| s.ready) {
                break;
            }
            if t0.elapsed() > self.opts.startup_timeout {
                return Err(HarnessError::StartupTimeout {
                    component: name,
                    waited: t0.elapsed(),
                });
            }
            if self.bus.clock().is_virtual() {
                self.driver.advance(Duration::from_millis(10));
            } else {
                std::thread::sleep(Duration::from_millis(1));
            }
        }
        self.metrics.record(metrics::RESTART_ELAPSED, t0.elapsed());
        tracing::info!(fep = fep_id, incarnation = inc, "restarted");
        Ok(inc)
    }

    fn fep_call<R: serde::de::DeserializeOwned>(&self, fep_id: &str, req: &FepRequest) -> Result<R, HarnessError> {
        wire::call(&self.bus, &fep_target(fep_id), req, self.opts.deadline).map_err(|e| component(&fep_target(fep_id), e))
    }

    /// Faults a point and waits for the rollup to show it. Records the
    /// latency under `status_propagation`.
    pub fn inject_fault(&self, point_id: &str, reason: &str) -> Result<Duration, HarnessError> {
        let fep = self.fep_of(point_id)?.to_string();
        let t0 = wall_micros();
        let started = Instant::now();
        self.fep_call::<()>(
            &fep,
            &FepRequest::InjectFault {
                point_id: point_id.to_string(),
                reason: reason.to_string(),
            },
        )?;
        let limit = self.config.budget(metrics::STATUS_PROPAGATION).unwrap_or(Duration::from_secs(10)) * 2;
        loop {
            if let Some(seen) = self.rollup.fault_seen_at(point_id) {
                let d = Duration::from_micros(seen.saturating_sub(t0));
                self.metrics.record(metrics::STATUS_PROPAGATION, d);
                return Ok(d);
            }
            if started.elapsed() > limit {
                return Err(HarnessError::Failed(format!("fault on {point_id} not visible after {limit:?}")));
            }
            if self.bus.clock().is_virtual() {
                self.driver.advance(Duration::from_millis(1));
            } else {
                std::thread::sleep(Duration::from_micros(200));
            }
        }
    }

    pub fn clear_fault(&self, point_id: &str) -> Result<(), HarnessError> {
        let fep = self.fep_of(point_id)?.to_string();
        self.fep_call::<()>(
            &fep,
            &FepRequest::ClearFault {
                point_id: point_id.to_string(),
            },
        )
    }

    pub fn set_field(&self, input_id: &str, value: bool) -> Result<(), HarnessError> {
        self.plc.set_field(input_id, value).map_err(|e| component("plc", e))
    }

    /// Beams with an alignment loop, by beam control supervisor.
    pub fn alignable_beams(&self) -> Vec<(String, String)> {
        self.config
            .supervisors
            .iter()
            .filter(|s| s.kind == SupervisorKind::BeamControl)
            .flat_map(|s| alignment_configs(&self.config, s).into_iter().map(|a| (s.name.clone(), a.beam_id)))
            .collect()
    }

    pub fn align(&self, beam_id: &str) -> Result<AlignmentTrace, HarnessError> {
        let (sup, _) = self
            .alignable_beams()
            .into_iter()
            .find(|(_, b)| b == beam_id)
            .ok_or_else(|| HarnessError::Unknown {
                what: "beam",
                id: beam_id.to_string(),
            })?;
        wire::call(
            &self.bus,
            &sup,
            &SupRequest::Align {
                beam_id: beam_id.to_string(),
            },
            self.opts.deadline * 10,
        )
        .map_err(|e| component(&sup, e))
    }

    /// Reserve, move, release as `holder`. Records the command round trip.
    pub fn jog(&self, motor: &str, delta: i64, holder: &str) -> Result<Duration, HarnessError> {
        let res = &self.services.reservations;
        res.reserve_default(motor, holder).map_err(|e| component("reservations", e))?;
        let t0 = Instant::now();
        let r = wire::call::<_, crate::fep::CommandAck>(
            &self.bus,
            &point_target(motor),
            &FepRequest::Command {
                point_id: motor.to_string(),
                command: PointCommand::MoveRelative { delta },
                caller: holder.to_string(),
            },
            self.opts.deadline,
        );
        let d = t0.elapsed();
        let _ = res.release(motor, holder);
        r.map_err(|e| component(motor, e))?;
        self.metrics.record(metrics::COMMAND_ROUND_TRIP, d);
        Ok(d)
    }

    /// Consumes a camera stream for `dur` of facility time and records the
    /// frame intervals. Intervals come from send times with a virtual clock
    /// and from arrival times with a wall clock.
    pub fn watch_video(&self, camera_id: &str, dur: Duration) -> Result<Vec<Duration>, HarnessError> {
        if !self.point_fep.contains_key(camera_id) {
            return Err(HarnessError::Unknown {
                what: "camera",
                id: camera_id.to_string(),
            });
        }
        let mut consumer = self
            .bus
            .open_stream(&video_stream(camera_id))
            .map_err(|e| component(camera_id, e))?;
        let mut stamps = Vec::new();
        if self.bus.clock().is_virtual() {
            let step = Duration::from_millis(10);
            let mut elapsed = Duration::ZERO;
            while elapsed < dur {
                self.driver.advance(step);
                elapsed += step;
                while let Some(f) = consumer.try_recv() {
                    stamps.push(Duration::from_nanos(f.sent_at.as_nanos()));
                }
            }
        } else {
            let end = Instant::now() + dur;
            let origin = Instant::now();
            while let Some(left) = end.checked_duration_since(Instant::now()) {
                if consumer.recv_timeout(left).is_some() {
                    stamps.push(origin.elapsed());
                }
            }
        }
        let intervals: Vec<Duration> = stamps.windows(2).map(|w| w[1].saturating_sub(w[0])).collect();
        for d in &intervals {
            self.metrics.record(metrics::VIDEO_FRAME_INTERVAL, *d);
        }
        Ok(intervals)
    }

    /// Stops everything in reverse start order. The bus registry is empty
    /// afterwards.
    pub fn shutdown(&mut self) {
        if self.stopped {
            return;
        }
        self.stopped = true;
        if let Some(g) = self.gateway.take() {
            g.stop();
        }
        self.tcp = None;
        if let Some(s) = self.director_service.take() {
            s.stop();
        }
        for mut s in self.supervisors.drain(..) {
            s.stop();
        }
        for (_, h) in std::mem::take(&mut *self.feps.write()) {
            h.stop();
            self.bus.deregister_endpoint(h.endpoint());
        }
        self.rollup.stop();
        self.plc.stop();
        if let Some(t) = self.timing.take() {
            t.stop();
        }
        if let Some(s) = self.services_host.take() {
            s.stop();
        }
        if let Some((stop, t)) = self.alert_watch.take() {
            stop.store(true, Ordering::Release);
            let _ = t.join();
        }
        tracing::info!(facility = %self.config.name, "stopped");
    }
}

impl Drop for Facility {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Records raise-to-delivery latency for every alert notice.
fn watch_alerts(bus: &Bus, metrics: Arc<Metrics>) -> Result<(Arc<AtomicBool>, JoinHandle<()>), BusError> {
    let sub = bus.subscribe("alert/*")?;
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    let t = std::thread::Builder::new()
        .name("alert-watch".into())
        .spawn(move || {
            while !s.load(Ordering::Acquire) {
                let Some(ev) = sub.recv_timeout(Duration::from_millis(20)) else {
                    continue;
                };
                if let Ok(n) = wire::from_bytes::<AlertNotice>(&ev.payload) {
                    let d = Duration::from_micros(wall_micros().saturating_sub(n.wall_us));
                    metrics.record(metrics::ALERT_DELIVERY, d);
                }
            }
        })
        .map_err(|e| BusError::Transport(e.to_string()))?;
    Ok((stop, t))
}
