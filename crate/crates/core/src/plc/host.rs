//! `plc/segment` bus peer with its scan loop.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, select, tick, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{InterlockInput, Permit, PlcError, PlcSegment, ScanOutput, SlowChannel};
use crate::bus::{Bus, BusError, Endpoint, ServiceHandle};
use crate::wire::{self, err_reply, ok_reply, reply_from};

pub const PLC_TARGET: &str = "plc/segment";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PlcRequest {
    Evaluate { action_id: String },
    SetField { input_id: String, value: bool },
    Scan,
    ResetTrips { actor: String },
    CommandSlow { channel_id: String, setpoint: f64 },
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlcSnapshot {
    pub scans: u64,
    pub inputs: Vec<InterlockInput>,
    pub permits: BTreeMap<String, Permit>,
    pub channels: Vec<SlowChannel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScanSummary {
    scan: u64,
    denied: usize,
    new_trips: Vec<String>,
    latched: Vec<String>,
}

struct Shared {
    seg: Mutex<PlcSegment>,
    bus: Bus,
    period: Duration,
    /// Simulated time not yet consumed by a whole scan period.
    carry: Mutex<Duration>,
}

impl Shared {
    fn scan(&self) -> ScanOutput {
        let mut seg = self.seg.lock();
        let before = seg.last_permits().clone();
        let chan_before: Vec<f64> = seg.channels().map(|c| c.value).collect();
        let out = seg.scan_cycle(&BTreeMap::new());
        for (action, permit) in &out.permits {
            if before.get(action) != Some(permit) {
                let _ = self.bus.publish(&format!("plc/{action}"), wire::to_bytes(permit));
            }
        }
        for (c, v0) in seg.channels().zip(chan_before) {
            if c.value != v0 || out.scan == 1 {
                let _ = self.bus.publish(&format!("plc/{}", c.channel_id), wire::to_bytes(c));
            }
        }
        let summary = ScanSummary {
            scan: out.scan,
            denied: out.permits.values().filter(|p| !p.allowed()).count(),
            new_trips: out.new_trips.clone(),
            latched: seg.latched(),
        };
        drop(seg);
        let _ = self.bus.publish("plc/scan", wire::to_bytes(&summary));
        out
    }

    fn advance(&self, dt: Duration) -> u64 {
        let mut carry = self.carry.lock();
        let mut remaining = *carry + dt;
        let mut scans = 0;
        while remaining >= self.period {
            self.seg.lock().advance_channels(self.period);
            self.scan();
            remaining -= self.period;
            scans += 1;
        }
        *carry = remaining;
        scans
    }
}

/// Running segment. Cloneable; the last clone dropped does not stop it,
/// call [`PlcHandle::stop`].
#[derive(Clone)]
pub struct PlcHandle {
    shared: Arc<Shared>,
    parts: Arc<Mutex<Option<Parts>>>,
}

struct Parts {
    service: ServiceHandle,
    ticker: Option<(Sender<()>, JoinHandle<()>)>,
}

impl PlcHandle {
    /// Registers `plc/segment`. With a wall clock a scan thread runs every
    /// `period`; with a virtual clock scans happen in [`PlcHandle::advance`].
    pub fn start(bus: &Bus, segment: PlcSegment, period: Duration) -> Result<Self, BusError> {
        let shared = Arc::new(Shared {
            seg: Mutex::new(segment),
            bus: bus.clone(),
            period,
            carry: Mutex::new(Duration::ZERO),
        });
        shared.scan();
        let s = shared.clone();
        let ep = Endpoint::inproc("plc", bus.next_incarnation("plc"));
        let service = bus.serve(&ep, &[PLC_TARGET], move |req| match wire::from_bytes(req.payload()) {
            Ok(PlcRequest::Evaluate { action_id }) => reply_from(s.seg.lock().evaluate(&action_id)),
            Ok(PlcRequest::SetField { input_id, value }) => reply_from(s.seg.lock().set_field(&input_id, value)),
            Ok(PlcRequest::Scan) => ok_reply(s.scan()),
            Ok(PlcRequest::ResetTrips { .. }) => ok_reply(s.seg.lock().reset_trips()),
            Ok(PlcRequest::CommandSlow { channel_id, setpoint }) => {
                reply_from::<f64, PlcError>(s.seg.lock().command_slow(&channel_id, setpoint))
            }
            Ok(PlcRequest::Snapshot) => ok_reply(snapshot(&s.seg.lock())),
            Err(e) => err_reply("BadRequest", e),
        })?;
        let ticker = (!bus.clock().is_virtual()).then(|| {
            let (stop_tx, stop_rx) = bounded::<()>(1);
            let s = shared.clone();
            let t = std::thread::Builder::new()
                .name("plc-scan".into())
                .spawn(move || {
                    let ticks = tick(s.period);
                    loop {
                        select! {
                            recv(ticks) -> _ => {
                                s.seg.lock().advance_channels(s.period);
                                s.scan();
                            }
                            recv(stop_rx) -> _ => break,
                        }
                    }
                })
                .expect("spawn plc scan thread");
            (stop_tx, t)
        });
        Ok(PlcHandle {
            shared,
            parts: Arc::new(Mutex::new(Some(Parts { service, ticker }))),
        })
    }

    pub fn scan(&self) -> ScanOutput {
        self.shared.scan()
    }

    /// Advances slow channels and runs one scan per elapsed period. Returns
    /// the number of scans run.
    pub fn advance(&self, dt: Duration) -> u64 {
        self.shared.advance(dt)
    }

    pub fn evaluate(&self, action_id: &str) -> Result<Permit, PlcError> {
        self.shared.seg.lock().evaluate(action_id)
    }

    pub fn set_field(&self, input_id: &str, value: bool) -> Result<(), PlcError> {
        self.shared.seg.lock().set_field(input_id, value)
    }

    pub fn reset_trips(&self) -> Vec<String> {
        self.shared.seg.lock().reset_trips()
    }

    pub fn command_slow(&self, channel_id: &str, setpoint: f64) -> Result<f64, PlcError> {
        self.shared.seg.lock().command_slow(channel_id, setpoint)
    }

    pub fn snapshot(&self) -> PlcSnapshot {
        snapshot(&self.shared.seg.lock())
    }

    pub fn with_segment<R>(&self, f: impl FnOnce(&mut PlcSegment) -> R) -> R {
        f(&mut self.shared.seg.lock())
    }

    pub fn stop(&self) {
        if let Some(parts) = self.parts.lock().take() {
            if let Some((tx, t)) = parts.ticker {
                let _ = tx.send(());
                let _ = t.join();
            }
            parts.service.stop();
        }
    }
}

fn snapshot(seg: &PlcSegment) -> PlcSnapshot {
    PlcSnapshot {
        scans: seg.scans(),
        inputs: seg.inputs().cloned().collect(),
        permits: seg.last_permits().clone(),
        channels: seg.channels().cloned().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use crate::plc::{Literal, PermissiveChain, SlowKind};
    use crate::wire::call;

    fn segment() -> PlcSegment {
        let mut s = PlcSegment::new();
        s.add_input(InterlockInput::new("door/bay1_closed", true)).unwrap();
        s.add_chain(PermissiveChain {
            action_id: "power/pc01/charge".into(),
            required: vec![Literal {
                input_id: "door/bay1_closed".into(),
                required: true,
            }],
        })
        .unwrap();
        s.add_channel(SlowChannel::new("vac/chamber", SlowKind::VacuumPressure, 1000.0, 2.0, (0.0, 2000.0)))
            .unwrap();
        s
    }

    #[test]
    fn virtual_scans_follow_advance() {
        let bus = Bus::new(SimClock::new_virtual());
        let plc = PlcHandle::start(&bus, segment(), Duration::from_millis(100)).unwrap();
        let sub = bus.subscribe("plc/power/pc01/charge").unwrap();
        assert_eq!(plc.advance(Duration::from_millis(250)), 2);
        assert_eq!(plc.advance(Duration::from_millis(50)), 1);
        assert_eq!(plc.snapshot().scans, 4);

        let d = Duration::from_secs(1);
        let _: () = call(
            &bus,
            PLC_TARGET,
            &PlcRequest::SetField {
                input_id: "door/bay1_closed".into(),
                value: false,
            },
            d,
        )
        .unwrap();
        // queued until the next scan
        assert!(plc.evaluate("power/pc01/charge").unwrap().allowed());
        plc.advance(Duration::from_millis(100));
        assert!(!plc.evaluate("power/pc01/charge").unwrap().allowed());
        let ev = sub.try_recv().unwrap();
        let p: Permit = wire::from_bytes(&ev.payload).unwrap();
        assert!(!p.allowed());

        let err = call::<_, f64>(
            &bus,
            PLC_TARGET,
            &PlcRequest::CommandSlow {
                channel_id: "vac/chamber".into(),
                setpoint: 5000.0,
            },
            d,
        )
        .unwrap_err();
        assert_eq!(err.remote_kind(), Some("SetpointOutOfBounds"));
        plc.stop();
        assert!(bus.resolve_name(PLC_TARGET).is_err());
    }

    #[test]
    fn slow_channel_through_scans() {
        let bus = Bus::new(SimClock::new_virtual());
        let plc = PlcHandle::start(&bus, segment(), Duration::from_millis(100)).unwrap();
        plc.command_slow("vac/chamber", 0.0).unwrap();
        plc.advance(Duration::from_secs(2));
        let v = plc.snapshot().channels[0].value;
        assert!(((v - 1000.0 * (-1.0f64).exp()) / v).abs() < 1e-6);
        plc.stop();
    }

    #[test]
    fn wall_mode_scans_on_its_own() {
        let bus = Bus::new(SimClock::new_wall());
        let plc = PlcHandle::start(&bus, segment(), Duration::from_millis(10)).unwrap();
        std::thread::sleep(Duration::from_millis(120));
        assert!(plc.snapshot().scans >= 3);
        plc.stop();
    }
}
