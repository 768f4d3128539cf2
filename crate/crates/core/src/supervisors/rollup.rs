//! Facility status rollup: worst-of child health per subsystem.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bus::{Bus, BusError, Event, Subscription};
use crate::clock::{wall_micros, SimTime};
use crate::fep::{FepInfo, Health, StatusReading};
use crate::wire;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RollupConfig {
    /// Subsystem name to the points it is made of.
    pub subsystems: BTreeMap<String, BTreeSet<String>>,
    /// FEP id to its points.
    pub feps: BTreeMap<String, BTreeSet<String>>,
    /// A FEP whose last heartbeat is older than this is down.
    pub stale_after: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFault {
    pub point_id: String,
    pub fep_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemStatus {
    pub name: String,
    pub health: Health,
    pub ready: bool,
    pub faults: Vec<PointFault>,
    pub warnings: usize,
    pub unreported: usize,
    pub down: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollupSnapshot {
    pub ready: bool,
    pub at: SimTime,
    pub subsystems: Vec<SubsystemStatus>,
}

impl RollupSnapshot {
    pub fn subsystem(&self, name: &str) -> Option<&SubsystemStatus> {
        self.subsystems.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone)]
struct PointView {
    health: Health,
    reason: Option<String>,
}

#[derive(Debug, Clone)]
struct FepView {
    incarnation: u64,
    last_seen: SimTime,
    down: bool,
}

#[derive(Default)]
struct State {
    points: HashMap<String, PointView>,
    feps: HashMap<String, FepView>,
    fault_seen_us: HashMap<String, u64>,
    updates: u64,
}

pub struct StatusRollup {
    bus: Bus,
    config: RollupConfig,
    point_fep: HashMap<String, String>,
    state: Mutex<State>,
    subs: Mutex<Vec<Subscription>>,
    stop: AtomicBool,
    pump_thread: Mutex<Option<JoinHandle<()>>>,
}

impl StatusRollup {
    /// Subscribes before any FEP starts so initial status is not missed.
    /// With a wall clock a thread applies updates as they arrive; with a
    /// virtual clock they are applied on each query.
    pub fn start(bus: &Bus, config: RollupConfig) -> Result<Arc<StatusRollup>, BusError> {
        let subs = vec![
            bus.subscribe("status/*/*")?,
            bus.subscribe("status/*/*/*")?,
            bus.subscribe("heartbeat/*")?,
        ];
        let point_fep = config
            .feps
            .iter()
            .flat_map(|(f, pts)| pts.iter().map(move |p| (p.clone(), f.clone())))
            .collect();
        let r = Arc::new(StatusRollup {
            bus: bus.clone(),
            config,
            point_fep,
            state: Mutex::new(State::default()),
            subs: Mutex::new(subs),
            stop: AtomicBool::new(false),
            pump_thread: Mutex::new(None),
        });
        if !bus.clock().is_virtual() {
            let weak = Arc::downgrade(&r);
            let t = std::thread::Builder::new()
                .name("rollup".into())
                .spawn(move || loop {
                    let Some(r) = weak.upgrade() else { break };
                    if r.stop.load(Ordering::Acquire) {
                        break;
                    }
                    r.pump_blocking(Duration::from_millis(20));
                })
                .expect("spawn rollup thread");
            *r.pump_thread.lock() = Some(t);
        }
        Ok(r)
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.pump_thread.lock().take() {
            let _ = t.join();
        }
    }

    fn apply(&self, st: &mut State, ev: Event) {
        if let Some(fep) = ev.topic.strip_prefix("heartbeat/") {
            if let Ok(info) = wire::from_bytes::<FepInfo>(&ev.payload) {
                let v = st.feps.entry(fep.to_string()).or_insert(FepView {
                    incarnation: info.incarnation,
                    last_seen: info.now,
                    down: false,
                });
                if info.incarnation >= v.incarnation {
                    v.incarnation = info.incarnation;
                    v.last_seen = v.last_seen.max(info.now);
                    v.down = false;
                }
            }
            return;
        }
        let Ok(r) = wire::from_bytes::<StatusReading>(&ev.payload) else {
            return;
        };
        if r.health == Health::Fault {
            st.fault_seen_us.entry(r.point_id.clone()).or_insert_with(wall_micros);
        } else {
            st.fault_seen_us.remove(&r.point_id);
        }
        st.points.insert(
            r.point_id,
            PointView {
                health: r.health,
                reason: r.reason,
            },
        );
        st.updates += 1;
    }

    /// Applies everything queued. Returns the number of events applied.
    pub fn pump(&self) -> usize {
        let subs = self.subs.lock();
        let mut st = self.state.lock();
        let mut n = 0;
        for s in subs.iter() {
            for ev in s.drain() {
                self.apply(&mut st, ev);
                n += 1;
            }
        }
        n
    }

    fn pump_blocking(&self, wait: Duration) -> usize {
        let n = self.pump();
        if n > 0 {
            return n;
        }
        let rx = {
            let subs = self.subs.lock();
            subs.iter().map(|s| s.receiver().clone()).collect::<Vec<_>>()
        };
        let mut sel = crossbeam_channel::Select::new();
        for r in &rx {
            sel.recv(r);
        }
        let _ = sel.ready_timeout(wait);
        self.pump()
    }

    /// Marks a FEP down until a heartbeat from a newer incarnation arrives.
    pub fn mark_down(&self, fep_id: &str) {
        self.pump();
        let mut st = self.state.lock();
        if let Some(v) = st.feps.get_mut(fep_id) {
            v.down = true;
            v.incarnation += 1;
        }
    }

    /// Wall-clock microseconds at which the rollup first saw `point_id`
    /// faulted, if it currently is.
    pub fn fault_seen_at(&self, point_id: &str) -> Option<u64> {
        if self.bus.clock().is_virtual() {
            self.pump();
        }
        self.state.lock().fault_seen_us.get(point_id).copied()
    }

    pub fn point_health(&self, point_id: &str) -> Option<Health> {
        if self.bus.clock().is_virtual() {
            self.pump();
        }
        self.state.lock().points.get(point_id).map(|p| p.health)
    }

    fn fep_down(&self, st: &State, fep: &str, now: SimTime) -> bool {
        match st.feps.get(fep) {
            None => true,
            Some(v) => v.down || now.saturating_sub(v.last_seen) > self.config.stale_after,
        }
    }

    fn summarize<'a>(
        &self,
        st: &State,
        name: &str,
        points: impl Iterator<Item = &'a String>,
        feps: &BTreeSet<String>,
        now: SimTime,
    ) -> SubsystemStatus {
        let mut s = SubsystemStatus {
            name: name.to_string(),
            health: Health::Ok,
            ready: true,
            faults: Vec::new(),
            warnings: 0,
            unreported: 0,
            down: feps.iter().filter(|f| self.fep_down(st, f, now)).cloned().collect(),
        };
        for p in points {
            match st.points.get(p) {
                None => s.unreported += 1,
                Some(v) => {
                    s.health = s.health.max(v.health);
                    match v.health {
                        Health::Fault => s.faults.push(PointFault {
                            point_id: p.clone(),
                            fep_id: self.point_fep.get(p).cloned(),
                            reason: v.reason.clone().unwrap_or_default(),
                        }),
                        Health::Warning => s.warnings += 1,
                        Health::Ok => {}
                    }
                }
            }
        }
        if !s.down.is_empty() {
            s.health = Health::Fault;
        }
        s.ready = s.health != Health::Fault && s.unreported == 0;
        s
    }

    pub fn snapshot(&self) -> RollupSnapshot {
        if self.bus.clock().is_virtual() {
            self.pump();
        }
        let now = self.bus.clock().now();
        let st = self.state.lock();
        let mut subsystems = Vec::new();
        for (name, pts) in &self.config.subsystems {
            let feps: BTreeSet<String> = pts.iter().filter_map(|p| self.point_fep.get(p).cloned()).collect();
            subsystems.push(self.summarize(&st, name, pts.iter(), &feps, now));
        }
        for (fep, pts) in &self.config.feps {
            let one = BTreeSet::from([fep.clone()]);
            subsystems.push(self.summarize(&st, &format!("fep/{fep}"), pts.iter(), &one, now));
        }
        RollupSnapshot {
            ready: subsystems.iter().all(|s| s.ready),
            at: now,
            subsystems,
        }
    }

    pub fn subsystem(&self, name: &str) -> Option<SubsystemStatus> {
        self.snapshot().subsystems.into_iter().find(|s| s.name == name)
    }

    pub fn updates(&self) -> u64 {
        self.state.lock().updates
    }
}

impl Drop for StatusRollup {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;

    fn reading(p: &str, health: Health) -> Vec<u8> {
        wire::to_bytes(&StatusReading {
            point_id: p.into(),
            value: crate::fep::Value::Scalar(0.0),
            health,
            reason: (health != Health::Ok).then(|| "bad".into()),
            timestamp: SimTime::ZERO,
        })
    }

    fn beat(bus: &Bus, fep: &str, inc: u64) {
        let info = FepInfo {
            fep_id: fep.into(),
            incarnation: inc,
            points: 2,
            now: bus.clock().now(),
        };
        bus.publish(&format!("heartbeat/{fep}"), wire::to_bytes(&info)).unwrap();
    }

    fn config() -> RollupConfig {
        RollupConfig {
            subsystems: BTreeMap::from([
                ("sup/a".to_string(), BTreeSet::from(["b1/x".to_string()])),
                ("sup/b".to_string(), BTreeSet::from(["b1/y".to_string()])),
            ]),
            feps: BTreeMap::from([(
                "f1".to_string(),
                BTreeSet::from(["b1/x".to_string(), "b1/y".to_string()]),
            )]),
            stale_after: Duration::from_secs(6),
        }
    }

    #[test]
    fn conjunction_of_subsystems() {
        let bus = Bus::new(SimClock::new_virtual());
        let r = StatusRollup::start(&bus, config()).unwrap();
        assert!(!r.snapshot().ready);
        beat(&bus, "f1", 1);
        bus.publish("status/b1/x", reading("b1/x", Health::Ok)).unwrap();
        bus.publish("status/b1/y", reading("b1/y", Health::Warning)).unwrap();
        assert!(r.snapshot().ready);
        bus.publish("status/b1/y", reading("b1/y", Health::Fault)).unwrap();
        let s = r.snapshot();
        assert!(!s.ready);
        assert!(s.subsystem("sup/a").unwrap().ready);
        let b = s.subsystem("sup/b").unwrap();
        assert!(!b.ready);
        assert_eq!(b.faults[0].point_id, "b1/y");
        assert_eq!(b.faults[0].fep_id.as_deref(), Some("f1"));
        assert!(r.fault_seen_at("b1/y").is_some());
    }

    #[test]
    fn fep_down_and_back() {
        let bus = Bus::new(SimClock::new_virtual());
        let r = StatusRollup::start(&bus, config()).unwrap();
        beat(&bus, "f1", 1);
        bus.publish("status/b1/x", reading("b1/x", Health::Ok)).unwrap();
        bus.publish("status/b1/y", reading("b1/y", Health::Ok)).unwrap();
        assert!(r.snapshot().ready);
        r.mark_down("f1");
        assert!(!r.snapshot().ready);
        beat(&bus, "f1", 1);
        assert!(!r.snapshot().ready, "old incarnation does not revive");
        beat(&bus, "f1", 2);
        assert!(r.snapshot().ready);
        bus.clock().advance(Duration::from_secs(7));
        assert_eq!(r.snapshot().subsystem("fep/f1").unwrap().down, vec!["f1".to_string()]);
    }

    #[test]
    fn wall_mode_applies_in_background() {
        let bus = Bus::new(SimClock::new_wall());
        let r = StatusRollup::start(&bus, config()).unwrap();
        bus.publish("status/b1/x", reading("b1/x", Health::Fault)).unwrap();
        let t0 = std::time::Instant::now();
        while r.state.lock().fault_seen_us.is_empty() {
            assert!(t0.elapsed() < Duration::from_secs(2));
            std::thread::sleep(Duration::from_millis(1));
        }
        r.stop();
    }
}
