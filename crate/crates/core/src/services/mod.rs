//! Framework services: alerts, event log, reservations and shot archive.

pub mod alerts;
pub mod archive;
pub mod events;
pub mod host;
pub mod reservations;

use std::io;
use std::path::Path;
use std::sync::Arc;

pub use alerts::{Alert, AlertAction, AlertConfig, AlertId, AlertNotice, AlertService, AlertState, Severity};
pub use archive::{Archive, ArchiveError, ArchiveRecord, FetchStatus, FetchedRecord};
pub use events::{EventCategory, EventLog, EventLogError, EventRecord, TimeRange};
pub use host::ServicesHost;
pub use reservations::{Reservation, ReservationError, ReservationPolicy, ReservationService};

use crate::bus::Bus;
use crate::clock::SimClock;

/// The four services of one facility. Components in the same process call
/// these directly; remote peers go through [`ServicesHost`].
pub struct Services {
    pub clock: SimClock,
    pub alerts: AlertService,
    pub events: EventLog,
    pub reservations: ReservationService,
    pub archive: Archive,
}

impl Services {
    pub fn in_memory(bus: &Bus) -> Arc<Self> {
        let clock = bus.clock().clone();
        Arc::new(Services {
            alerts: AlertService::new(clock.clone(), Some(bus.clone()), AlertConfig::default()),
            events: EventLog::in_memory(clock.clone()),
            reservations: ReservationService::new(clock.clone(), ReservationPolicy::default()),
            archive: Archive::in_memory(clock.clone()),
            clock,
        })
    }

    /// Persistent services writing `events.log` and `archive/` under `dir`.
    pub fn open(bus: &Bus, dir: impl AsRef<Path>) -> io::Result<Arc<Self>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let clock = bus.clock().clone();
        Ok(Arc::new(Services {
            alerts: AlertService::new(clock.clone(), Some(bus.clone()), AlertConfig::default()),
            events: EventLog::open(clock.clone(), dir.join("events.log"))?,
            reservations: ReservationService::new(clock.clone(), ReservationPolicy::default()),
            archive: Archive::open(clock.clone(), dir)?,
            clock,
        }))
    }

    pub fn from_parts(
        clock: SimClock,
        alerts: AlertService,
        events: EventLog,
        reservations: ReservationService,
        archive: Archive,
    ) -> Arc<Self> {
        Arc::new(Services {
            clock,
            alerts,
            events,
            reservations,
            archive,
        })
    }

    /// Logs an event. A storage failure is also raised as a critical alert.
    pub fn log(&self, source: &str, category: EventCategory, payload: &str) -> Result<u64, EventLogError> {
        self.events.log(source, category, payload).inspect_err(|e| {
            self.alerts
                .raise("svc/events", Severity::Critical, &format!("event log {e}"));
        })
    }

    /// Archives a payload. A storage failure is also raised as a critical alert.
    pub fn store(&self, shot_id: &str, source: &str, payload: &[u8], overwrite: bool) -> Result<ArchiveRecord, ArchiveError> {
        self.archive
            .store(shot_id, source, payload, overwrite)
            .inspect_err(|e| {
                if matches!(e, ArchiveError::StorageFailure(_)) {
                    self.alerts
                        .raise("svc/archive", Severity::Critical, &format!("archive {e}"));
                }
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn storage_failure_becomes_critical_alert() {
        let bus = Bus::new(SimClock::new_virtual());
        let clock = bus.clock().clone();
        let s = Services::from_parts(
            clock.clone(),
            AlertService::new(clock.clone(), Some(bus.clone()), AlertConfig::default()),
            EventLog::with_sink(clock.clone(), Box::new(events::FailingSink)),
            ReservationService::new(clock.clone(), ReservationPolicy::default()),
            Archive::in_memory(clock),
        );
        let sub = bus.subscribe("alert/critical").unwrap();
        assert!(matches!(
            s.log("op", EventCategory::OperatorAction, "x"),
            Err(EventLogError::StorageFailure(_))
        ));
        assert_eq!(s.events.len(), 0);
        let active = s.alerts.active();
        assert_eq!(active.len(), 1);
        assert_eq!(active[0].severity, Severity::Critical);
        assert!(sub.try_recv().is_some());

        s.archive.set_fail_writes(true);
        assert!(s.store("s", "x", b"1", false).is_err());
        assert_eq!(s.alerts.active().len(), 2);
    }
}
