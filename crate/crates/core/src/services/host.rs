//! Bus front ends `svc/alerts`, `svc/events`, `svc/reservations` and
//! `svc/archive` over a shared [`Services`].

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::alerts::{AlertAction, AlertId, Severity};
use super::archive::ArchiveError;
use super::events::{EventCategory, TimeRange};
use super::Services;
use crate::bus::{Bus, BusError, Endpoint, ServiceHandle};
use crate::clock::SimTime;
use crate::wire::{self, err_reply, ok_reply, reply_from};

pub const ALERTS: &str = "svc/alerts";
pub const EVENTS: &str = "svc/events";
pub const RESERVATIONS: &str = "svc/reservations";
pub const ARCHIVE: &str = "svc/archive";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AlertsRequest {
    Raise {
        source: String,
        severity: Severity,
        text: String,
    },
    Transition {
        alert_id: AlertId,
        action: AlertAction,
        actor: String,
    },
    Get {
        alert_id: AlertId,
    },
    Active,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EventsRequest {
    Log {
        source: String,
        category: EventCategory,
        payload: String,
    },
    Query {
        start: Option<SimTime>,
        end: Option<SimTime>,
        source: Option<String>,
        category: Option<EventCategory>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ReservationsRequest {
    Reserve {
        resource: String,
        holder: String,
        /// `None` applies the holder-kind default lease.
        lease_ms: Option<u64>,
    },
    Release {
        resource: String,
        holder: String,
    },
    Holder {
        resource: String,
    },
    Live,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ArchiveRequest {
    Store {
        shot_id: String,
        source: String,
        #[serde(with = "wire::b64")]
        payload: Vec<u8>,
        overwrite: bool,
    },
    Fetch {
        shot_id: String,
    },
}

/// Running bus handlers for the four services.
pub struct ServicesHost {
    handles: Vec<ServiceHandle>,
}

impl ServicesHost {
    pub fn start(bus: &Bus, services: Arc<Services>) -> Result<Self, BusError> {
        let mut handles = Vec::new();

        let s = services.clone();
        handles.push(serve(bus, "svc-alerts", ALERTS, move |p| match wire::from_bytes(p) {
            Ok(AlertsRequest::Raise { source, severity, text }) => {
                if source.is_empty() {
                    err_reply("EmptySource", "source must be non-empty")
                } else {
                    ok_reply(s.alerts.raise(&source, severity, &text))
                }
            }
            Ok(AlertsRequest::Transition { alert_id, action, actor }) => {
                reply_from(s.alerts.transition(alert_id, action, &actor))
            }
            Ok(AlertsRequest::Get { alert_id }) => reply_from(s.alerts.get(alert_id)),
            Ok(AlertsRequest::Active) => ok_reply(s.alerts.active()),
            Err(e) => err_reply("BadRequest", e),
        })?);

        let s = services.clone();
        handles.push(serve(bus, "svc-events", EVENTS, move |p| match wire::from_bytes(p) {
            Ok(EventsRequest::Log { source, category, payload }) => reply_from(s.log(&source, category, &payload)),
            Ok(EventsRequest::Query {
                start,
                end,
                source,
                category,
            }) => {
                let all = TimeRange::all();
                let range = TimeRange {
                    start: start.unwrap_or(all.start),
                    end: end.unwrap_or(all.end),
                };
                reply_from(s.events.query(range, source.as_deref(), category))
            }
            Err(e) => err_reply("BadRequest", e),
        })?);

        let s = services.clone();
        handles.push(serve(bus, "svc-reservations", RESERVATIONS, move |p| {
            match wire::from_bytes(p) {
                Ok(ReservationsRequest::Reserve {
                    resource,
                    holder,
                    lease_ms,
                }) => match lease_ms {
                    Some(ms) => reply_from(s.reservations.reserve(&resource, &holder, Some(Duration::from_millis(ms)))),
                    None => reply_from(s.reservations.reserve_default(&resource, &holder)),
                },
                Ok(ReservationsRequest::Release { resource, holder }) => {
                    reply_from(s.reservations.release(&resource, &holder))
                }
                Ok(ReservationsRequest::Holder { resource }) => ok_reply(s.reservations.holder_of(&resource)),
                Ok(ReservationsRequest::Live) => ok_reply(s.reservations.live()),
                Err(e) => err_reply("BadRequest", e),
            }
        })?);

        let s = services;
        handles.push(serve(bus, "svc-archive", ARCHIVE, move |p| match wire::from_bytes(p) {
            Ok(ArchiveRequest::Store {
                shot_id,
                source,
                payload,
                overwrite,
            }) => reply_from::<_, ArchiveError>(s.store(&shot_id, &source, &payload, overwrite)),
            Ok(ArchiveRequest::Fetch { shot_id }) => ok_reply(s.archive.fetch(&shot_id)),
            Err(e) => err_reply("BadRequest", e),
        })?);

        Ok(ServicesHost { handles })
    }

    pub fn stop(self) {
        for h in self.handles {
            h.stop();
        }
    }
}

fn serve<F>(bus: &Bus, node: &str, name: &str, mut f: F) -> Result<ServiceHandle, BusError>
where
    F: FnMut(&[u8]) -> Vec<u8> + Send + 'static,
{
    let ep = Endpoint::inproc(node, bus.next_incarnation(node));
    bus.serve(&ep, &[name], move |req| f(req.payload()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use crate::services::{Alert, AlertState, EventRecord, FetchedRecord, Reservation};
    use crate::wire::call;

    const D: Duration = Duration::from_secs(1);

    #[test]
    fn all_targets_answer() {
        let bus = Bus::new(SimClock::new_virtual());
        let services = Services::in_memory(&bus);
        let host = ServicesHost::start(&bus, services.clone()).unwrap();

        let id: Option<AlertId> = call(
            &bus,
            ALERTS,
            &AlertsRequest::Raise {
                source: "fep/beam01".into(),
                severity: Severity::Serious,
                text: "hot".into(),
            },
            D,
        )
        .unwrap();
        let id = id.unwrap();
        let st: AlertState = call(
            &bus,
            ALERTS,
            &AlertsRequest::Transition {
                alert_id: id,
                action: AlertAction::Clear,
                actor: "op".into(),
            },
            D,
        )
        .unwrap();
        assert_eq!(st, AlertState::Cleared);
        let err = call::<_, AlertState>(
            &bus,
            ALERTS,
            &AlertsRequest::Transition {
                alert_id: id,
                action: AlertAction::Acknowledge,
                actor: "op".into(),
            },
            D,
        )
        .unwrap_err();
        assert_eq!(err.remote_kind(), Some("IllegalTransition"));
        let active: Vec<Alert> = call(&bus, ALERTS, &AlertsRequest::Active, D).unwrap();
        assert!(active.is_empty());

        let seq: u64 = call(
            &bus,
            EVENTS,
            &EventsRequest::Log {
                source: "op/alice".into(),
                category: EventCategory::OperatorAction,
                payload: "hello".into(),
            },
            D,
        )
        .unwrap();
        assert_eq!(seq, 1);
        let recs: Vec<EventRecord> = call(
            &bus,
            EVENTS,
            &EventsRequest::Query {
                start: None,
                end: None,
                source: Some("op/*".into()),
                category: None,
            },
            D,
        )
        .unwrap();
        assert_eq!(recs.len(), 1);

        let _: Reservation = call(
            &bus,
            RESERVATIONS,
            &ReservationsRequest::Reserve {
                resource: "beam01/align_x".into(),
                holder: "op:alice".into(),
                lease_ms: None,
            },
            D,
        )
        .unwrap();
        let err = call::<_, Reservation>(
            &bus,
            RESERVATIONS,
            &ReservationsRequest::Reserve {
                resource: "beam01/align_x".into(),
                holder: "op:bob".into(),
                lease_ms: Some(10),
            },
            D,
        )
        .unwrap_err();
        assert_eq!(err.remote_kind(), Some("AlreadyReserved"));

        let _: crate::services::ArchiveRecord = call(
            &bus,
            ARCHIVE,
            &ArchiveRequest::Store {
                shot_id: "s1".into(),
                source: "pt/a".into(),
                payload: vec![1, 2, 3],
                overwrite: false,
            },
            D,
        )
        .unwrap();
        let fetched: Vec<FetchedRecord> = call(&bus, ARCHIVE, &ArchiveRequest::Fetch { shot_id: "s1".into() }, D).unwrap();
        assert_eq!(fetched.len(), 1);
        assert_eq!(fetched[0].record.payload, vec![1, 2, 3]);

        host.stop();
        assert!(matches!(bus.resolve_name(ARCHIVE), Err(BusError::NameNotFound(_))));
    }
}
