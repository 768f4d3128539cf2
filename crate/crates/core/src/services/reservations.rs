//! Device reservations: exclusive, optionally leased ownership of a named
//! resource. All decisions go through one mutex, so the operation log is a
//! total order that can be audited afterwards.

use std::collections::HashMap;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::{SimClock, SimTime};
use crate::wire::ErrorKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub resource: String,
    pub holder: String,
    pub acquired_at: SimTime,
    pub lease: Option<Duration>,
}

impl Reservation {
    pub fn expires_at(&self) -> Option<SimTime> {
        self.lease.map(|l| self.acquired_at.add(l))
    }

    pub fn is_live(&self, now: SimTime) -> bool {
        self.expires_at().is_none_or(|e| now < e)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReservationError {
    #[error("{resource} already reserved by {holder}")]
    AlreadyReserved { resource: String, holder: String },
    #[error("{resource} is held by {holder}, not {caller}")]
    NotHolder {
        resource: String,
        holder: String,
        caller: String,
    },
    #[error("{0} is not reserved")]
    NotReserved(String),
}

impl ErrorKind for ReservationError {
    fn kind(&self) -> &'static str {
        match self {
            ReservationError::AlreadyReserved { .. } => "AlreadyReserved",
            ReservationError::NotHolder { .. } => "NotHolder",
            ReservationError::NotReserved(_) => "NotReserved",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Acquire,
    Renew,
    Release,
    Expire,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationOp {
    pub seq: u64,
    pub resource: String,
    pub holder: String,
    pub kind: OpKind,
    pub at: SimTime,
    pub lease: Option<Duration>,
}

#[derive(Debug, Clone)]
pub struct ReservationPolicy {
    /// Lease applied by [`ReservationService::reserve_default`] to automated
    /// holders (names starting with `sup/`). Operators get no lease.
    pub supervisor_lease: Duration,
}

impl Default for ReservationPolicy {
    fn default() -> Self {
        ReservationPolicy {
            supervisor_lease: Duration::from_secs(60),
        }
    }
}

#[derive(Default)]
struct Table {
    live: HashMap<String, Reservation>,
    ops: Vec<ReservationOp>,
}

impl Table {
    fn record(&mut self, resource: &str, holder: &str, kind: OpKind, at: SimTime, lease: Option<Duration>) {
        let seq = self.ops.len() as u64 + 1;
        self.ops.push(ReservationOp {
            seq,
            resource: resource.to_string(),
            holder: holder.to_string(),
            kind,
            at,
            lease,
        });
    }

    /// Drops the entry for `resource` if its lease has run out.
    fn expire(&mut self, resource: &str, now: SimTime) {
        if let Some(r) = self.live.get(resource) {
            if !r.is_live(now) {
                let r = self.live.remove(resource).unwrap();
                let at = r.expires_at().unwrap_or(now);
                self.record(resource, &r.holder, OpKind::Expire, at, None);
            }
        }
    }
}

pub struct ReservationService {
    clock: SimClock,
    policy: ReservationPolicy,
    table: Mutex<Table>,
}

impl ReservationService {
    pub fn new(clock: SimClock, policy: ReservationPolicy) -> Self {
        ReservationService {
            clock,
            policy,
            table: Mutex::new(Table::default()),
        }
    }

    pub fn reserve(&self, resource: &str, holder: &str, lease: Option<Duration>) -> Result<Reservation, ReservationError> {
        let now = self.clock.now();
        let mut t = self.table.lock();
        t.expire(resource, now);
        if let Some(existing) = t.live.get(resource) {
            if existing.holder != holder {
                return Err(ReservationError::AlreadyReserved {
                    resource: resource.to_string(),
                    holder: existing.holder.clone(),
                });
            }
        }
        let renew = t.live.contains_key(resource);
        let r = Reservation {
            resource: resource.to_string(),
            holder: holder.to_string(),
            acquired_at: now,
            lease,
        };
        t.live.insert(resource.to_string(), r.clone());
        t.record(
            resource,
            holder,
            if renew { OpKind::Renew } else { OpKind::Acquire },
            now,
            lease,
        );
        Ok(r)
    }

    /// Reserve with the policy's default lease for the holder kind.
    pub fn reserve_default(&self, resource: &str, holder: &str) -> Result<Reservation, ReservationError> {
        let lease = holder.starts_with("sup/").then_some(self.policy.supervisor_lease);
        self.reserve(resource, holder, lease)
    }

    pub fn release(&self, resource: &str, holder: &str) -> Result<(), ReservationError> {
        let now = self.clock.now();
        let mut t = self.table.lock();
        t.expire(resource, now);
        let current = t
            .live
            .get(resource)
            .ok_or_else(|| ReservationError::NotReserved(resource.to_string()))?;
        if current.holder != holder {
            return Err(ReservationError::NotHolder {
                resource: resource.to_string(),
                holder: current.holder.clone(),
                caller: holder.to_string(),
            });
        }
        t.live.remove(resource);
        t.record(resource, holder, OpKind::Release, now, None);
        Ok(())
    }

    pub fn holder_of(&self, resource: &str) -> Option<String> {
        let now = self.clock.now();
        let mut t = self.table.lock();
        t.expire(resource, now);
        t.live.get(resource).map(|r| r.holder.clone())
    }

    /// Commands on a reserved resource are allowed only for its holder;
    /// unreserved resources accept anyone.
    pub fn check_access(&self, resource: &str, caller: &str) -> Result<(), ReservationError> {
        match self.holder_of(resource) {
            Some(h) if h != caller => Err(ReservationError::NotHolder {
                resource: resource.to_string(),
                holder: h,
                caller: caller.to_string(),
            }),
            _ => Ok(()),
        }
    }

    pub fn live(&self) -> Vec<Reservation> {
        let now = self.clock.now();
        let mut t = self.table.lock();
        let keys: Vec<String> = t.live.keys().cloned().collect();
        for k in keys {
            t.expire(&k, now);
        }
        let mut v: Vec<Reservation> = t.live.values().cloned().collect();
        v.sort_by(|a, b| a.resource.cmp(&b.resource));
        v
    }

    pub fn ops(&self) -> Vec<ReservationOp> {
        self.table.lock().ops.clone()
    }
}

/// Replays an operation log and reports the first point where two live
/// reservations for one resource would overlap.
pub fn audit_exclusive(ops: &[ReservationOp]) -> Result<(), String> {
    let mut live: HashMap<&str, (&str, Option<SimTime>)> = HashMap::new();
    for op in ops {
        if let Some((_, Some(exp))) = live.get(op.resource.as_str()) {
            if *exp <= op.at {
                live.remove(op.resource.as_str());
            }
        }
        let expiry = op.lease.map(|l| op.at.add(l));
        match op.kind {
            OpKind::Acquire => {
                if let Some((h, _)) = live.get(op.resource.as_str()) {
                    return Err(format!(
                        "op {}: {} acquired {} while {} still held it",
                        op.seq, op.holder, op.resource, h
                    ));
                }
                live.insert(&op.resource, (&op.holder, expiry));
            }
            OpKind::Renew => match live.get(op.resource.as_str()) {
                Some((h, _)) if *h == op.holder => {
                    live.insert(&op.resource, (&op.holder, expiry));
                }
                _ => return Err(format!("op {}: renew by non-holder {}", op.seq, op.holder)),
            },
            OpKind::Release => match live.remove(op.resource.as_str()) {
                Some((h, _)) if h == op.holder => {}
                _ => return Err(format!("op {}: release by non-holder {}", op.seq, op.holder)),
            },
            OpKind::Expire => {
                live.remove(op.resource.as_str());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn svc() -> (SimClock, ReservationService) {
        let c = SimClock::new_virtual();
        (c.clone(), ReservationService::new(c, ReservationPolicy::default()))
    }

    #[test]
    fn mutual_exclusion() {
        let (_, s) = svc();
        s.reserve("motor/x", "A", None).unwrap();
        let err = s.reserve("motor/x", "B", None).unwrap_err();
        assert_eq!(
            err,
            ReservationError::AlreadyReserved {
                resource: "motor/x".into(),
                holder: "A".into()
            }
        );
    }

    #[test]
    fn lease_expiry() {
        let (clock, s) = svc();
        s.reserve("motor/x", "A", Some(Duration::from_millis(100))).unwrap();
        clock.advance(Duration::from_millis(150));
        s.reserve("motor/x", "B", None).unwrap();
        assert_eq!(s.holder_of("motor/x").as_deref(), Some("B"));
        audit_exclusive(&s.ops()).unwrap();
    }

    #[test]
    fn independent_resources() {
        let (_, s) = svc();
        s.reserve("x", "A", None).unwrap();
        s.reserve("y", "A", None).unwrap();
        s.release("x", "A").unwrap();
        assert_eq!(s.holder_of("x"), None);
        assert_eq!(s.holder_of("y").as_deref(), Some("A"));
    }

    #[test]
    fn release_rules() {
        let (_, s) = svc();
        s.reserve("x", "A", None).unwrap();
        assert!(matches!(s.release("x", "B"), Err(ReservationError::NotHolder { .. })));
        assert_eq!(s.holder_of("x").as_deref(), Some("A"));
        s.release("x", "A").unwrap();
        assert_eq!(s.holder_of("x"), None);
        assert!(matches!(s.release("x", "A"), Err(ReservationError::NotReserved(_))));
    }

    #[test]
    fn default_leases() {
        let (clock, s) = svc();
        let sup = s.reserve_default("m1", "sup/beam_control").unwrap();
        assert_eq!(sup.lease, Some(Duration::from_secs(60)));
        let op = s.reserve_default("m2", "op:alice").unwrap();
        assert_eq!(op.lease, None);
        clock.advance(Duration::from_secs(61));
        assert_eq!(s.holder_of("m1"), None);
        assert_eq!(s.holder_of("m2").as_deref(), Some("op:alice"));
    }

    #[test]
    fn access_check() {
        let (_, s) = svc();
        s.check_access("free", "anyone").unwrap();
        s.reserve("held", "A", None).unwrap();
        s.check_access("held", "A").unwrap();
        assert!(s.check_access("held", "B").is_err());
    }

    #[test]
    fn audit_catches_overlap() {
        let op = |seq, holder: &str, kind| ReservationOp {
            seq,
            resource: "r".into(),
            holder: holder.into(),
            kind,
            at: SimTime(seq),
            lease: None,
        };
        let bad = vec![op(1, "A", OpKind::Acquire), op(2, "B", OpKind::Acquire)];
        assert!(audit_exclusive(&bad).is_err());
        let good = vec![
            op(1, "A", OpKind::Acquire),
            op(2, "A", OpKind::Release),
            op(3, "B", OpKind::Acquire),
        ];
        audit_exclusive(&good).unwrap();
    }
}
