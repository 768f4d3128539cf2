//! Alert management.
//!
//! Lifecycle: `raised -> acknowledged -> cleared` or `raised -> cleared`.
//! Every raise and transition is published on `alert/<severity>`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bus::Bus;
use crate::clock::{wall_micros, SimClock, SimTime};
use crate::wire::{self, ErrorKind};

pub type AlertId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Serious,
    Critical,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Serious => "serious",
            Severity::Critical => "critical",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "info" => Severity::Info,
            "warning" => Severity::Warning,
            "serious" => Severity::Serious,
            "critical" => Severity::Critical,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertState {
    Raised,
    Acknowledged,
    Cleared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertAction {
    Acknowledge,
    Clear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: AlertId,
    pub source: String,
    pub severity: Severity,
    pub state: AlertState,
    pub text: String,
    pub raised_at: SimTime,
    pub acknowledged_at: Option<SimTime>,
    pub cleared_at: Option<SimTime>,
    /// `(state entered, at, actor)` in order.
    pub history: Vec<(AlertState, SimTime, String)>,
}

/// Bus payload for `alert/<severity>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlertNotice {
    pub alert: Alert,
    /// Process-local wall microseconds at publication, for latency metrics.
    pub wall_us: u64,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum AlertError {
    #[error("unknown alert {0}")]
    UnknownAlert(AlertId),
    #[error("cannot {action:?} alert {id} in state {from:?}")]
    IllegalTransition {
        id: AlertId,
        from: AlertState,
        action: AlertAction,
    },
}

impl ErrorKind for AlertError {
    fn kind(&self) -> &'static str {
        match self {
            AlertError::UnknownAlert(_) => "UnknownAlert",
            AlertError::IllegalTransition { .. } => "IllegalTransition",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlertConfig {
    /// Active (not cleared) alerts retained before shedding starts.
    pub queue_depth: usize,
    /// Alerts strictly below this severity may be shed under overload.
    pub shed_below: Severity,
}

impl Default for AlertConfig {
    fn default() -> Self {
        AlertConfig {
            queue_depth: 10_000,
            shed_below: Severity::Warning,
        }
    }
}

pub struct AlertService {
    bus: Option<Bus>,
    clock: SimClock,
    config: AlertConfig,
    state: Mutex<Book>,
    shed: AtomicU64,
}

#[derive(Default)]
struct Book {
    alerts: BTreeMap<AlertId, Alert>,
    active: usize,
    next_id: AlertId,
}

pub const NO_TEXT: &str = "(no text)";

impl AlertService {
    pub fn new(clock: SimClock, bus: Option<Bus>, config: AlertConfig) -> Self {
        AlertService {
            bus,
            clock,
            config,
            state: Mutex::new(Book {
                next_id: 1,
                ..Book::default()
            }),
            shed: AtomicU64::new(0),
        }
    }

    /// Raises an alert. Never fails; returns `None` only when an alert below
    /// the shed threshold is dropped because the active queue is full.
    pub fn raise(&self, source: &str, severity: Severity, text: &str) -> Option<AlertId> {
        let now = self.clock.now();
        let alert = {
            let mut book = self.state.lock();
            if book.active >= self.config.queue_depth && severity < self.config.shed_below {
                self.shed.fetch_add(1, Ordering::Relaxed);
                return None;
            }
            let id = book.next_id;
            book.next_id += 1;
            let source = if source.is_empty() { "unknown" } else { source };
            let text = if text.trim().is_empty() { NO_TEXT } else { text };
            let alert = Alert {
                alert_id: id,
                source: source.to_string(),
                severity,
                state: AlertState::Raised,
                text: text.to_string(),
                raised_at: now,
                acknowledged_at: None,
                cleared_at: None,
                history: vec![(AlertState::Raised, now, source.to_string())],
            };
            book.alerts.insert(id, alert.clone());
            book.active += 1;
            alert
        };
        self.notify(&alert);
        Some(alert.alert_id)
    }

    pub fn transition(&self, id: AlertId, action: AlertAction, actor: &str) -> Result<AlertState, AlertError> {
        let now = self.clock.now();
        let alert = {
            let mut book = self.state.lock();
            let alert = book.alerts.get_mut(&id).ok_or(AlertError::UnknownAlert(id))?;
            let next = match (alert.state, action) {
                (AlertState::Raised, AlertAction::Acknowledge) => AlertState::Acknowledged,
                (AlertState::Raised | AlertState::Acknowledged, AlertAction::Clear) => AlertState::Cleared,
                (from, action) => return Err(AlertError::IllegalTransition { id, from, action }),
            };
            alert.state = next;
            match next {
                AlertState::Acknowledged => alert.acknowledged_at = Some(now),
                AlertState::Cleared => alert.cleared_at = Some(now),
                AlertState::Raised => {}
            }
            alert.history.push((next, now, actor.to_string()));
            let snapshot = alert.clone();
            if next == AlertState::Cleared {
                book.active -= 1;
            }
            snapshot
        };
        self.notify(&alert);
        Ok(alert.state)
    }

    fn notify(&self, alert: &Alert) {
        if let Some(bus) = &self.bus {
            let notice = AlertNotice {
                alert: alert.clone(),
                wall_us: wall_micros(),
            };
            let topic = format!("alert/{}", alert.severity.as_str());
            let _ = bus.publish(&topic, wire::to_bytes(&notice));
        }
    }

    pub fn get(&self, id: AlertId) -> Result<Alert, AlertError> {
        self.state
            .lock()
            .alerts
            .get(&id)
            .cloned()
            .ok_or(AlertError::UnknownAlert(id))
    }

    /// Alerts not yet cleared, ordered by (severity desc, raised_at asc).
    pub fn active(&self) -> Vec<Alert> {
        let mut v: Vec<Alert> = self
            .state
            .lock()
            .alerts
            .values()
            .filter(|a| a.state != AlertState::Cleared)
            .cloned()
            .collect();
        v.sort_by(|a, b| {
            b.severity
                .cmp(&a.severity)
                .then(a.raised_at.cmp(&b.raised_at))
                .then(a.alert_id.cmp(&b.alert_id))
        });
        v
    }

    pub fn all(&self) -> Vec<Alert> {
        self.state.lock().alerts.values().cloned().collect()
    }

    pub fn shed_count(&self) -> u64 {
        self.shed.load(Ordering::Relaxed)
    }
}

/// True if `history` is a path in the legal transition graph with
/// non-decreasing timestamps.
pub fn history_is_legal(history: &[(AlertState, SimTime, String)]) -> bool {
    let states: Vec<AlertState> = history.iter().map(|h| h.0).collect();
    let shape_ok = matches!(
        states.as_slice(),
        [AlertState::Raised]
            | [AlertState::Raised, AlertState::Acknowledged]
            | [AlertState::Raised, AlertState::Cleared]
            | [AlertState::Raised, AlertState::Acknowledged, AlertState::Cleared]
    );
    shape_ok && history.windows(2).all(|w| w[0].1 <= w[1].1)
}
