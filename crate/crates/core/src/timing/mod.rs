//! Integer-picosecond trigger schedules around T-0.
//!
//! Everything here is exact integer arithmetic. Offsets are signed
//! picoseconds relative to T-0.

mod host;
mod jitter;
mod report;

pub use host::{TimingHost, TimingRequest, TIMING_TARGET};
pub use jitter::{execute, JitterModel};
pub use report::{
    accuracy_report, export_schedule, import_requests, render_report, AccuracyReport, ChannelError, FiredRecord, RmsPs,
};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::wire::ErrorKind;

pub const DEFAULT_WINDOW_PS: (i64, i64) = (-1_000_000_000_000, 1_000_000_000_000);
pub const DEFAULT_CAPACITY: usize = 1600;
pub const DEFAULT_BOUND_PS: u64 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriggerRequest {
    pub channel_id: String,
    pub offset_ps: i64,
    pub width_ps: i64,
}

impl TriggerRequest {
    pub fn new(channel_id: impl Into<String>, offset_ps: i64, width_ps: i64) -> Self {
        TriggerRequest {
            channel_id: channel_id.into(),
            offset_ps,
            width_ps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingLimits {
    pub window_ps: (i64, i64),
    pub capacity: usize,
}

impl Default for TimingLimits {
    fn default() -> Self {
        TimingLimits {
            window_ps: DEFAULT_WINDOW_PS,
            capacity: DEFAULT_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSchedule {
    pub shot_id: String,
    pub entries: Vec<TriggerRequest>,
    pub window_ps: (i64, i64),
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    DuplicateChannel { channel_id: String },
    OutOfWindow { channel_id: String, offset_ps: i64 },
    CapacityExceeded { count: usize, capacity: usize },
    NonPositiveWidth { channel_id: String, width_ps: i64 },
    Unsorted { index: usize },
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::DuplicateChannel { .. } => "DuplicateChannel",
            Violation::OutOfWindow { .. } => "OutOfWindow",
            Violation::CapacityExceeded { .. } => "CapacityExceeded",
            Violation::NonPositiveWidth { .. } => "NonPositiveWidth",
            Violation::Unsorted { .. } => "Unsorted",
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TimingError {
    #[error("schedule rejected: {0:?}")]
    Rejected(Vec<Violation>),
    #[error("cannot execute invalid schedule: {0:?}")]
    InvalidSchedule(Vec<Violation>),
    #[error("no fired records")]
    EmptyInput,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl ErrorKind for TimingError {
    fn kind(&self) -> &'static str {
        match self {
            TimingError::Rejected(v) => v.first().map_or("ScheduleInvalid", Violation::name),
            TimingError::InvalidSchedule(_) => "InvalidSchedule",
            TimingError::EmptyInput => "EmptyInput",
            TimingError::Parse { .. } => "ParseError",
        }
    }
}

fn order(a: &TriggerRequest, b: &TriggerRequest) -> std::cmp::Ordering {
    a.offset_ps.cmp(&b.offset_ps).then_with(|| a.channel_id.cmp(&b.channel_id))
}

/// Sorts `requests` by (offset, channel) and validates the result.
pub fn build_schedule(
    shot_id: &str,
    mut requests: Vec<TriggerRequest>,
    limits: TimingLimits,
) -> Result<TriggerSchedule, TimingError> {
    requests.sort_by(order);
    let schedule = TriggerSchedule {
        shot_id: shot_id.to_string(),
        entries: requests,
        window_ps: limits.window_ps,
        capacity: limits.capacity,
    };
    let violations = validate(&schedule);
    if violations.is_empty() {
        Ok(schedule)
    } else {
        Err(TimingError::Rejected(violations))
    }
}

/// Every violation in the schedule, in entry order; capacity first.
pub fn validate(schedule: &TriggerSchedule) -> Vec<Violation> {
    let mut out = Vec::new();
    if schedule.entries.len() > schedule.capacity {
        out.push(Violation::CapacityExceeded {
            count: schedule.entries.len(),
            capacity: schedule.capacity,
        });
    }
    let (lo, hi) = schedule.window_ps;
    let mut seen = HashSet::new();
    let mut dup_reported = HashSet::new();
    for (i, e) in schedule.entries.iter().enumerate() {
        if !seen.insert(e.channel_id.as_str()) && dup_reported.insert(e.channel_id.as_str()) {
            out.push(Violation::DuplicateChannel {
                channel_id: e.channel_id.clone(),
            });
        }
        if e.offset_ps < lo || e.offset_ps > hi {
            out.push(Violation::OutOfWindow {
                channel_id: e.channel_id.clone(),
                offset_ps: e.offset_ps,
            });
        }
        if e.width_ps <= 0 {
            out.push(Violation::NonPositiveWidth {
                channel_id: e.channel_id.clone(),
                width_ps: e.width_ps,
            });
        }
        if i > 0 && order(&schedule.entries[i - 1], e).is_gt() {
            out.push(Violation::Unsorted { index: i });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(c: &str, off: i64) -> TriggerRequest {
        TriggerRequest::new(c, off, 1000)
    }

    #[test]
    fn empty_is_valid() {
        let s = build_schedule("s", vec![], TimingLimits::default()).unwrap();
        assert!(s.entries.is_empty());
    }

    #[test]
    fn duplicate_channel() {
        let err = build_schedule("s", vec![req("a", 0), req("a", 5)], TimingLimits::default()).unwrap_err();
        assert_eq!(
            err,
            TimingError::Rejected(vec![Violation::DuplicateChannel { channel_id: "a".into() }])
        );
    }

    #[test]
    fn out_of_window() {
        let err = build_schedule("s", vec![req("a", 2_500_000_000_000)], TimingLimits::default()).unwrap_err();
        assert_eq!(err.kind(), "OutOfWindow");
        build_schedule("s", vec![req("lo", -1_000_000_000_000), req("hi", 1_000_000_000_000)], TimingLimits::default())
            .unwrap();
    }

    #[test]
    fn capacity_boundary() {
        let full: Vec<_> = (0..1600).map(|i| req(&format!("ch{i:04}"), i * 1000)).collect();
        let s = build_schedule("s", full.clone(), TimingLimits::default()).unwrap();
        assert!(validate(&s).is_empty());
        let mut over = full;
        over.push(req("ch1600", 0));
        let err = build_schedule("s", over, TimingLimits::default()).unwrap_err();
        assert_eq!(
            err,
            TimingError::Rejected(vec![Violation::CapacityExceeded {
                count: 1601,
                capacity: 1600
            }])
        );
    }

    #[test]
    fn build_sorts() {
        let s = build_schedule("s", vec![req("b", 10), req("a", -5), req("c", 10)], TimingLimits::default()).unwrap();
        let ids: Vec<_> = s.entries.iter().map(|e| e.channel_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(validate(&s).is_empty());
    }

    #[test]
    fn reports_every_violation() {
        let s = TriggerSchedule {
            shot_id: "s".into(),
            entries: vec![req("a", 5), TriggerRequest::new("a", 3, 0), req("z", i64::MAX)],
            window_ps: DEFAULT_WINDOW_PS,
            capacity: 2,
        };
        let names: Vec<_> = validate(&s).iter().map(Violation::name).collect();
        assert_eq!(
            names,
            ["CapacityExceeded", "DuplicateChannel", "NonPositiveWidth", "Unsorted", "OutOfWindow"]
        );
    }
}
