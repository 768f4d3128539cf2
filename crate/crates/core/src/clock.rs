//! Simulation clock shared by every component of a facility.
//!
//! Two modes: a virtual clock that only moves when stepped (deterministic
//! tests and replay) and a wall-clock-slaved clock for latency runs.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};

/// Nanoseconds since the facility epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_duration(d: Duration) -> Self {
        SimTime(d.as_nanos() as u64)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn saturating_sub(self, other: SimTime) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(other.0))
    }

    pub fn add(self, d: Duration) -> SimTime {
        SimTime(self.0 + d.as_nanos() as u64)
    }

    /// Picoseconds since epoch, the unit used by the timing system.
    pub fn as_picos(self) -> i64 {
        (self.0 as i64).saturating_mul(1000)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}s", self.as_secs_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Wall,
}

struct ClockInner {
    mode: ClockMode,
    epoch: DateTime<Utc>,
    virtual_ns: AtomicU64,
    start: Instant,
}

/// Cheaply cloneable handle to one facility clock.
#[derive(Clone)]
pub struct SimClock {
    inner: Arc<ClockInner>,
}

impl fmt::Debug for SimClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimClock")
            .field("mode", &self.inner.mode)
            .field("now", &self.now())
            .finish()
    }
}

/// Fixed epoch for virtual runs so that logged timestamps replay bit-identically.
pub fn virtual_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2001, 11, 27, 0, 0, 0).unwrap()
}

impl SimClock {
    pub fn new_virtual() -> Self {
        Self::build(ClockMode::Virtual, virtual_epoch())
    }

    pub fn new_wall() -> Self {
        Self::build(ClockMode::Wall, Utc::now())
    }

    pub fn new(mode: ClockMode) -> Self {
        match mode {
            ClockMode::Virtual => Self::new_virtual(),
            ClockMode::Wall => Self::new_wall(),
        }
    }

    fn build(mode: ClockMode, epoch: DateTime<Utc>) -> Self {
        SimClock {
            inner: Arc::new(ClockInner {
                mode,
                epoch,
                virtual_ns: AtomicU64::new(0),
                start: Instant::now(),
            }),
        }
    }

    pub fn mode(&self) -> ClockMode {
        self.inner.mode
    }

    pub fn is_virtual(&self) -> bool {
        self.inner.mode == ClockMode::Virtual
    }

    pub fn now(&self) -> SimTime {
        match self.inner.mode {
            ClockMode::Virtual => SimTime(self.inner.virtual_ns.load(Ordering::Acquire)),
            ClockMode::Wall => SimTime(self.inner.start.elapsed().as_nanos() as u64),
        }
    }

    /// Steps a virtual clock. A wall clock ignores the call since real time
    /// already moves it.
    pub fn advance(&self, dt: Duration) -> SimTime {
        match self.inner.mode {
            ClockMode::Virtual => {
                let ns = dt.as_nanos() as u64;
                SimTime(self.inner.virtual_ns.fetch_add(ns, Ordering::AcqRel) + ns)
            }
            ClockMode::Wall => self.now(),
        }
    }

    pub fn to_utc(&self, t: SimTime) -> DateTime<Utc> {
        self.inner.epoch + chrono::Duration::nanoseconds(t.0 as i64)
    }

    /// ISO-8601 with nanosecond precision.
    pub fn iso(&self, t: SimTime) -> String {
        self.to_utc(t).to_rfc3339_opts(SecondsFormat::Nanos, true)
    }

    pub fn parse_iso(&self, s: &str) -> Option<SimTime> {
        let dt = DateTime::parse_from_rfc3339(s).ok()?.with_timezone(&Utc);
        let ns = (dt - self.inner.epoch).num_nanoseconds()?;
        (ns >= 0).then_some(SimTime(ns as u64))
    }

    /// Like [`SimClock::parse_iso`] but times before this clock's epoch map to
    /// zero. `None` only for unparseable text.
    pub fn parse_iso_saturating(&self, s: &str) -> Option<SimTime> {
        let dt = DateTime::parse_from_rfc3339(s).ok()?.with_timezone(&Utc);
        let ns = (dt - self.inner.epoch).num_nanoseconds().unwrap_or(i64::MIN);
        Some(SimTime(ns.max(0) as u64))
    }
}

/// Process-wide monotonic microseconds, used only for latency measurement.
/// Never written to deterministic logs.
pub fn wall_micros() -> u64 {
    static START: OnceLock<Instant> = OnceLock::new();
    START.get_or_init(Instant::now).elapsed().as_micros() as u64
}

/// Parses durations like `60s`, `2.5s`, `500ms`, `250us`, `1m`.
pub fn parse_duration(s: &str) -> Option<Duration> {
    let s = s.trim();
    let (num, unit) = match s.find(|c: char| c.is_ascii_alphabetic()) {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, "s"),
    };
    let value: f64 = num.parse().ok()?;
    if !value.is_finite() || value < 0.0 {
        return None;
    }
    let secs = match unit {
        "s" => value,
        "ms" => value / 1e3,
        "us" => value / 1e6,
        "ns" => value / 1e9,
        "m" | "min" => value * 60.0,
        "h" => value * 3600.0,
        _ => return None,
    };
    Some(Duration::from_nanos((secs * 1e9).round() as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_only_moves_when_stepped() {
        let c = SimClock::new_virtual();
        assert_eq!(c.now(), SimTime::ZERO);
        c.advance(Duration::from_millis(100));
        c.advance(Duration::from_millis(100));
        assert_eq!(c.now(), SimTime(200_000_000));
    }

    #[test]
    fn iso_round_trip() {
        let c = SimClock::new_virtual();
        let t = SimTime(1_234_567_890);
        let s = c.iso(t);
        assert_eq!(s, "2001-11-27T00:00:01.234567890Z");
        assert_eq!(c.parse_iso(&s), Some(t));
    }

    #[test]
    fn durations() {
        assert_eq!(parse_duration("60s"), Some(Duration::from_secs(60)));
        assert_eq!(parse_duration("500ms"), Some(Duration::from_millis(500)));
        assert_eq!(parse_duration("2.5s"), Some(Duration::from_millis(2500)));
        assert_eq!(parse_duration("1m"), Some(Duration::from_secs(60)));
        assert_eq!(parse_duration("x"), None);
        assert_eq!(parse_duration("-1s"), None);
    }
}
