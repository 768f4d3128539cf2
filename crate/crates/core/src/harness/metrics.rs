//! Latency histograms and budget checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub const ALERT_DELIVERY: &str = "alert_delivery";
pub const STATUS_PROPAGATION: &str = "status_propagation";
pub const COMMAND_ROUND_TRIP: &str = "command_round_trip";
pub const VIDEO_FRAME_INTERVAL: &str = "video_frame_interval";
pub const RECOVERY_ELAPSED: &str = "recovery_elapsed";
pub const RESTART_ELAPSED: &str = "restart_elapsed";

pub const HISTOGRAMS: [&str; 6] = [
    ALERT_DELIVERY,
    STATUS_PROPAGATION,
    COMMAND_ROUND_TRIP,
    VIDEO_FRAME_INTERVAL,
    RECOVERY_ELAPSED,
    RESTART_ELAPSED,
];

/// Allowed relative deviation of the median frame interval from its target.
pub const VIDEO_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    samples_us: Vec<u64>,
}

impl Histogram {
    pub fn record(&mut self, d: Duration) {
        self.samples_us.push(d.as_micros() as u64);
    }

    pub fn len(&self) -> usize {
        self.samples_us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples_us.is_empty()
    }

    /// Nearest-rank percentile.
    pub fn percentile(&self, p: f64) -> Option<Duration> {
        if self.samples_us.is_empty() {
            return None;
        }
        let mut v = self.samples_us.clone();
        v.sort_unstable();
        let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
        Some(Duration::from_micros(v[rank.clamp(1, v.len()) - 1]))
    }

    pub fn median(&self) -> Option<Duration> {
        self.percentile(50.0)
    }

    pub fn max(&self) -> Option<Duration> {
        self.samples_us.iter().max().map(|&u| Duration::from_micros(u))
    }

    pub fn summary(&self) -> Option<HistogramSummary> {
        Some(HistogramSummary {
            count: self.len(),
            p50_us: self.percentile(50.0)?.as_micros() as u64,
            p99_us: self.percentile(99.0)?.as_micros() as u64,
            max_us: self.max()?.as_micros() as u64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub count: usize,
    pub p50_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub name: String,
    pub budget_us: u64,
    /// The statistic compared: p99, or the median for the frame interval.
    pub observed_us: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub histograms: BTreeMap<String, HistogramSummary>,
    pub checks: Vec<BudgetCheck>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no metrics recorded yet")]
    NoData,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl MetricsReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&BudgetCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// One line per histogram and per check.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (n, h) in &self.histograms {
            let _ = writeln!(
                out,
                "histogram {n} count={} p50_us={} p99_us={} max_us={}",
                h.count, h.p50_us, h.p99_us, h.max_us
            );
        }
        for c in &self.checks {
            let _ = writeln!(
                out,
                "check {} budget_us={} observed_us={} {}",
                c.name,
                c.budget_us,
                c.observed_us,
                if c.passed { "pass" } else { "fail" }
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<MetricsReport, MetricsError> {
        let mut r = MetricsReport {
            histograms: BTreeMap::new(),
            checks: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let err = |m: &str| MetricsError::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let kv = |k: &str| -> Result<u64, MetricsError> {
                f.iter()
                    .find_map(|s| s.strip_prefix(k).and_then(|s| s.strip_prefix('=')))
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(&format!("missing {k}")))
            };
            match (f[0], f.len()) {
                ("histogram", 6) => {
                    r.histograms.insert(
                        f[1].to_string(),
                        HistogramSummary {
                            count: kv("count")? as usize,
                            p50_us: kv("p50_us")?,
                            p99_us: kv("p99_us")?,
                            max_us: kv("max_us")?,
                        },
                    );
                }
                ("check", 5) => r.checks.push(BudgetCheck {
                    name: f[1].to_string(),
                    budget_us: kv("budget_us")?,
                    observed_us: kv("observed_us")?,
                    passed: match f[4] {
                        "pass" => true,
                        "fail" => false,
                        _ => return Err(err("expected pass or fail")),
                    },
                }),
                _ => return Err(err("unrecognized line")),
            }
        }
        if r.histograms.is_empty() {
            return Err(MetricsError::NoData);
        }
        Ok(r)
    }
}

/// Shared sample store.
#[derive(Default)]
pub struct Metrics {
    hist: Mutex<BTreeMap<String, Histogram>>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, name: &str, d: Duration) {
        self.hist.lock().entry(name.to_string()).or_default().record(d);
    }

    pub fn histogram(&self, name: &str) -> Histogram {
        self.hist.lock().get(name).cloned().unwrap_or_default()
    }

    pub fn clear(&self) {
        self.hist.lock().clear();
    }

    /// Summaries and budget checks. Budgets are p99 ceilings except the
    /// frame interval, whose median must sit within 20% of its target.
    pub fn report(&self, budgets: &BTreeMap<String, Duration>) -> Result<MetricsReport, MetricsError> {
        let hist = self.hist.lock();
        let histograms: BTreeMap<String, HistogramSummary> = hist
            .iter()
            .filter_map(|(n, h)| h.summary().map(|s| (n.clone(), s)))
            .collect();
        if histograms.is_empty() {
            return Err(MetricsError::NoData);
        }
        let mut checks = Vec::new();
        for (name, budget) in budgets {
            let Some(s) = histograms.get(name) else { continue };
            let b = budget.as_micros() as u64;
            let (observed, passed) = if name == VIDEO_FRAME_INTERVAL {
                let dev = (s.p50_us as f64 - b as f64).abs() / b as f64;
                (s.p50_us, dev <= VIDEO_TOLERANCE)
            } else {
                (s.p99_us, s.p99_us < b)
            };
            checks.push(BudgetCheck {
                name: name.clone(),
                budget_us: b,
                observed_us: observed,
                passed,
            });
        }
        Ok(MetricsReport { histograms, checks })
    }
}
