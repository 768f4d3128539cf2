use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{TimingError, TriggerRequest, TriggerSchedule};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FiredRecord {
    pub channel_id: String,
    pub scheduled_ps: i64,
    pub fired_ps: i64,
}

impl FiredRecord {
    pub fn error_ps(&self) -> i64 {
        self.fired_ps - self.scheduled_ps
    }
}

/// Root-mean-square error kept as the exact integer ratio `sqrt(sum_sq / n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RmsPs {
    pub sum_sq: u128,
    pub n: u64,
}

impl RmsPs {
    /// `round(sqrt(sum_sq * scale^2 / n))`, halves rounding up.
    pub fn scaled(&self, scale: u64) -> u128 {
        if self.n == 0 {
            return 0;
        }
        let s = self.sum_sq * (scale as u128) * (scale as u128);
        let n = self.n as u128;
        let mut k = (s / n).isqrt();
        // smallest k with (k + 1/2)^2 > s/n
        while (2 * k + 1) * (2 * k + 1) * n <= 4 * s {
            k += 1;
        }
        k
    }

    pub fn rounded_ps(&self) -> u128 {
        self.scaled(1)
    }

    /// Rendered with three decimals, e.g. `17.321`.
    pub fn display(&self) -> String {
        let m = self.scaled(1000);
        format!("{}.{:03}", m / 1000, m % 1000)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelError {
    pub channel_id: String,
    pub scheduled_ps: i64,
    pub fired_ps: i64,
    pub error_ps: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub max_error_ps: u64,
    pub rms_error_ps: RmsPs,
    pub per_channel: Vec<ChannelError>,
}

pub fn accuracy_report(records: &[FiredRecord]) -> Result<AccuracyReport, TimingError> {
    if records.is_empty() {
        return Err(TimingError::EmptyInput);
    }
    let mut max = 0u64;
    let mut sum_sq = 0u128;
    let mut per_channel = Vec::with_capacity(records.len());
    for r in records {
        let e = r.error_ps();
        max = max.max(e.unsigned_abs());
        sum_sq += (e.unsigned_abs() as u128).pow(2);
        per_channel.push(ChannelError {
            channel_id: r.channel_id.clone(),
            scheduled_ps: r.scheduled_ps,
            fired_ps: r.fired_ps,
            error_ps: e,
        });
    }
    Ok(AccuracyReport {
        max_error_ps: max,
        rms_error_ps: RmsPs {
            sum_sq,
            n: records.len() as u64,
        },
        per_channel,
    })
}

pub fn render_report(r: &AccuracyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "records {}", r.per_channel.len());
    let _ = writeln!(s, "max_error_ps {}", r.max_error_ps);
    let _ = writeln!(s, "rms_error_ps {}", r.rms_error_ps.display());
    let _ = writeln!(s, "# channel_id scheduled_ps fired_ps error_ps");
    for c in &r.per_channel {
        let _ = writeln!(s, "{} {} {} {}", c.channel_id, c.scheduled_ps, c.fired_ps, c.error_ps);
    }
    s
}

/// Lines of `channel_id offset_ps width_ps`. Blank lines and `#` comments
/// are skipped.
pub fn import_requests(text: &str) -> Result<Vec<TriggerRequest>, TimingError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| TimingError::Parse { line: i + 1, message };
        let f: Vec<&str> = line.split_whitespace().collect();
        let [ch, off, width] = f.as_slice() else {
            return Err(err(format!("expected 3 fields, found {}", f.len())));
        };
        let offset_ps = off.parse().map_err(|_| err(format!("bad offset_ps {off:?}")))?;
        let width_ps = width.parse().map_err(|_| err(format!("bad width_ps {width:?}")))?;
        out.push(TriggerRequest::new(*ch, offset_ps, width_ps));
    }
    Ok(out)
}

pub fn export_schedule(s: &TriggerSchedule) -> String {
    let mut out = format!("# shot {}\n", s.shot_id);
    for e in &s.entries {
        let _ = writeln!(out, "{} {} {}", e.channel_id, e.offset_ps, e.width_ps);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timing::{build_schedule, execute, JitterModel, TimingLimits};
    use proptest::prelude::*;

    fn rec(err: i64) -> FiredRecord {
        FiredRecord {
            channel_id: format!("c{err}"),
            scheduled_ps: 100,
            fired_ps: 100 + err,
        }
    }

    #[test]
    fn zeros() {
        let r = accuracy_report(&[rec(0), rec(0)]).unwrap();
        assert_eq!(r.max_error_ps, 0);
        assert_eq!(r.rms_error_ps.rounded_ps(), 0);
    }

    #[test]
    fn symmetric_thirty() {
        let r = accuracy_report(&[rec(30), rec(-30)]).unwrap();
        assert_eq!(r.max_error_ps, 30);
        assert_eq!(r.rms_error_ps.rounded_ps(), 30);
        assert_eq!(r.rms_error_ps.display(), "30.000");
    }

    #[test]
    fn rms_rounding() {
        // sqrt(300) = 17.3205...
        let r = RmsPs { sum_sq: 300, n: 1 };
        assert_eq!(r.rounded_ps(), 17);
        assert_eq!(r.display(), "17.321");
        // sqrt(2.25) = 1.5 rounds up
        assert_eq!(RmsPs { sum_sq: 9, n: 4 }.rounded_ps(), 2);
    }

    #[test]
    fn empty_input() {
        assert_eq!(accuracy_report(&[]), Err(TimingError::EmptyInput));
    }

    #[test]
    fn text_round_trip() {
        let text = "# comment\nb 10 5\n\na -3 7 # trailing\n";
        let reqs = import_requests(text).unwrap();
        let s = build_schedule("x", reqs, TimingLimits::default()).unwrap();
        let again = import_requests(&export_schedule(&s)).unwrap();
        assert_eq!(again, s.entries);
        assert!(matches!(
            import_requests("a 1\n"),
            Err(TimingError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            import_requests("ok 1 1\nbad x 1\n"),
            Err(TimingError::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn report_matches_recomputation(seed in any::<u64>(), n in 1i64..200) {
            let reqs = (0..n).map(|i| TriggerRequest::new(format!("c{i}"), i * 1000, 10)).collect();
            let s = build_schedule("p", reqs, TimingLimits::default()).unwrap();
            let recs = execute(&s, JitterModel::BoundedUniform { bound_ps: 30 }, seed).unwrap();
            let rep = accuracy_report(&recs).unwrap();
            let errs: Vec<f64> = recs.iter().map(|r| (r.fired_ps - r.scheduled_ps) as f64).collect();
            let max = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
            prop_assert_eq!(rep.max_error_ps as f64, max);
            prop_assert!((rep.rms_error_ps.scaled(1000) as f64 / 1000.0 - rms).abs() <= 0.0005 + 1e-9);
        }
    }
}
