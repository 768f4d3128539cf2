//! Append-only event log with a running hash chain.
//!
//! On disk it is `events.log`, one record per line:
//! `seq \t ISO-8601 time \t source \t category \t payload`, with `\`, tab and
//! newline in the payload escaped. A torn final line (no trailing newline)
//! is truncated away on open.

use std::fs::OpenOptions;
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bus::TopicPattern;
use crate::clock::{SimClock, SimTime};
use crate::wire::ErrorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventCategory {
    OperatorAction,
    DeviceStatus,
    ShotPhase,
    Error,
}

impl EventCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            EventCategory::OperatorAction => "operator_action",
            EventCategory::DeviceStatus => "device_status",
            EventCategory::ShotPhase => "shot_phase",
            EventCategory::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "operator_action" => EventCategory::OperatorAction,
            "device_status" => EventCategory::DeviceStatus,
            "shot_phase" => EventCategory::ShotPhase,
            "error" => EventCategory::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub source: String,
    pub time: SimTime,
    pub category: EventCategory,
    pub payload: String,
}

/// Inclusive time range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: SimTime,
    pub end: SimTime,
}

impl TimeRange {
    pub fn all() -> Self {
        TimeRange {
            start: SimTime::ZERO,
            end: SimTime(u64::MAX),
        }
    }
    pub fn at(t: SimTime) -> Self {
        TimeRange { start: t, end: t }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum EventLogError {
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("invalid range: start {start} after end {end}")]
    InvalidRange { start: SimTime, end: SimTime },
    #[error("malformed source filter {0:?}")]
    MalformedFilter(String),
}

impl ErrorKind for EventLogError {
    fn kind(&self) -> &'static str {
        match self {
            EventLogError::StorageFailure(_) => "StorageFailure",
            EventLogError::InvalidRange { .. } => "InvalidRange",
            EventLogError::MalformedFilter(_) => "MalformedTopic",
        }
    }
}

pub type ChainHash = [u8; 32];

/// Hash chain link: `H(prev || seq_be || payload)`.
pub fn chain_step(prev: &ChainHash, seq: u64, payload: &str) -> ChainHash {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(seq.to_be_bytes());
    h.update(payload.as_bytes());
    h.finalize().into()
}

/// Recomputes the chain head over `records` from scratch.
pub fn recompute_chain(records: &[EventRecord]) -> ChainHash {
    records
        .iter()
        .fold([0u8; 32], |acc, r| chain_step(&acc, r.seq, &r.payload))
}

struct LogState {
    records: Vec<EventRecord>,
    chain: ChainHash,
    sink: Option<Box<dyn Write + Send>>,
}

pub struct EventLog {
    clock: SimClock,
    path: Option<PathBuf>,
    state: Mutex<LogState>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("path", &self.path).finish()
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl EventLog {
    pub fn in_memory(clock: SimClock) -> Self {
        EventLog {
            clock,
            path: None,
            state: Mutex::new(LogState {
                records: Vec::new(),
                chain: [0; 32],
                sink: None,
            }),
        }
    }

    /// Logs to an arbitrary writer (used to inject storage failures).
    pub fn with_sink(clock: SimClock, sink: Box<dyn Write + Send>) -> Self {
        let log = Self::in_memory(clock);
        log.state.lock().sink = Some(sink);
        log
    }

    /// Opens or creates `path`, recovering existing complete records.
    pub fn open(clock: SimClock, path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let len = file.metadata()?.len();
        let mut records = Vec::new();
        let mut complete_len = 0u64;
        {
            let mut reader = BufReader::new(&mut file);
            reader.seek(SeekFrom::Start(0))?;
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 || !line.ends_with('\n') {
                    break;
                }
                match parse_line(&clock, line.trim_end_matches('\n')) {
                    Some(r) if r.seq == records.len() as u64 + 1 => records.push(r),
                    _ => break,
                }
                complete_len += n as u64;
            }
        }
        if complete_len < len {
            file.set_len(complete_len)?;
        }
        let chain = recompute_chain(&records);
        Ok(EventLog {
            clock,
            path: Some(path),
            state: Mutex::new(LogState {
                records,
                chain,
                sink: Some(Box::new(file)),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn log(&self, source: &str, category: EventCategory, payload: &str) -> Result<u64, EventLogError> {
        let mut st = self.state.lock();
        let seq = st.records.len() as u64 + 1;
        let time = self.clock.now();
        let record = EventRecord {
            seq,
            source: source.to_string(),
            time,
            category,
            payload: payload.to_string(),
        };
        if let Some(sink) = st.sink.as_mut() {
            let line = format_line(&self.clock, &record);
            sink.write_all(line.as_bytes())
                .and_then(|_| sink.flush())
                .map_err(|e| EventLogError::StorageFailure(e.to_string()))?;
        }
        st.chain = chain_step(&st.chain, seq, &record.payload);
        st.records.push(record);
        Ok(seq)
    }

    /// Records matching every given predicate, ascending by seq.
    pub fn query(
        &self,
        range: TimeRange,
        source_filter: Option<&str>,
        category: Option<EventCategory>,
    ) -> Result<Vec<EventRecord>, EventLogError> {
        if range.start > range.end {
            return Err(EventLogError::InvalidRange {
                start: range.start,
                end: range.end,
            });
        }
        let pattern = source_filter
            .map(|f| TopicPattern::parse(f).ok_or_else(|| EventLogError::MalformedFilter(f.to_string())))
            .transpose()?;
        let st = self.state.lock();
        // Records are time-ordered, so the range bounds can be found by
        // binary search before filtering.
        let lo = st.records.partition_point(|r| r.time < range.start);
        let hi = st.records.partition_point(|r| r.time <= range.end);
        Ok(st.records[lo..hi.max(lo)]
            .iter()
            .filter(|r| pattern.as_ref().is_none_or(|p| p.matches(&r.source)))
            .filter(|r| category.is_none_or(|c| r.category == c))
            .cloned()
            .collect())
    }

    pub fn len(&self) -> usize {
        self.state.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.state.lock().records.clone()
    }

    pub fn chain_head(&self) -> ChainHash {
        self.state.lock().chain
    }

    /// Serialized form of every record, identical to the file contents.
    pub fn render(&self) -> String {
        let st = self.state.lock();
        st.records.iter().map(|r| format_line(&self.clock, r)).collect()
    }
}

fn format_line(clock: &SimClock, r: &EventRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\n",
        r.seq,
        clock.iso(r.time),
        escape(&r.source),
        r.category.as_str(),
        escape(&r.payload)
    )
}

fn parse_line(clock: &SimClock, line: &str) -> Option<EventRecord> {
    let mut f = line.splitn(5, '\t');
    let seq = f.next()?.parse().ok()?;
    let time = clock.parse_iso_saturating(f.next()?)?;
    let source = unescape(f.next()?);
    let category = EventCategory::parse(f.next()?)?;
    let payload = unescape(f.next()?);
    Some(EventRecord {
        seq,
        source,
        time,
        category,
        payload,
    })
}

/// Writer that always fails; for exercising the storage failure path.
pub struct FailingSink;

impl Write for FailingSink {
    fn write(&mut self, _: &[u8]) -> io::Result<usize> {
        Err(io::Error::other("disk full"))
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::time::Duration;

    #[test]
    fn sequential_seq() {
        let log = EventLog::in_memory(SimClock::new_virtual());
        let a = log.log("x", EventCategory::Error, "a").unwrap();
        let b = log.log("x", EventCategory::Error, "b").unwrap();
        assert_eq!(b, a + 1);
    }

    #[test]
    fn query_by_exact_time() {
        let clock = SimClock::new_virtual();
        let log = EventLog::in_memory(clock.clone());
        clock.advance(Duration::from_secs(3));
        log.log("fep/beam01/motor", EventCategory::DeviceStatus, "moved").unwrap();
        clock.advance(Duration::from_secs(1));
        log.log("fep/beam01/motor", EventCategory::DeviceStatus, "stopped").unwrap();
        let got = log.query(TimeRange::at(SimTime(3_000_000_000)), None, None).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].payload, "moved");
    }

    #[test]
    fn empty_and_invalid() {
        let log = EventLog::in_memory(SimClock::new_virtual());
        assert!(log.query(TimeRange::all(), None, None).unwrap().is_empty());
        let err = log
            .query(TimeRange { start: SimTime(2), end: SimTime(1) }, None, None)
            .unwrap_err();
        assert!(matches!(err, EventLogError::InvalidRange { .. }));
    }

    #[test]
    fn ten_thousand_dense() {
        let log = EventLog::in_memory(SimClock::new_virtual());
        for i in 0..10_000 {
            log.log("s", EventCategory::DeviceStatus, &i.to_string()).unwrap();
        }
        let all = log.query(TimeRange::all(), None, None).unwrap();
        assert_eq!(all.len(), 10_000);
        assert!(all.iter().enumerate().all(|(i, r)| r.seq == i as u64 + 1));
        assert_eq!(recompute_chain(&all), log.chain_head());
    }

    #[test]
    fn storage_failure_keeps_seq_dense() {
        let log = EventLog::with_sink(SimClock::new_virtual(), Box::new(FailingSink));
        assert!(matches!(
            log.log("s", EventCategory::Error, "x"),
            Err(EventLogError::StorageFailure(_))
        ));
        assert!(log.is_empty());
    }

    #[test]
    fn file_round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        let clock = SimClock::new_virtual();
        {
            let log = EventLog::open(clock.clone(), &path).unwrap();
            log.log("sup/a", EventCategory::ShotPhase, "tab\there\nnl").unwrap();
            clock.advance(Duration::from_millis(5));
            log.log("sup/b", EventCategory::OperatorAction, "two").unwrap();
            assert_eq!(std::fs::read_to_string(&path).unwrap(), log.render());
        }
        // simulate a crash mid-write
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"3\t2001-11-27T00:00:00").unwrap();
        drop(f);
        let log = EventLog::open(clock.clone(), &path).unwrap();
        let recs = log.records();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].payload, "tab\there\nnl");
        assert_eq!(log.log("sup/c", EventCategory::Error, "three").unwrap(), 3);
        let reopened = EventLog::open(clock, &path).unwrap();
        assert_eq!(reopened.len(), 3);
        assert_eq!(reopened.chain_head(), log.chain_head());
    }

    /// Linear-scan oracle with the same predicates.
    fn oracle(
        all: &[EventRecord],
        range: TimeRange,
        prefix: Option<&str>,
        cat: Option<EventCategory>,
    ) -> Vec<u64> {
        all.iter()
            .filter(|r| r.time >= range.start && r.time <= range.end)
            .filter(|r| match prefix {
                // pattern "fep/<x>/*" expressed as explicit segment checks
                Some(p) => {
                    let segs: Vec<&str> = r.source.split('/').collect();
                    segs.len() == 3 && segs[0] == "fep" && segs[1] == p
                }
                None => true,
            })
            .filter(|r| cat.is_none_or(|c| c == r.category))
            .map(|r| r.seq)
            .collect()
    }

    #[test]
    fn query_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clock = SimClock::new_virtual();
        let log = EventLog::in_memory(clock.clone());
        let cats = [
            EventCategory::OperatorAction,
            EventCategory::DeviceStatus,
            EventCategory::ShotPhase,
            EventCategory::Error,
        ];
        let sources = ["fep/beam01/motor", "fep/beam01/dig", "fep/beam02/motor", "sup/x", "fep/beam01"];
        for _ in 0..2000 {
            clock.advance(Duration::from_millis(rng.random_range(0..5)));
            let s = sources[rng.random_range(0..sources.len())];
            let c = cats[rng.random_range(0..4)];
            log.log(s, c, "p").unwrap();
        }
        let all = log.records();
        let end = clock.now().0;
        for _ in 0..200 {
            let a = rng.random_range(0..=end);
            let b = rng.random_range(a..=end);
            let range = TimeRange { start: SimTime(a), end: SimTime(b) };
            let beam = ["beam01", "beam02"][rng.random_range(0..2)];
            let use_src = rng.random_bool(0.5);
            let cat = rng.random_bool(0.5).then(|| cats[rng.random_range(0..4)]);
            let filter = format!("fep/{beam}/*");
            let got: Vec<u64> = log
                .query(range, use_src.then_some(filter.as_str()), cat)
                .unwrap()
                .iter()
                .map(|r| r.seq)
                .collect();
            assert_eq!(got, oracle(&all, range, use_src.then_some(beam), cat));
        }
    }
}
