//! Countdown audits over the event log, plus the post-abort safety check.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::DIRECTOR;
use crate::bus::Bus;
use crate::fep::{fep_target, FepRequest};
use crate::services::EventRecord;
use crate::supervisors::{ChargeState, SupRequest};
use crate::wire;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl AuditFinding {
    fn new(name: &str, problems: Vec<String>) -> Self {
        AuditFinding {
            name: name.to_string(),
            passed: problems.is_empty(),
            detail: problems.join("; "),
        }
    }
}

#[derive(Debug)]
enum Line {
    Load {
        participants: Vec<String>,
        tick_ms: u64,
        marks: Vec<(String, u64)>,
    },
    Tick { t: u64, phase: String },
    Mark { t: u64, action: String },
    Ack { t: u64, action: String, participant: String },
    Fire,
    Abort,
    Other,
}

fn parse(payload: &str, shot_id: &str) -> Option<Line> {
    let f: Vec<&str> = payload.split_whitespace().collect();
    if f.len() < 2 || f[1] != shot_id {
        return None;
    }
    let num = |i: usize| f.get(i).and_then(|s| s.parse::<u64>().ok());
    let kv = |key: &str| {
        f.iter()
            .find_map(|s| s.strip_prefix(key).and_then(|s| s.strip_prefix('=')))
            .unwrap_or("")
    };
    Some(match f[0] {
        "load" => Line::Load {
            participants: kv("participants").split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
            tick_ms: kv("tick").trim_end_matches("ms").parse().ok()?,
            marks: kv("marks")
                .split(',')
                .filter_map(|m| {
                    let (a, t) = m.split_once('@')?;
                    Some((a.to_string(), t.parse().ok()?))
                })
                .collect(),
        },
        "tick" => Line::Tick {
            t: num(2)?,
            phase: f.get(3)?.to_string(),
        },
        "mark" => Line::Mark {
            t: num(2)?,
            action: f.get(3)?.to_string(),
        },
        "ack" => Line::Ack {
            t: num(2)?,
            action: f.get(3)?.to_string(),
            participant: f.get(4)?.to_string(),
        },
        "fire" => Line::Fire,
        "abort" => Line::Abort,
        _ => Line::Other,
    })
}

/// Checks the director's record of the most recent countdown for
/// `shot_id`: at most one fire, a monotone countdown clock, every mark
/// acknowledged by every participant before the countdown moves on, and no
/// tick after an abort.
pub fn audit_countdown(records: &[EventRecord], shot_id: &str) -> Vec<AuditFinding> {
    let mine: Vec<(&EventRecord, Line)> = records
        .iter()
        .filter(|r| r.source == DIRECTOR)
        .filter_map(|r| parse(&r.payload, shot_id).map(|l| (r, l)))
        .collect();
    let start = mine.iter().rposition(|(_, l)| matches!(l, Line::Load { .. }));
    let Some(start) = start else {
        let missing = vec![format!("no load record for {shot_id}")];
        return ["fire_once", "clock_monotonic", "mark_barrier", "no_tick_after_abort"]
            .iter()
            .map(|n| AuditFinding::new(n, missing.clone()))
            .collect();
    };
    let mine = &mine[start..];
    let Line::Load {
        participants,
        tick_ms,
        marks: planned,
    } = &mine[0].1
    else {
        unreachable!()
    };
    let abort_at = mine.iter().position(|(_, l)| matches!(l, Line::Abort));
    let fires: Vec<usize> = mine
        .iter()
        .enumerate()
        .filter(|(_, (_, l))| matches!(l, Line::Fire))
        .map(|(i, _)| i)
        .collect();

    let mut fire_once = Vec::new();
    if fires.len() > 1 {
        fire_once.push(format!("{} fire records", fires.len()));
    }
    if let (Some(a), Some(&f)) = (abort_at, fires.first()) {
        fire_once.push(format!("fire at record {f} and abort at record {a}"));
    }

    let mut clock = Vec::new();
    let mut prev: Option<(&EventRecord, u64, &str)> = None;
    for (r, l) in mine {
        let Line::Tick { t, phase } = l else { continue };
        if let Some((pr, pt, pp)) = prev {
            if r.time <= pr.time {
                clock.push(format!("tick at T-{t}ms did not advance time"));
            }
            let want = if pp == "counting" { pt.saturating_sub(*tick_ms) } else { pt };
            if *t != want {
                clock.push(format!("T-{pt}ms ({pp}) followed by T-{t}ms"));
            }
        }
        prev = Some((r, *t, phase));
    }

    let mut barrier = Vec::new();
    let need: BTreeSet<&str> = participants.iter().map(String::as_str).collect();
    let mut seen_marks = Vec::new();
    for (i, (_, l)) in mine.iter().enumerate() {
        let Line::Mark { t, action } = l else { continue };
        seen_marks.push(action.as_str());
        // The window a mark's acks must land in: up to the first tick below
        // the mark's time or the fire record.
        let end = mine[i + 1..]
            .iter()
            .position(|(_, l)| match l {
                Line::Tick { t: tt, .. } => tt < t,
                Line::Fire => true,
                _ => false,
            })
            .map_or(mine.len(), |p| i + 1 + p);
        let got: BTreeSet<&str> = mine[i + 1..end]
            .iter()
            .filter_map(|(_, l)| match l {
                Line::Ack { t: at, action: aa, participant } if at == t && aa == action => Some(participant.as_str()),
                _ => None,
            })
            .collect();
        if got != need && !abort_at.is_some_and(|a| a > i && a < end) {
            let missing: Vec<&&str> = need.difference(&got).collect();
            barrier.push(format!("{action} at T-{t}ms missing acks from {missing:?} without abort"));
        }
    }
    if let Some(&f) = fires.first() {
        let planned: Vec<&str> = planned.iter().map(|(a, _)| a.as_str()).collect();
        let before: Vec<&str> = mine[..f]
            .iter()
            .filter_map(|(_, l)| match l {
                Line::Mark { action, .. } => Some(action.as_str()),
                _ => None,
            })
            .collect();
        if before != planned {
            barrier.push(format!("fired after marks {before:?}, planned {planned:?}"));
        }
    }

    let mut after_abort = Vec::new();
    if let Some(a) = abort_at {
        let n = mine[a..].iter().filter(|(_, l)| matches!(l, Line::Tick { .. })).count();
        if n > 0 {
            after_abort.push(format!("{n} ticks after abort"));
        }
        if mine[a..].iter().any(|(_, l)| matches!(l, Line::Mark { .. })) {
            barrier.push("mark after abort".into());
        }
    }

    vec![
        AuditFinding::new("fire_once", fire_once),
        AuditFinding::new("clock_monotonic", clock),
        AuditFinding::new("mark_barrier", barrier),
        AuditFinding::new("no_tick_after_abort", after_abort),
    ]
}

/// After an abort: no FEP still armed for `shot_id` and no charge module
/// still live. Participants without charge state are skipped.
pub fn abort_safety(bus: &Bus, shot_id: &str, feps: &[String], participants: &[String], deadline: Duration) -> AuditFinding {
    let mut problems = Vec::new();
    for f in feps {
        match wire::call::<_, Vec<(String, String)>>(bus, &fep_target(f), &FepRequest::Armed, deadline) {
            Ok(armed) => {
                for (p, s) in armed {
                    if s == shot_id {
                        problems.push(format!("{p} still armed"));
                    }
                }
            }
            Err(e) => problems.push(format!("{f} unreachable: {e}")),
        }
    }
    for p in participants {
        match wire::call::<_, Vec<ChargeState>>(bus, p, &SupRequest::ChargeStates, deadline) {
            Ok(states) => {
                for s in states.iter().filter(|s| s.stage.is_live()) {
                    problems.push(format!("{} {:?}", s.module_id, s.stage));
                }
            }
            Err(e) if e.remote_kind() == Some("Unsupported") => {}
            Err(e) => problems.push(format!("{p} unreachable: {e}")),
        }
    }
    AuditFinding::new("abort_safety", problems)
}
