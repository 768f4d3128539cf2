//! Shot plans and their text form.
//!
//! ```text
//! shot shot-0001
//! participant sup/power_conditioning
//! mark T-60 setup
//! mark T-0 fire
//! goal beam01 1000
//! trigger beam01/t000 1000 500
//! trigger_grid 8 200 1000 500
//! permissive shot/fire
//! tick 100ms
//! ack_deadline 2s
//! ```

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::parse_duration;
use crate::supervisors::MarkAction;
use crate::timing::TriggerRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mark {
    pub t_minus: Duration,
    pub action: MarkAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotPlan {
    pub shot_id: String,
    pub participants: Vec<String>,
    pub marks: Vec<Mark>,
    pub goals: BTreeMap<String, f64>,
    pub triggers: Vec<TriggerRequest>,
    pub permissives: Vec<String>,
    pub tick: Duration,
    pub ack_deadline: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct PlanParseError {
    pub line: usize,
    pub message: String,
}

pub const DEFAULT_MARKS: [(u64, MarkAction); 5] = [
    (60, MarkAction::Setup),
    (30, MarkAction::Arm),
    (20, MarkAction::Charge),
    (5, MarkAction::FinalCheck),
    (0, MarkAction::Fire),
];

impl ShotPlan {
    pub fn new(shot_id: &str) -> Self {
        ShotPlan {
            shot_id: shot_id.to_string(),
            participants: Vec::new(),
            marks: DEFAULT_MARKS
                .iter()
                .map(|&(s, action)| Mark {
                    t_minus: Duration::from_secs(s),
                    action,
                })
                .collect(),
            goals: BTreeMap::new(),
            triggers: Vec::new(),
            permissives: Vec::new(),
            tick: Duration::from_millis(100),
            ack_deadline: Duration::from_secs(2),
        }
    }

    /// Same plan with every mark time multiplied by `k`.
    pub fn compressed(mut self, num: u32, den: u32) -> Self {
        for m in &mut self.marks {
            m.t_minus = m.t_minus * num / den;
        }
        self
    }

    pub fn countdown_length(&self) -> Duration {
        self.marks.first().map_or(Duration::ZERO, |m| m.t_minus)
    }

    pub fn render(&self) -> String {
        let mut out = format!("shot {}\n", self.shot_id);
        for p in &self.participants {
            out += &format!("participant {p}\n");
        }
        for m in &self.marks {
            out += &format!("mark T-{}ms {}\n", m.t_minus.as_millis(), m.action.as_str());
        }
        for (b, e) in &self.goals {
            out += &format!("goal {b} {e}\n");
        }
        for p in &self.permissives {
            out += &format!("permissive {p}\n");
        }
        for t in &self.triggers {
            out += &format!("trigger {} {} {}\n", t.channel_id, t.offset_ps, t.width_ps);
        }
        out += &format!("tick {}ms\nack_deadline {}ms\n", self.tick.as_millis(), self.ack_deadline.as_millis());
        out
    }
}

pub fn trigger_grid(beams: usize, per_beam: usize, step_ps: i64, width_ps: i64) -> Vec<TriggerRequest> {
    let mut v = Vec::with_capacity(beams * per_beam);
    for b in 1..=beams {
        for i in 0..per_beam {
            v.push(TriggerRequest::new(
                format!("beam{b:02}/t{i:03}"),
                step_ps * (i as i64) + b as i64,
                width_ps,
            ));
        }
    }
    v
}

/// `T-60`, `T-1.5`, `T-500ms` or a bare duration.
pub fn parse_t_minus(s: &str) -> Option<Duration> {
    parse_duration(s.strip_prefix("T-").unwrap_or(s))
}

pub fn parse_plan(text: &str) -> Result<ShotPlan, PlanParseError> {
    let mut plan = ShotPlan::new("");
    let mut marks = Vec::new();
    let mut saw_shot = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: &str| PlanParseError {
            line: i + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<i64>().map_err(|_| err(&format!("bad integer {s:?}")));
        let count = |s: &str| s.parse::<usize>().map_err(|_| err(&format!("bad count {s:?}")));
        match (f[0], f.len()) {
            ("shot", 2) => {
                plan.shot_id = f[1].to_string();
                saw_shot = true;
            }
            ("participant", 2) => plan.participants.push(f[1].to_string()),
            ("mark", 3) => {
                let t = parse_t_minus(f[1]).ok_or_else(|| err(&format!("bad mark time {:?}", f[1])))?;
                let action = MarkAction::parse(f[2]).ok_or_else(|| err(&format!("unknown action {:?}", f[2])))?;
                marks.push(Mark { t_minus: t, action });
            }
            ("goal", 3) => {
                let e: f64 = f[2].parse().map_err(|_| err("bad energy"))?;
                plan.goals.insert(f[1].to_string(), e);
            }
            ("trigger", 4) => plan.triggers.push(TriggerRequest::new(f[1], num(f[2])?, num(f[3])?)),
            ("trigger_grid", 5) => {
                plan.triggers
                    .extend(trigger_grid(count(f[1])?, count(f[2])?, num(f[3])?, num(f[4])?));
            }
            ("permissive", 2) => plan.permissives.push(f[1].to_string()),
            ("tick", 2) => plan.tick = parse_duration(f[1]).filter(|d| !d.is_zero()).ok_or_else(|| err("bad tick"))?,
            ("ack_deadline", 2) => {
                plan.ack_deadline = parse_duration(f[1]).filter(|d| !d.is_zero()).ok_or_else(|| err("bad deadline"))?
            }
            (verb, _) => return Err(err(&format!("unrecognized or malformed {verb:?} line"))),
        }
    }
    if !saw_shot {
        return Err(PlanParseError {
            line: 0,
            message: "missing shot line".into(),
        });
    }
    if !marks.is_empty() {
        plan.marks = marks;
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "shot s1\nparticipant sup/a\nmark T-10 setup\nmark T-0 fire\ngoal beam01 500\ntrigger c1 10 5\npermissive shot/fire\ntick 50ms\n";
        let p = parse_plan(text).unwrap();
        assert_eq!(p.marks.len(), 2);
        assert_eq!(p.marks[0].t_minus, Duration::from_secs(10));
        assert_eq!(p.tick, Duration::from_millis(50));
        assert_eq!(parse_plan(&p.render()).unwrap(), p);
    }

    #[test]
    fn default_marks() {
        let p = parse_plan("shot s\n").unwrap();
        let secs: Vec<u64> = p.marks.iter().map(|m| m.t_minus.as_secs()).collect();
        assert_eq!(secs, [60, 30, 20, 5, 0]);
        assert_eq!(p.ack_deadline, Duration::from_secs(2));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_plan("shot s\n\nmark T-x setup\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert_eq!(parse_plan("frobnicate\n").unwrap_err().line, 1);
        assert_eq!(parse_plan("# nothing\n").unwrap_err().line, 0);
    }

    #[test]
    fn grid_has_unique_channels() {
        let g = trigger_grid(8, 200, 1000, 500);
        assert_eq!(g.len(), 1600);
        let ids: std::collections::BTreeSet<_> = g.iter().map(|t| &t.channel_id).collect();
        assert_eq!(ids.len(), 1600);
    }

    #[test]
    fn t_minus_forms() {
        assert_eq!(parse_t_minus("T-1.5"), Some(Duration::from_millis(1500)));
        assert_eq!(parse_t_minus("T-500ms"), Some(Duration::from_millis(500)));
        assert_eq!(parse_t_minus("T--1"), None);
    }
}
