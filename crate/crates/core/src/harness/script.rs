//! Scenario scripts: one operator step per line.
//!
//! ```text
//! policy stop
//! align all
//! load_plan ../plans/short.plan shot=s-1
//! hold T-4 2s weather
//! abort_at T-2 operator
//! countdown
//! expect outcome aborted
//! expect audits pass
//! expect abort_safety pass
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::launch::{Facility, HarnessError};
use super::metrics;
use crate::clock::parse_duration;
use crate::director::audit::{abort_safety, audit_countdown, AuditFinding};
use crate::director::plan::{parse_plan, parse_t_minus};
use crate::director::{Control, ControlKind, ShotOutcome, ShotPhase};
use crate::services::Severity;
use crate::supervisors::Driver;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ScriptParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error(transparent)]
    Parse(#[from] ScriptParseError),
    #[error("line {line} ({verb}) failed: {message}")]
    StepFailed { line: usize, verb: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Stop,
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    Outcome { aborted: bool },
    AuditsPass,
    AbortSafety,
    Recovery { complete: bool },
    Phase(ShotPhase),
    Ready(bool),
    BudgetsPass,
    Aligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// `None` aligns every beam with an alignment loop.
    Align(Option<String>),
    LoadPlan { path: String, shot: Option<String> },
    Countdown,
    Hold { at: Duration, duration: Option<Duration>, reason: String },
    Resume,
    Abort { reason: String },
    AbortAt { at: Duration, reason: String },
    InjectFault { point: String, reason: String },
    ClearFault { point: String },
    KillFep(String),
    RestartFep(String),
    RaiseAlert { severity: Severity, text: String },
    Jog { motor: String, delta: i64 },
    WatchVideo { camera: String, duration: Duration },
    Advance(Duration),
    SetField { input: String, value: bool },
    Expect(Expectation),
    Policy(Policy),
}

impl Step {
    pub fn verb(&self) -> &'static str {
        match self {
            Step::Align(_) => "align",
            Step::LoadPlan { .. } => "load_plan",
            Step::Countdown => "countdown",
            Step::Hold { .. } => "hold",
            Step::Resume => "resume",
            Step::Abort { .. } => "abort",
            Step::AbortAt { .. } => "abort_at",
            Step::InjectFault { .. } => "inject_fault",
            Step::ClearFault { .. } => "clear_fault",
            Step::KillFep(_) => "kill_fep",
            Step::RestartFep(_) => "restart_fep",
            Step::RaiseAlert { .. } => "raise_alert",
            Step::Jog { .. } => "jog",
            Step::WatchVideo { .. } => "watch_video",
            Step::Advance(_) => "advance",
            Step::SetField { .. } => "set_field",
            Step::Expect(_) => "expect",
            Step::Policy(_) => "policy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub steps: Vec<(usize, Step)>,
    /// Directory relative plan paths resolve against.
    pub base: Option<PathBuf>,
}

fn rest(f: &[&str], from: usize, default: &str) -> String {
    if f.len() > from {
        f[from..].join(" ")
    } else {
        default.to_string()
    }
}

pub fn parse_script(text: &str) -> Result<Script, ScriptParseError> {
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| ScriptParseError { line: i + 1, message: m };
        let f: Vec<&str> = line.split_whitespace().collect();
        let dur = |s: &str| parse_duration(s).ok_or_else(|| err(format!("bad duration {s:?}")));
        let tm = |s: &str| parse_t_minus(s).ok_or_else(|| err(format!("bad countdown time {s:?}")));
        let need = |n: usize| {
            if f.len() < n {
                Err(err(format!("{} needs {} argument(s)", f[0], n - 1)))
            } else {
                Ok(())
            }
        };
        let step = match f[0] {
            "align" => {
                need(2)?;
                Step::Align((f[1] != "all").then(|| f[1].to_string()))
            }
            "load_plan" => {
                need(2)?;
                let shot = match f.get(2) {
                    Some(s) => Some(
                        s.strip_prefix("shot=")
                            .ok_or_else(|| err(format!("expected shot=<id>, got {s:?}")))?
                            .to_string(),
                    ),
                    None => None,
                };
                Step::LoadPlan {
                    path: f[1].to_string(),
                    shot,
                }
            }
            "countdown" => Step::Countdown,
            "hold" => {
                need(2)?;
                let at = tm(f[1])?;
                let (duration, from) = match f.get(2) {
                    Some(&"indefinite") => (None, 3),
                    Some(s) => (Some(dur(s)?), 3),
                    None => (None, 2),
                };
                Step::Hold {
                    at,
                    duration,
                    reason: rest(&f, from, "scripted hold"),
                }
            }
            "resume" => Step::Resume,
            "abort" => Step::Abort {
                reason: rest(&f, 1, "scripted abort"),
            },
            "abort_at" => {
                need(2)?;
                Step::AbortAt {
                    at: tm(f[1])?,
                    reason: rest(&f, 2, "scripted abort"),
                }
            }
            "inject_fault" => {
                need(2)?;
                Step::InjectFault {
                    point: f[1].to_string(),
                    reason: rest(&f, 2, "injected"),
                }
            }
            "clear_fault" => {
                need(2)?;
                Step::ClearFault { point: f[1].to_string() }
            }
            "kill_fep" => {
                need(2)?;
                Step::KillFep(f[1].to_string())
            }
            "restart_fep" => {
                need(2)?;
                Step::RestartFep(f[1].to_string())
            }
            "raise_alert" => {
                need(3)?;
                Step::RaiseAlert {
                    severity: Severity::parse(f[1]).ok_or_else(|| err(format!("unknown severity {:?}", f[1])))?,
                    text: rest(&f, 2, ""),
                }
            }
            "jog" => {
                need(3)?;
                Step::Jog {
                    motor: f[1].to_string(),
                    delta: f[2].parse().map_err(|_| err(format!("bad step count {:?}", f[2])))?,
                }
            }
            "watch_video" => {
                need(3)?;
                Step::WatchVideo {
                    camera: f[1].to_string(),
                    duration: dur(f[2])?,
                }
            }
            "advance" => {
                need(2)?;
                Step::Advance(dur(f[1])?)
            }
            "set_field" => {
                need(3)?;
                Step::SetField {
                    input: f[1].to_string(),
                    value: f[2].parse().map_err(|_| err(format!("expected true or false, got {:?}", f[2])))?,
                }
            }
            "expect" => {
                need(2)?;
                let arg = f.get(2).copied().unwrap_or("");
                let e = match (f[1], arg) {
                    ("outcome", "completed") => Expectation::Outcome { aborted: false },
                    ("outcome", "aborted") => Expectation::Outcome { aborted: true },
                    ("audits", "pass") => Expectation::AuditsPass,
                    ("abort_safety", "pass") => Expectation::AbortSafety,
                    ("recovery", "complete") => Expectation::Recovery { complete: true },
                    ("recovery", "partial") => Expectation::Recovery { complete: false },
                    ("phase", p) => Expectation::Phase(ShotPhase::parse(p).ok_or_else(|| err(format!("unknown phase {p:?}")))?),
                    ("ready", "true") => Expectation::Ready(true),
                    ("ready", "false") => Expectation::Ready(false),
                    ("budgets", "pass") => Expectation::BudgetsPass,
                    ("aligned", "") => Expectation::Aligned,
                    (what, _) => return Err(err(format!("unknown expectation {what:?} {arg:?}"))),
                };
                Step::Expect(e)
            }
            "policy" => {
                need(2)?;
                Step::Policy(match f[1] {
                    "stop" => Policy::Stop,
                    "continue" => Policy::Continue,
                    p => return Err(err(format!("unknown policy {p:?}"))),
                })
            }
            verb => return Err(err(format!("unknown verb {verb:?}"))),
        };
        steps.push((i + 1, step));
    }
    Ok(Script { steps, base: None })
}

pub fn load_script(path: impl AsRef<Path>) -> Result<Script, ScriptError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ScriptParseError {
        line: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut s = parse_script(&text)?;
    s.base = path.parent().map(Path::to_path_buf);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub line: usize,
    pub verb: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub steps: Vec<StepResult>,
    pub outcomes: Vec<ShotOutcome>,
    /// Audits of the most recent countdown.
    pub audits: Vec<AuditFinding>,
    /// `(beam, converged, corrections)` per alignment run.
    pub alignments: Vec<(String, bool, usize)>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.ok) && self.audits.iter().all(|a| a.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{:>4} {:<12} {} {}",
                s.line,
                s.verb,
                if s.ok { "ok  " } else { "FAIL" },
                s.detail
            );
        }
        for a in &self.audits {
            let _ = writeln!(
                out,
                "audit {} {}{}",
                a.name,
                if a.passed { "pass" } else { "fail" },
                if a.detail.is_empty() { String::new() } else { format!(" ({})", a.detail) }
            );
        }
        out
    }
}

struct Runner<'a> {
    fac: &'a Facility,
    base: Option<PathBuf>,
    report: ScenarioReport,
}

impl Runner<'_> {
    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        match &self.base {
            Some(b) if p.is_relative() && b.join(p).exists() => b.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn countdown(&mut self) -> Result<String, String> {
        let d = self.fac.director();
        let shot = d.plan().ok_or("no plan loaded")?.shot_id;
        let outcome = d.run_countdown().map_err(|e| e.to_string())?;
        let records = self.fac.services().events.records();
        self.report.audits = audit_countdown(&records, &shot);
        let detail = match &outcome {
            ShotOutcome::Completed { fired, recovery, .. } => {
                self.fac.metrics().record(metrics::RECOVERY_ELAPSED, recovery.elapsed);
                format!(
                    "completed fired={fired} recovered={}/{} verified={}",
                    recovery.recovered, recovery.expected, recovery.verified
                )
            }
            ShotOutcome::Aborted { t_minus_ms, reason, .. } => {
                self.report.audits.push(self.abort_safety(&shot));
                format!("aborted at T-{t_minus_ms}ms: {reason}")
            }
        };
        self.report.outcomes.push(outcome);
        Ok(detail)
    }

    fn abort_safety(&self, shot: &str) -> AuditFinding {
        let participants = self.fac.director().plan().map(|p| p.participants).unwrap_or_default();
        abort_safety(
            self.fac.bus(),
            shot,
            &self.fac.fep_ids(),
            &participants,
            self.fac.deadline(),
        )
    }

    fn expect(&mut self, e: &Expectation) -> Result<String, String> {
        let fac = self.fac;
        match e {
            Expectation::Outcome { aborted } => match self.report.outcomes.last() {
                Some(o) if o.is_aborted() == *aborted => Ok(if *aborted { "aborted" } else { "completed" }.to_string()),
                Some(o) => Err(format!("outcome was {o:?}")),
                None => Err("no countdown has run".into()),
            },
            Expectation::AuditsPass => {
                if self.report.audits.is_empty() {
                    return Err("no audits recorded".into());
                }
                let failed: Vec<String> = self
                    .report
                    .audits
                    .iter()
                    .filter(|a| !a.passed)
                    .map(|a| format!("{}: {}", a.name, a.detail))
                    .collect();
                if failed.is_empty() {
                    Ok(format!("{} audits pass", self.report.audits.len()))
                } else {
                    Err(failed.join("; "))
                }
            }
            Expectation::AbortSafety => {
                let shot = fac.director().plan().ok_or("no plan loaded")?.shot_id;
                let a = self.abort_safety(&shot);
                if a.passed {
                    Ok("safe".into())
                } else {
                    Err(a.detail)
                }
            }
            Expectation::Recovery { complete } => {
                let r = fac.director().recovery().ok_or("no recovery has run")?;
                let detail = format!("recovered {}/{} missing={}", r.recovered, r.expected, r.missing.len());
                if r.complete() == *complete {
                    Ok(detail)
                } else {
                    Err(detail)
                }
            }
            Expectation::Phase(p) => {
                let got = fac.director().phase();
                if got == *p {
                    Ok(p.as_str().into())
                } else {
                    Err(format!("phase is {}", got.as_str()))
                }
            }
            Expectation::Ready(want) => {
                let snap = fac.rollup().snapshot();
                if snap.ready == *want {
                    Ok(format!("ready={want}"))
                } else {
                    let not: Vec<&str> = snap.subsystems.iter().filter(|s| !s.ready).map(|s| s.name.as_str()).collect();
                    Err(format!("ready={} not ready: {}", snap.ready, not.join(",")))
                }
            }
            Expectation::BudgetsPass => {
                let r = fac.metrics_report().map_err(|e| e.to_string())?;
                let failed: Vec<String> = r
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| format!("{} observed {}us budget {}us", c.name, c.observed_us, c.budget_us))
                    .collect();
                if failed.is_empty() {
                    Ok(format!("{} checks pass", r.checks.len()))
                } else {
                    Err(failed.join("; "))
                }
            }
            Expectation::Aligned => match self.report.alignments.last() {
                Some((b, true, n)) => Ok(format!("{b} converged after {n} corrections")),
                Some((b, false, _)) => Err(format!("{b} did not converge")),
                None => Err("no alignment has run".into()),
            },
        }
    }

    fn step(&mut self, step: &Step) -> Result<String, String> {
        let fac = self.fac;
        let d = fac.director();
        let he = |e: HarnessError| e.to_string();
        match step {
            Step::Align(beam) => {
                let beams: Vec<String> = match beam {
                    Some(b) => vec![b.clone()],
                    None => fac.alignable_beams().into_iter().map(|(_, b)| b).collect(),
                };
                let mut bad = Vec::new();
                for b in &beams {
                    let t = fac.align(b).map_err(he)?;
                    self.report.alignments.push((b.clone(), t.converged, t.corrections()));
                    if !t.converged {
                        bad.push(b.clone());
                    }
                }
                if bad.is_empty() {
                    Ok(format!("{} beams converged", beams.len()))
                } else {
                    Err(format!("not converged: {}", bad.join(",")))
                }
            }
            Step::LoadPlan { path, shot } => {
                let p = self.resolve(path);
                let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
                let mut plan = parse_plan(&text).map_err(|e| format!("{}: {e}", p.display()))?;
                if let Some(s) = shot {
                    plan.shot_id = s.clone();
                }
                let id = plan.shot_id.clone();
                d.load_plan(plan).map_err(|e| e.to_string())?;
                Ok(format!("loaded {id}"))
            }
            Step::Countdown => self.countdown(),
            Step::Hold { at, duration, reason } => {
                d.schedule_control(Control {
                    at: *at,
                    kind: ControlKind::Hold {
                        reason: reason.clone(),
                        duration: *duration,
                    },
                });
                Ok(format!("hold scheduled at T-{}ms", at.as_millis()))
            }
            Step::Resume => d.resume().map(|_| "resumed".into()).map_err(|e| e.to_string()),
            Step::Abort { reason } => {
                let shot = d.plan().map(|p| p.shot_id);
                let actions = d.abort(reason).map_err(|e| e.to_string())?;
                if let Some(s) = shot {
                    self.report.audits = vec![self.abort_safety(&s)];
                }
                Ok(format!("aborted, {} safe actions", actions.len()))
            }
            Step::AbortAt { at, reason } => {
                d.schedule_control(Control {
                    at: *at,
                    kind: ControlKind::Abort { reason: reason.clone() },
                });
                Ok(format!("abort scheduled at T-{}ms", at.as_millis()))
            }
            Step::InjectFault { point, reason } => fac
                .inject_fault(point, reason)
                .map(|l| format!("visible after {}us", l.as_micros()))
                .map_err(he),
            Step::ClearFault { point } => fac.clear_fault(point).map(|_| "cleared".into()).map_err(he),
            Step::KillFep(id) => fac.kill_fep(id).map(|_| "killed".into()).map_err(he),
            Step::RestartFep(id) => fac
                .restart_fep(id)
                .map(|inc| format!("incarnation {inc}"))
                .map_err(he),
            Step::RaiseAlert { severity, text } => fac
                .services()
                .alerts
                .raise("operator/script", *severity, text)
                .map(|id| format!("alert {id}"))
                .ok_or_else(|| "alert shed".into()),
            Step::Jog { motor, delta } => fac
                .jog(motor, *delta, "operator/script")
                .map(|d| format!("round trip {}us", d.as_micros()))
                .map_err(he),
            Step::WatchVideo { camera, duration } => {
                let iv = fac.watch_video(camera, *duration).map_err(he)?;
                Ok(format!("{} frames", if iv.is_empty() { 0 } else { iv.len() + 1 }))
            }
            Step::Advance(dt) => {
                let step = Duration::from_millis(10);
                let mut left = *dt;
                while !left.is_zero() {
                    let s = left.min(step);
                    fac.driver().advance(s);
                    left -= s;
                }
                Ok(format!("advanced {}ms", dt.as_millis()))
            }
            Step::SetField { input, value } => fac.set_field(input, *value).map(|_| "set".into()).map_err(he),
            Step::Expect(e) => self.expect(e),
            Step::Policy(_) => Ok(String::new()),
        }
    }
}

/// Runs `script` against a launched facility. With the `stop` policy (the
/// default) the first failing step ends the run with `StepFailed`.
pub fn run_script(fac: &Facility, script: &Script) -> Result<ScenarioReport, ScriptError> {
    let mut r = Runner {
        fac,
        base: script.base.clone(),
        report: ScenarioReport::default(),
    };
    let mut policy = Policy::Stop;
    for (line, step) in &script.steps {
        if let Step::Policy(p) = step {
            policy = *p;
        }
        tracing::debug!(line, verb = step.verb(), "step");
        let res = r.step(step);
        let ok = res.is_ok();
        let detail = res.unwrap_or_else(|e| e);
        r.report.steps.push(StepResult {
            line: *line,
            verb: step.verb().to_string(),
            ok,
            detail: detail.clone(),
        });
        if !ok && policy == Policy::Stop {
            return Err(ScriptError::StepFailed {
                line: *line,
                verb: step.verb().to_string(),
                message: detail,
            });
        }
    }
    Ok(r.report)
}
