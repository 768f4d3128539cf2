//! Shot director: plan loading, the countdown, T-0 and shot-data recovery.
//!
//! Everything the director does is written to the event log under
//! `sup/shot_director`; the audits in [`audit`] work from that log alone.

pub mod audit;
pub mod plan;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use audit::{abort_safety, audit_countdown, AuditFinding};
pub use plan::{parse_plan, parse_t_minus, trigger_grid, Mark, PlanParseError, ShotPlan, DEFAULT_MARKS};

use crate::bus::{BusError, Endpoint, ServiceHandle};
use crate::clock::SimTime;
use crate::fep::{fep_target, point_seed, FepRequest, ShotDataRecord};
use crate::plc::{Permit, PlcRequest, PLC_TARGET};
use crate::services::{EventCategory, Severity};
use crate::supervisors::{lpom_setup, ArmedPoint, Ctx, LpomConfig, MarkAck, MarkAction, RollupSnapshot, SetpointBundle, SupRequest};
use crate::timing::{build_schedule, execute, FiredRecord, JitterModel, TimingLimits, TriggerSchedule};
use crate::wire::{self, err_reply, ok_reply, reply_from, ErrorKind};

pub const DIRECTOR: &str = "sup/shot_director";
pub const LPOM: &str = "sup/lpom";
pub const TICK_TOPIC: &str = "clock/tick";
pub const PHASE_TOPIC: &str = "shot/phase";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotPhase {
    Idle,
    Setup,
    Ready,
    Counting,
    Held,
    Fired,
    PostShot,
    Complete,
    Aborted,
}

impl ShotPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            ShotPhase::Idle => "idle",
            ShotPhase::Setup => "setup",
            ShotPhase::Ready => "ready",
            ShotPhase::Counting => "counting",
            ShotPhase::Held => "held",
            ShotPhase::Fired => "fired",
            ShotPhase::PostShot => "post_shot",
            ShotPhase::Complete => "complete",
            ShotPhase::Aborted => "aborted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ShotPhase::Idle,
            ShotPhase::Setup,
            ShotPhase::Ready,
            ShotPhase::Counting,
            ShotPhase::Held,
            ShotPhase::Fired,
            ShotPhase::PostShot,
            ShotPhase::Complete,
            ShotPhase::Aborted,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }

    pub fn can_load(self) -> bool {
        matches!(self, ShotPhase::Idle | ShotPhase::Complete | ShotPhase::Aborted)
    }

    pub fn can_abort(self) -> bool {
        matches!(
            self,
            ShotPhase::Setup | ShotPhase::Ready | ShotPhase::Counting | ShotPhase::Held
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountdownTick {
    pub shot_id: String,
    pub t_minus_ms: u64,
    pub phase: ShotPhase,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlKind {
    Hold { reason: String, duration: Option<Duration> },
    Resume,
    Abort { reason: String },
}

/// An operator action to apply when the countdown reaches `at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub at: Duration,
    pub kind: ControlKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotStatus {
    pub shot_id: Option<String>,
    pub phase: ShotPhase,
    pub t_minus_ms: Option<u64>,
    pub hold_remaining_ms: Option<u64>,
    pub hold_reason: Option<String>,
    pub abort_reason: Option<String>,
    pub fired_channels: usize,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub shot_id: String,
    pub expected: usize,
    pub recovered: usize,
    pub missing: Vec<String>,
    /// Every recovered payload read back with a matching checksum.
    pub verified: bool,
    pub elapsed: Duration,
}

impl RecoveryReport {
    pub fn complete(&self) -> bool {
        self.missing.is_empty() && self.recovered == self.expected && self.verified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ShotOutcome {
    Completed {
        shot_id: String,
        fired: usize,
        recovery: RecoveryReport,
    },
    Aborted {
        shot_id: String,
        t_minus_ms: u64,
        reason: String,
    },
}

impl ShotOutcome {
    pub fn is_aborted(&self) -> bool {
        matches!(self, ShotOutcome::Aborted { .. })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum DirectorError {
    #[error("{op} not allowed in phase {phase:?}")]
    IllegalPhase { op: String, phase: ShotPhase },
    #[error("no plan loaded")]
    NoPlan,
    #[error("unknown participant {0}")]
    UnknownParticipant(String),
    #[error("invalid marks: {0}")]
    InvalidMarks(String),
    #[error("schedule rejected: {0}")]
    ScheduleInvalid(String),
    #[error("goals rejected: {0}")]
    GoalRejected(String),
    #[error("{participant} not ready: {reason}")]
    ParticipantNotReady { participant: String, reason: String },
    #[error("{action} denied: {failing:?}")]
    PermissiveDenied { action: String, failing: Vec<String> },
    #[error("{0}")]
    Remote(String),
}

impl ErrorKind for DirectorError {
    fn kind(&self) -> &'static str {
        match self {
            DirectorError::IllegalPhase { .. } => "IllegalPhase",
            DirectorError::NoPlan => "NoPlan",
            DirectorError::UnknownParticipant(_) => "UnknownParticipant",
            DirectorError::InvalidMarks(_) => "InvalidMarks",
            DirectorError::ScheduleInvalid(_) => "ScheduleInvalid",
            DirectorError::GoalRejected(_) => "GoalRejected",
            DirectorError::ParticipantNotReady { .. } => "ParticipantNotReady",
            DirectorError::PermissiveDenied { .. } => "PermissiveDenied",
            DirectorError::Remote(_) => "RemoteFailure",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum DirectorRequest {
    Status,
    Hold { reason: String, duration_ms: Option<u64> },
    Resume,
    Abort { reason: String },
}

#[derive(Debug, Clone)]
pub struct DirectorConfig {
    /// FEPs driven safe on abort and triggered at T-0.
    pub feps: Vec<String>,
    pub seed: u64,
    pub jitter: JitterModel,
    pub limits: TimingLimits,
    /// A hold longer than this aborts the shot.
    pub max_hold: Duration,
}

impl Default for DirectorConfig {
    fn default() -> Self {
        DirectorConfig {
            feps: Vec::new(),
            seed: 0,
            jitter: JitterModel::BoundedUniform { bound_ps: 30 },
            limits: TimingLimits::default(),
            max_hold: Duration::from_secs(600),
        }
    }
}

struct State {
    plan: Option<ShotPlan>,
    schedule: Option<TriggerSchedule>,
    setpoints: Option<SetpointBundle>,
    phase: ShotPhase,
    t_minus: Duration,
    hold_left: Option<Duration>,
    hold_reason: Option<String>,
    held_for: Duration,
    controls: Vec<Control>,
    armed: BTreeSet<ArmedPoint>,
    abort_reason: Option<String>,
    fired: Vec<FiredRecord>,
    recovery: Option<RecoveryReport>,
}

struct Inner {
    ctx: Ctx,
    config: DirectorConfig,
    state: Mutex<State>,
    /// Held for a whole mark fan-out and for the abort fan-out, so an abort
    /// never interleaves with a mark at any one participant.
    barrier: Mutex<()>,
}

/// Cloneable handle; clones drive the same director.
#[derive(Clone)]
pub struct Director {
    inner: Arc<Inner>,
}

fn ms(d: Duration) -> u64 {
    d.as_millis() as u64
}

impl Director {
    /// `ctx.name` should be [`DIRECTOR`].
    pub fn new(ctx: Ctx, config: DirectorConfig) -> Self {
        Director {
            inner: Arc::new(Inner {
                ctx,
                config,
                state: Mutex::new(State {
                    plan: None,
                    schedule: None,
                    setpoints: None,
                    phase: ShotPhase::Idle,
                    t_minus: Duration::ZERO,
                    hold_left: None,
                    hold_reason: None,
                    held_for: Duration::ZERO,
                    controls: Vec::new(),
                    armed: BTreeSet::new(),
                    abort_reason: None,
                    fired: Vec::new(),
                    recovery: None,
                }),
                barrier: Mutex::new(()),
            }),
        }
    }

    pub fn ctx(&self) -> &Ctx {
        &self.inner.ctx
    }

    pub fn phase(&self) -> ShotPhase {
        self.inner.state.lock().phase
    }

    pub fn plan(&self) -> Option<ShotPlan> {
        self.inner.state.lock().plan.clone()
    }

    pub fn schedule(&self) -> Option<TriggerSchedule> {
        self.inner.state.lock().schedule.clone()
    }

    pub fn setpoints(&self) -> Option<SetpointBundle> {
        self.inner.state.lock().setpoints.clone()
    }

    pub fn fired(&self) -> Vec<FiredRecord> {
        self.inner.state.lock().fired.clone()
    }

    pub fn recovery(&self) -> Option<RecoveryReport> {
        self.inner.state.lock().recovery.clone()
    }

    pub fn armed(&self) -> Vec<ArmedPoint> {
        self.inner.state.lock().armed.iter().cloned().collect()
    }

    /// Facility readiness as the status rollup sees it now.
    pub fn status_rollup(&self) -> RollupSnapshot {
        self.inner.ctx.rollup.snapshot()
    }

    pub fn status(&self) -> ShotStatus {
        let st = self.inner.state.lock();
        let counting = !matches!(st.phase, ShotPhase::Idle | ShotPhase::Setup);
        ShotStatus {
            shot_id: st.plan.as_ref().map(|p| p.shot_id.clone()),
            phase: st.phase,
            t_minus_ms: (st.plan.is_some() && counting).then(|| ms(st.t_minus)),
            hold_remaining_ms: (st.phase == ShotPhase::Held).then(|| st.hold_left.map(ms)).flatten(),
            hold_reason: st.hold_reason.clone(),
            abort_reason: st.abort_reason.clone(),
            fired_channels: st.fired.len(),
            at: self.inner.ctx.now(),
        }
    }

    fn log(&self, category: EventCategory, payload: &str) {
        self.inner.ctx.log(category, payload);
    }

    fn publish_phase(&self) {
        let s = self.status();
        let _ = self.inner.ctx.bus.publish(PHASE_TOPIC, wire::to_bytes(&s));
    }

    /// Validates `plan` and moves to `setup`.
    pub fn load_plan(&self, plan: ShotPlan) -> Result<(), DirectorError> {
        let phase = self.phase();
        if !phase.can_load() {
            return Err(DirectorError::IllegalPhase {
                op: "load_plan".into(),
                phase,
            });
        }
        let ctx = &self.inner.ctx;
        for p in &plan.participants {
            if ctx.bus.resolve_name(p).is_err() {
                return Err(DirectorError::UnknownParticipant(p.clone()));
            }
        }
        check_marks(&plan.marks)?;
        let schedule = build_schedule(&plan.shot_id, plan.triggers.clone(), self.inner.config.limits)
            .map_err(|e| DirectorError::ScheduleInvalid(e.to_string()))?;
        let setpoints = if plan.goals.is_empty() {
            None
        } else if plan.participants.iter().any(|p| p == LPOM) {
            let b: SetpointBundle = wire::call(
                &ctx.bus,
                LPOM,
                &SupRequest::Setup {
                    shot_id: plan.shot_id.clone(),
                    goals: plan.goals.clone(),
                },
                plan.ack_deadline,
            )
            .map_err(|e| DirectorError::GoalRejected(e.to_string()))?;
            Some(b)
        } else {
            Some(
                lpom_setup(&LpomConfig::default(), &plan.shot_id, &plan.goals)
                    .map_err(|e| DirectorError::GoalRejected(e.to_string()))?,
            )
        };
        let mut st = self.inner.state.lock();
        if !st.phase.can_load() {
            return Err(DirectorError::IllegalPhase {
                op: "load_plan".into(),
                phase: st.phase,
            });
        }
        ctx.log(
            EventCategory::ShotPhase,
            &format!(
                "load {} participants={} tick={}ms marks={} triggers={}",
                plan.shot_id,
                plan.participants.join(","),
                ms(plan.tick),
                plan.marks
                    .iter()
                    .map(|m| format!("{}@{}", m.action.as_str(), ms(m.t_minus)))
                    .collect::<Vec<_>>()
                    .join(","),
                schedule.entries.len()
            ),
        );
        *st = State {
            t_minus: plan.countdown_length(),
            plan: Some(plan),
            schedule: Some(schedule),
            setpoints,
            phase: ShotPhase::Setup,
            hold_left: None,
            hold_reason: None,
            held_for: Duration::ZERO,
            controls: Vec::new(),
            armed: BTreeSet::new(),
            abort_reason: None,
            fired: Vec::new(),
            recovery: None,
        };
        drop(st);
        self.publish_phase();
        Ok(())
    }

    /// Queues an operator action for the countdown loop.
    pub fn schedule_control(&self, control: Control) {
        self.inner.state.lock().controls.push(control);
    }

    /// Freezes the countdown. With a duration it resumes by itself once that
    /// much countdown time has passed.
    pub fn hold(&self, reason: &str, duration: Option<Duration>) -> Result<ShotStatus, DirectorError> {
        {
            let mut st = self.inner.state.lock();
            if st.phase != ShotPhase::Counting {
                return Err(DirectorError::IllegalPhase {
                    op: "hold".into(),
                    phase: st.phase,
                });
            }
            st.phase = ShotPhase::Held;
            st.hold_left = duration;
            st.hold_reason = Some(reason.to_string());
            st.held_for = Duration::ZERO;
            let shot = st.plan.as_ref().map_or("", |p| p.shot_id.as_str());
            self.log(
                EventCategory::OperatorAction,
                &format!(
                    "hold {shot} {} {} {reason}",
                    ms(st.t_minus),
                    duration.map_or("indefinite".to_string(), |d| format!("{}ms", ms(d)))
                ),
            );
        }
        self.publish_phase();
        Ok(self.status())
    }

    pub fn resume(&self) -> Result<ShotStatus, DirectorError> {
        {
            let mut st = self.inner.state.lock();
            if st.phase != ShotPhase::Held {
                return Err(DirectorError::IllegalPhase {
                    op: "resume".into(),
                    phase: st.phase,
                });
            }
            self.resume_locked(&mut st);
        }
        self.publish_phase();
        Ok(self.status())
    }

    fn resume_locked(&self, st: &mut State) {
        st.phase = ShotPhase::Counting;
        st.hold_left = None;
        st.hold_reason = None;
        let shot = st.plan.as_ref().map_or("", |p| p.shot_id.as_str());
        self.log(
            EventCategory::OperatorAction,
            &format!("resume {shot} {}", ms(st.t_minus)),
        );
    }

    /// Stops the shot and drives every participant and FEP safe. Returns
    /// what each of them reported doing.
    pub fn abort(&self, reason: &str) -> Result<Vec<String>, DirectorError> {
        let ctx = &self.inner.ctx;
        let (shot, participants) = {
            let mut st = self.inner.state.lock();
            if !st.phase.can_abort() {
                return Err(DirectorError::IllegalPhase {
                    op: "abort".into(),
                    phase: st.phase,
                });
            }
            st.phase = ShotPhase::Aborted;
            st.abort_reason = Some(reason.to_string());
            st.hold_left = None;
            let plan = st.plan.as_ref().ok_or(DirectorError::NoPlan)?;
            ctx.log(
                EventCategory::ShotPhase,
                &format!("abort {} {} {reason}", plan.shot_id, ms(st.t_minus)),
            );
            (plan.shot_id.clone(), plan.participants.clone())
        };
        ctx.services
            .alerts
            .raise(DIRECTOR, Severity::Critical, &format!("shot {shot} aborted: {reason}"));
        self.publish_phase();

        let _g = self.inner.barrier.lock();
        let mut done = Vec::new();
        for p in &participants {
            let r: Result<Vec<String>, _> = wire::call(
                &ctx.bus,
                p,
                &SupRequest::Abort {
                    shot_id: shot.clone(),
                    reason: reason.to_string(),
                },
                ctx.deadline,
            );
            match r {
                Ok(v) => done.extend(v.into_iter().map(|a| format!("{p}:{a}"))),
                Err(e) => done.push(format!("{p}:unreachable {e}")),
            }
        }
        for f in &self.inner.config.feps {
            let t = fep_target(f);
            match wire::call::<_, BTreeSet<String>>(&ctx.bus, &t, &FepRequest::SafeState, ctx.deadline) {
                Ok(v) => done.extend(v.into_iter().map(|a| format!("{t}:{a}"))),
                Err(e) => done.push(format!("{t}:unreachable {e}")),
            }
        }
        ctx.log(EventCategory::ShotPhase, &format!("safe {shot} actions={}", done.len()));
        Ok(done)
    }

    fn preflight(&self, plan: &ShotPlan) -> Result<(), DirectorError> {
        let ctx = &self.inner.ctx;
        for p in &plan.participants {
            let r: crate::supervisors::Readiness = wire::call(&ctx.bus, p, &SupRequest::Ready, plan.ack_deadline)
                .map_err(|e| DirectorError::ParticipantNotReady {
                    participant: p.clone(),
                    reason: e.to_string(),
                })?;
            if !r.ready {
                return Err(DirectorError::ParticipantNotReady {
                    participant: p.clone(),
                    reason: r.reason.unwrap_or_default(),
                });
            }
        }
        for action in &plan.permissives {
            let permit: Permit = wire::call(
                &ctx.bus,
                PLC_TARGET,
                &PlcRequest::Evaluate {
                    action_id: action.clone(),
                },
                plan.ack_deadline,
            )
            .map_err(|e| DirectorError::Remote(format!("{PLC_TARGET}: {e}")))?;
            if let Permit::Deny { failing } = permit {
                return Err(DirectorError::PermissiveDenied {
                    action: action.clone(),
                    failing: failing.into_iter().map(|f| f.input_id).collect(),
                });
            }
        }
        Ok(())
    }

    /// Runs the loaded plan to completion or abort. Blocks the caller; hold,
    /// resume and abort may come from other threads meanwhile.
    pub fn run_countdown(&self) -> Result<ShotOutcome, DirectorError> {
        let plan = {
            let st = self.inner.state.lock();
            if st.phase != ShotPhase::Setup {
                return Err(DirectorError::IllegalPhase {
                    op: "countdown".into(),
                    phase: st.phase,
                });
            }
            st.plan.clone().ok_or(DirectorError::NoPlan)?
        };
        self.preflight(&plan)?;
        {
            let mut st = self.inner.state.lock();
            if st.phase != ShotPhase::Setup {
                return Err(DirectorError::IllegalPhase {
                    op: "countdown".into(),
                    phase: st.phase,
                });
            }
            st.phase = ShotPhase::Ready;
        }
        self.publish_phase();
        {
            let mut st = self.inner.state.lock();
            if st.phase == ShotPhase::Ready {
                st.phase = ShotPhase::Counting;
            }
        }
        self.publish_phase();

        let ctx = &self.inner.ctx;
        let clock = ctx.driver.clock().clone();
        let start = clock.now();
        let mut next_mark = 0;
        let mut k: u32 = 0;
        'tick: loop {
            self.apply_controls();
            let (phase, t) = {
                let st = self.inner.state.lock();
                if st.phase == ShotPhase::Aborted {
                    return Ok(ShotOutcome::Aborted {
                        shot_id: plan.shot_id.clone(),
                        t_minus_ms: ms(st.t_minus),
                        reason: st.abort_reason.clone().unwrap_or_default(),
                    });
                }
                let tick = CountdownTick {
                    shot_id: plan.shot_id.clone(),
                    t_minus_ms: ms(st.t_minus),
                    phase: st.phase,
                    at: clock.now(),
                };
                ctx.log(
                    EventCategory::ShotPhase,
                    &format!("tick {} {} {}", plan.shot_id, tick.t_minus_ms, st.phase.as_str()),
                );
                let _ = ctx.bus.publish(TICK_TOPIC, wire::to_bytes(&tick));
                (st.phase, st.t_minus)
            };

            if phase == ShotPhase::Counting {
                while next_mark < plan.marks.len() && plan.marks[next_mark].t_minus >= t {
                    let action = plan.marks[next_mark].action;
                    next_mark += 1;
                    if let Err(reason) = self.mark_barrier(&plan, t, action) {
                        let _ = self.abort(&reason);
                        continue 'tick;
                    }
                    if action == MarkAction::Fire {
                        if let Some(out) = self.fire(&plan, t) {
                            return Ok(out);
                        }
                    }
                }
            } else if phase == ShotPhase::Held {
                let mut st = self.inner.state.lock();
                if st.phase == ShotPhase::Held {
                    st.held_for += plan.tick;
                    if let Some(left) = st.hold_left {
                        let left = left.saturating_sub(plan.tick);
                        st.hold_left = Some(left);
                        if left.is_zero() {
                            self.resume_locked(&mut st);
                            drop(st);
                            self.publish_phase();
                        }
                    } else if st.held_for > self.inner.config.max_hold {
                        drop(st);
                        let _ = self.abort("hold limit exceeded");
                    }
                }
            }

            k += 1;
            let deadline = start.add(plan.tick * k);
            let dt = deadline.saturating_sub(clock.now());
            if !dt.is_zero() {
                ctx.driver.advance(dt);
            }
            if phase == ShotPhase::Counting {
                let mut st = self.inner.state.lock();
                st.t_minus = st.t_minus.saturating_sub(plan.tick);
            }
        }
    }

    fn apply_controls(&self) {
        let mut abort = None;
        let mut changed = false;
        {
            let mut st = self.inner.state.lock();
            let t = st.t_minus;
            let (due, keep): (Vec<Control>, Vec<Control>) = st.controls.drain(..).partition(|c| c.at >= t);
            st.controls = keep;
            for c in due {
                match c.kind {
                    ControlKind::Hold { reason, duration } if st.phase == ShotPhase::Counting => {
                        drop(st);
                        let _ = self.hold(&reason, duration);
                        st = self.inner.state.lock();
                    }
                    ControlKind::Resume if st.phase == ShotPhase::Held => {
                        self.resume_locked(&mut st);
                        changed = true;
                    }
                    ControlKind::Abort { reason } => abort = Some(reason),
                    _ => {}
                }
            }
        }
        if changed {
            self.publish_phase();
        }
        if let Some(r) = abort {
            let _ = self.abort(&r);
        }
    }

    /// Sends `action` to every participant in turn and waits for each ack.
    fn mark_barrier(&self, plan: &ShotPlan, t: Duration, action: MarkAction) -> Result<(), String> {
        let ctx = &self.inner.ctx;
        let _g = self.inner.barrier.lock();
        {
            let st = self.inner.state.lock();
            if st.phase != ShotPhase::Counting {
                return Err(format!("{} skipped in {}", action.as_str(), st.phase.as_str()));
            }
            ctx.log(
                EventCategory::ShotPhase,
                &format!("mark {} {} {}", plan.shot_id, ms(t), action.as_str()),
            );
        }
        for p in &plan.participants {
            let r: Result<MarkAck, _> = wire::call(
                &ctx.bus,
                p,
                &SupRequest::Mark {
                    shot_id: plan.shot_id.clone(),
                    action,
                },
                plan.ack_deadline,
            );
            match r {
                Ok(a) => {
                    ctx.log(
                        EventCategory::ShotPhase,
                        &format!("ack {} {} {} {p}", plan.shot_id, ms(t), action.as_str()),
                    );
                    self.inner.state.lock().armed.extend(a.armed);
                }
                Err(e) => return Err(format!("{p} failed {}: {e}", action.as_str())),
            }
        }
        Ok(())
    }

    /// T-0: executes the trigger schedule and triggers every armed FEP. Runs
    /// at most once per loaded plan.
    fn fire(&self, plan: &ShotPlan, t: Duration) -> Option<ShotOutcome> {
        let ctx = &self.inner.ctx;
        let (schedule, armed) = {
            let mut st = self.inner.state.lock();
            if st.phase != ShotPhase::Counting || !st.fired.is_empty() {
                return None;
            }
            st.phase = ShotPhase::Fired;
            let schedule = st.schedule.clone()?;
            ctx.log(
                EventCategory::ShotPhase,
                &format!("fire {} {} channels={}", plan.shot_id, ms(t), schedule.entries.len()),
            );
            (schedule, st.armed.clone())
        };
        self.publish_phase();
        let seed = point_seed(self.inner.config.seed, &plan.shot_id);
        let fired = execute(&schedule, self.inner.config.jitter, seed).unwrap_or_default();
        let offsets: BTreeMap<String, i64> = fired.iter().map(|f| (f.channel_id.clone(), f.fired_ps)).collect();
        let energies: BTreeMap<String, f64> = plan.goals.clone();
        let t0_ps = ctx.now().as_picos();
        let mut by_fep: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for a in &armed {
            by_fep.entry(&a.fep_id).or_default().push(&a.point_id);
        }
        let mut triggered = 0usize;
        for (fep, points) in &by_fep {
            let offs = points
                .iter()
                .filter_map(|p| offsets.get(*p).map(|o| (p.to_string(), *o)))
                .collect();
            let r: Result<usize, _> = wire::call(
                &ctx.bus,
                &fep_target(fep),
                &FepRequest::Trigger {
                    shot_id: plan.shot_id.clone(),
                    t0_ps,
                    offsets_ps: offs,
                    energies_j: energies.clone(),
                },
                ctx.deadline,
            );
            match r {
                Ok(n) => triggered += n,
                Err(e) => ctx.log(EventCategory::Error, &format!("trigger {fep} failed: {e}")),
            }
        }
        {
            let mut st = self.inner.state.lock();
            st.fired = fired.clone();
            st.phase = ShotPhase::PostShot;
        }
        self.publish_phase();
        ctx.log(
            EventCategory::ShotPhase,
            &format!("triggered {} points={triggered}", plan.shot_id),
        );

        let recovery = self.recover(&plan.shot_id, &armed);
        for p in &plan.participants {
            let r: Result<Option<crate::supervisors::DiagBundle>, _> = wire::call(
                &ctx.bus,
                p,
                &SupRequest::PostShot {
                    shot_id: plan.shot_id.clone(),
                },
                ctx.deadline,
            );
            if let Err(e) = r {
                ctx.log(EventCategory::Error, &format!("post_shot {p}: {e}"));
            }
        }
        {
            let mut st = self.inner.state.lock();
            st.recovery = Some(recovery.clone());
            st.phase = ShotPhase::Complete;
        }
        ctx.log(EventCategory::ShotPhase, &format!("complete {}", plan.shot_id));
        self.publish_phase();
        Some(ShotOutcome::Completed {
            shot_id: plan.shot_id.clone(),
            fired: fired.len(),
            recovery,
        })
    }

    /// Reads every armed point's record back from its FEP, archives it under
    /// `(shot_id, "pt/<point_id>")` and verifies the stored copies.
    pub fn recover(&self, shot_id: &str, armed: &BTreeSet<ArmedPoint>) -> RecoveryReport {
        let ctx = &self.inner.ctx;
        let started = Instant::now();
        let mut by_fep: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for a in armed {
            by_fep.entry(&a.fep_id).or_default().insert(&a.point_id);
        }
        let mut stored = BTreeSet::new();
        let mut missing = Vec::new();
        for (fep, points) in by_fep {
            let got: Result<Vec<ShotDataRecord>, _> = wire::call(
                &ctx.bus,
                &fep_target(fep),
                &FepRequest::ReadShotData {
                    shot_id: shot_id.to_string(),
                },
                ctx.deadline,
            );
            let recs: BTreeMap<String, ShotDataRecord> = got
                .map(|v| v.into_iter().map(|r| (r.point_id.clone(), r)).collect())
                .unwrap_or_default();
            for p in points {
                let source = format!("pt/{p}");
                match recs.get(p) {
                    Some(r) if ctx.services.store(shot_id, &source, &wire::to_bytes(r), true).is_ok() => {
                        stored.insert(source);
                    }
                    _ => missing.push(p.to_string()),
                }
            }
        }
        let fetched = ctx.services.archive.fetch(shot_id);
        let verified = stored
            .iter()
            .all(|s| fetched.iter().any(|f| &f.record.source == s && f.verified()));
        let report = RecoveryReport {
            shot_id: shot_id.to_string(),
            expected: armed.len(),
            recovered: stored.len(),
            missing,
            verified,
            elapsed: started.elapsed(),
        };
        ctx.log(
            EventCategory::ShotPhase,
            &format!(
                "recovered {shot_id} {}/{} verified={}",
                report.recovered, report.expected, report.verified
            ),
        );
        if !report.complete() {
            ctx.services.alerts.raise(
                DIRECTOR,
                Severity::Serious,
                &format!("shot {shot_id} recovery incomplete: {:?}", report.missing),
            );
        }
        report
    }

    /// Serves [`DirectorRequest`] on [`DIRECTOR`].
    pub fn serve(&self) -> Result<ServiceHandle, BusError> {
        let ctx = &self.inner.ctx;
        let node = DIRECTOR.replace('/', "-");
        let ep = Endpoint::inproc(node.clone(), ctx.bus.next_incarnation(&node));
        let d = self.clone();
        ctx.bus.serve(&ep, &[DIRECTOR], move |req| {
            let Ok(r) = wire::from_bytes::<DirectorRequest>(req.payload()) else {
                return err_reply("BadRequest", "undecodable director request");
            };
            match r {
                DirectorRequest::Status => ok_reply(d.status()),
                DirectorRequest::Hold { reason, duration_ms } => {
                    reply_from(d.hold(&reason, duration_ms.map(Duration::from_millis)))
                }
                DirectorRequest::Resume => reply_from(d.resume()),
                DirectorRequest::Abort { reason } => reply_from(d.abort(&reason)),
            }
        })
    }
}

fn check_marks(marks: &[Mark]) -> Result<(), DirectorError> {
    if marks.is_empty() {
        return Err(DirectorError::InvalidMarks("no marks".into()));
    }
    for w in marks.windows(2) {
        if w[1].t_minus >= w[0].t_minus {
            return Err(DirectorError::InvalidMarks(format!(
                "{} at T-{}ms does not follow {} at T-{}ms",
                w[1].action.as_str(),
                ms(w[1].t_minus),
                w[0].action.as_str(),
                ms(w[0].t_minus)
            )));
        }
    }
    let last = marks[marks.len() - 1];
    if last.action != MarkAction::Fire || !last.t_minus.is_zero() {
        return Err(DirectorError::InvalidMarks("last mark must be fire at T-0".into()));
    }
    if marks[..marks.len() - 1].iter().any(|m| m.action == MarkAction::Fire) {
        return Err(DirectorError::InvalidMarks("fire before T-0".into()));
    }
    Ok(())
}
