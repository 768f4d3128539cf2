//! Power-conditioning charge modules.

use std::time::Duration;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ack, Ctx, MarkAck, MarkAction, Readiness, SupError, SupRequest, Supervisor};
use crate::clock::SimTime;
use crate::plc::{PlcRequest, PLC_TARGET};
use crate::plc::Permit;
use crate::wire::{ok_reply, reply_from, ErrorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargeStage {
    Idle,
    Charging,
    Charged,
    Fired,
    Dumped,
    Fault,
}

impl ChargeStage {
    pub fn can_go(self, to: ChargeStage) -> bool {
        use ChargeStage::*;
        matches!(
            (self, to),
            (Idle, Charging) | (Charging, Charged) | (Charged, Fired) | (Charging, Dumped) | (Charged, Dumped)
        ) || (to == Fault && self != Fault)
    }

    pub fn is_live(self) -> bool {
        matches!(self, ChargeStage::Charging | ChargeStage::Charged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeConfig {
    pub ramp_v_per_s: f64,
    pub dump_tau_s: f64,
}

impl Default for ChargeConfig {
    fn default() -> Self {
        ChargeConfig {
            ramp_v_per_s: 10_000.0,
            dump_tau_s: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum ChargeError {
    #[error("permissive power/{module}/charge denied")]
    PermissiveDenied { module: String, failing: Vec<String> },
    #[error("{module} already {stage:?}")]
    AlreadyActive { module: String, stage: ChargeStage },
    #[error("{module} cannot go from {from:?} to {to:?}")]
    IllegalTransition { module: String, from: ChargeStage, to: ChargeStage },
    #[error("target voltage must be positive")]
    InvalidTarget,
}

impl ErrorKind for ChargeError {
    fn kind(&self) -> &'static str {
        match self {
            ChargeError::PermissiveDenied { .. } => "PermissiveDenied",
            ChargeError::AlreadyActive { .. } => "AlreadyActive",
            ChargeError::IllegalTransition { .. } => "IllegalTransition",
            ChargeError::InvalidTarget => "InvalidTarget",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeState {
    pub module_id: String,
    pub stage: ChargeStage,
    pub voltage: f64,
    pub target_voltage: f64,
    pub trace: Vec<(ChargeStage, SimTime)>,
}

impl ChargeState {
    pub fn new(module_id: &str, now: SimTime) -> Self {
        ChargeState {
            module_id: module_id.to_string(),
            stage: ChargeStage::Idle,
            voltage: 0.0,
            target_voltage: 0.0,
            trace: vec![(ChargeStage::Idle, now)],
        }
    }

    fn go(&mut self, to: ChargeStage, at: SimTime) -> Result<(), ChargeError> {
        if !self.stage.can_go(to) {
            return Err(ChargeError::IllegalTransition {
                module: self.module_id.clone(),
                from: self.stage,
                to,
            });
        }
        self.stage = to;
        self.trace.push((to, at));
        Ok(())
    }

    /// Starts charging when `permit` (the module's charge permissive) allows.
    pub fn start(&mut self, target_voltage: f64, permit: &Permit, now: SimTime) -> Result<(), ChargeError> {
        if !(target_voltage > 0.0) {
            return Err(ChargeError::InvalidTarget);
        }
        if self.stage != ChargeStage::Idle {
            return Err(ChargeError::AlreadyActive {
                module: self.module_id.clone(),
                stage: self.stage,
            });
        }
        if let Permit::Deny { failing } = permit {
            return Err(ChargeError::PermissiveDenied {
                module: self.module_id.clone(),
                failing: failing.iter().map(|f| f.input_id.clone()).collect(),
            });
        }
        self.target_voltage = target_voltage;
        self.go(ChargeStage::Charging, now)
    }

    /// Advances the ramp or the dump decay to time `now` after `dt`.
    pub fn advance(&mut self, cfg: &ChargeConfig, dt: Duration, now: SimTime) {
        match self.stage {
            ChargeStage::Charging => {
                self.voltage = (self.voltage + cfg.ramp_v_per_s * dt.as_secs_f64()).min(self.target_voltage);
                if self.target_voltage - self.voltage <= 0.01 * self.target_voltage {
                    self.go(ChargeStage::Charged, now).expect("charging -> charged");
                }
            }
            ChargeStage::Dumped => {
                self.voltage *= (-dt.as_secs_f64() / cfg.dump_tau_s).exp();
                if self.voltage < 1e-3 {
                    self.voltage = 0.0;
                }
            }
            _ => {}
        }
    }

    pub fn fire(&mut self, now: SimTime) -> Result<(), ChargeError> {
        self.go(ChargeStage::Fired, now)?;
        self.voltage = 0.0;
        Ok(())
    }

    /// Dumps a live module; idle or finished modules are left alone.
    pub fn dump(&mut self, now: SimTime) -> bool {
        if self.stage.is_live() {
            self.go(ChargeStage::Dumped, now).expect("live -> dumped");
            true
        } else {
            false
        }
    }

    pub fn fault(&mut self, now: SimTime) {
        if self.stage != ChargeStage::Fault {
            self.go(ChargeStage::Fault, now).expect("any -> fault");
        }
    }

    /// Back to idle for the next shot.
    pub fn reset(&mut self, now: SimTime) {
        self.stage = ChargeStage::Idle;
        self.voltage = 0.0;
        self.target_voltage = 0.0;
        self.trace = vec![(ChargeStage::Idle, now)];
    }
}

/// Trace legality against the transition graph.
pub fn trace_is_legal(trace: &[(ChargeStage, SimTime)]) -> bool {
    trace.first().is_some_and(|(s, _)| *s == ChargeStage::Idle)
        && trace.windows(2).all(|w| w[0].0.can_go(w[1].0) && w[0].1 <= w[1].1)
}

pub fn charge_permissive(module_id: &str) -> String {
    format!("power/{module_id}/charge")
}

/// Power-conditioning supervisor. Module state is brought up to the clock
/// whenever it is looked at.
pub struct PowerConditioning {
    pub config: ChargeConfig,
    targets: BTreeMap<String, f64>,
    modules: BTreeMap<String, ChargeState>,
    last: SimTime,
}

impl PowerConditioning {
    pub fn new(targets: BTreeMap<String, f64>, config: ChargeConfig, now: SimTime) -> Self {
        let modules = targets.keys().map(|m| (m.clone(), ChargeState::new(m, now))).collect();
        PowerConditioning {
            config,
            targets,
            modules,
            last: now,
        }
    }

    pub fn sync(&mut self, now: SimTime) {
        if now > self.last {
            let dt = now.saturating_sub(self.last);
            for m in self.modules.values_mut() {
                m.advance(&self.config, dt, now);
            }
            self.last = now;
        }
    }

    pub fn states(&self) -> Vec<ChargeState> {
        self.modules.values().cloned().collect()
    }

    fn resources(&self) -> Vec<String> {
        self.modules.keys().map(|m| format!("power/{m}")).collect()
    }

    fn charge(&mut self, ctx: &Ctx) -> Result<(), SupError> {
        ctx.reserve_all(&self.resources())?;
        let now = ctx.now();
        for (id, m) in self.modules.iter_mut() {
            let permit: Permit = ctx.call(
                PLC_TARGET,
                &PlcRequest::Evaluate {
                    action_id: charge_permissive(id),
                },
            )?;
            m.start(self.targets[id], &permit, now)?;
        }
        Ok(())
    }
}

impl Supervisor for PowerConditioning {
    fn on_mark(&mut self, ctx: &Ctx, _shot_id: &str, action: MarkAction) -> Result<MarkAck, SupError> {
        let now = ctx.now();
        self.sync(now);
        match action {
            MarkAction::Setup => {
                for m in self.modules.values_mut() {
                    if !m.stage.is_live() && m.stage != ChargeStage::Fault {
                        m.reset(now);
                    }
                }
            }
            MarkAction::Arm => {}
            MarkAction::Charge => self.charge(ctx)?,
            MarkAction::FinalCheck => {
                if let Some(m) = self.modules.values().find(|m| m.stage != ChargeStage::Charged) {
                    return Err(SupError::NotReady(format!(
                        "{} {:?} at {:.0} V",
                        m.module_id, m.stage, m.voltage
                    )));
                }
                ctx.reserve_all(&self.resources())?;
            }
            MarkAction::Fire => {
                for m in self.modules.values_mut() {
                    m.fire(now)?;
                }
                ctx.release_all(&self.resources());
            }
        }
        Ok(ack(ctx, action))
    }

    fn on_abort(&mut self, ctx: &Ctx, _shot_id: &str) -> Vec<String> {
        let now = ctx.now();
        self.sync(now);
        let dumped = self
            .modules
            .values_mut()
            .filter_map(|m| m.dump(now).then(|| m.module_id.clone()))
            .collect();
        ctx.release_all(&self.resources());
        dumped
    }

    fn ready(&mut self, ctx: &Ctx) -> Readiness {
        self.sync(ctx.now());
        if let Some(m) = self.modules.values().find(|m| m.stage == ChargeStage::Fault) {
            return Readiness {
                ready: false,
                reason: Some(format!("{} faulted", m.module_id)),
            };
        }
        ctx.readiness()
    }

    fn other(&mut self, ctx: &Ctx, req: SupRequest) -> Vec<u8> {
        match req {
            SupRequest::ChargeStates => {
                self.sync(ctx.now());
                ok_reply(self.states())
            }
            r => reply_from::<(), SupError>(Err(SupError::Unsupported(format!("{r:?}")))),
        }
    }
}
