//! Laser performance setup stub: linear gain from an energy goal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ack, Ctx, MarkAck, MarkAction, SupError, SupRequest, Supervisor};
use crate::wire::{self, reply_from, ErrorKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpomConfig {
    pub base_gain: f64,
    pub reference_energy_j: f64,
    /// Accepted goals, inclusive. The floor is strictly positive.
    pub envelope_j: (f64, f64),
    pub gain_range: (f64, f64),
}

impl Default for LpomConfig {
    fn default() -> Self {
        LpomConfig {
            base_gain: 20.0,
            reference_energy_j: 1000.0,
            envelope_j: (1.0, 4000.0),
            gain_range: (0.0, 100.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoint {
    pub amplifier_gain: f64,
    pub pulse_energy_goal_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointBundle {
    pub shot_id: String,
    pub setpoints: BTreeMap<String, Setpoint>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum LpomError {
    #[error("goal {energy_j} J for {beam} outside envelope [{min}, {max}]")]
    GoalOutOfEnvelope { beam: String, energy_j: f64, min: f64, max: f64 },
    #[error("gain {gain} for {beam} outside device range")]
    GainOutOfRange { beam: String, gain: f64 },
}

impl ErrorKind for LpomError {
    fn kind(&self) -> &'static str {
        match self {
            LpomError::GoalOutOfEnvelope { .. } => "GoalOutOfEnvelope",
            LpomError::GainOutOfRange { .. } => "GoalOutOfEnvelope",
        }
    }
}

pub fn lpom_setup(config: &LpomConfig, shot_id: &str, goals: &BTreeMap<String, f64>) -> Result<SetpointBundle, LpomError> {
    let (min, max) = config.envelope_j;
    let mut setpoints = BTreeMap::new();
    for (beam, &e) in goals {
        if !(e >= min && e <= max && e > 0.0) {
            return Err(LpomError::GoalOutOfEnvelope {
                beam: beam.clone(),
                energy_j: e,
                min,
                max,
            });
        }
        let gain = config.base_gain * (e / config.reference_energy_j);
        if !(config.gain_range.0..=config.gain_range.1).contains(&gain) {
            return Err(LpomError::GainOutOfRange { beam: beam.clone(), gain });
        }
        setpoints.insert(
            beam.clone(),
            Setpoint {
                amplifier_gain: gain,
                pulse_energy_goal_j: e,
            },
        );
    }
    Ok(SetpointBundle {
        shot_id: shot_id.to_string(),
        setpoints,
    })
}

/// Setup guidance supervisor. Bundles are computed at plan load and
/// archived at the setup mark.
pub struct Lpom {
    pub config: LpomConfig,
    bundles: BTreeMap<String, SetpointBundle>,
}

impl Lpom {
    pub fn new(config: LpomConfig) -> Self {
        Lpom {
            config,
            bundles: BTreeMap::new(),
        }
    }
}

impl Supervisor for Lpom {
    fn on_mark(&mut self, ctx: &Ctx, shot_id: &str, action: MarkAction) -> Result<MarkAck, SupError> {
        if action == MarkAction::Setup {
            if let Some(b) = self.bundles.get(shot_id) {
                ctx.services
                    .store(shot_id, &ctx.name, &wire::to_bytes(b), true)
                    .map_err(|e| SupError::Storage(e.to_string()))?;
            }
        }
        Ok(ack(ctx, action))
    }

    fn other(&mut self, _ctx: &Ctx, req: SupRequest) -> Vec<u8> {
        match req {
            SupRequest::Setup { shot_id, goals } => {
                let r = lpom_setup(&self.config, &shot_id, &goals).map_err(SupError::from);
                if let Ok(b) = &r {
                    self.bundles.insert(shot_id, b.clone());
                }
                reply_from(r)
            }
            r => reply_from::<(), SupError>(Err(SupError::Unsupported(format!("{r:?}")))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(e: f64) -> Result<SetpointBundle, LpomError> {
        lpom_setup(&LpomConfig::default(), "s", &BTreeMap::from([("beam01".to_string(), e)]))
    }

    #[test]
    fn reference_gives_base_gain() {
        assert_eq!(one(1000.0).unwrap().setpoints["beam01"].amplifier_gain, 20.0);
    }

    #[test]
    fn linear_in_goal() {
        assert_eq!(one(2000.0).unwrap().setpoints["beam01"].amplifier_gain, 40.0);
    }

    #[test]
    fn zero_goal_below_floor() {
        assert!(matches!(one(0.0), Err(LpomError::GoalOutOfEnvelope { .. })));
        assert!(matches!(one(f64::NAN), Err(LpomError::GoalOutOfEnvelope { .. })));
        assert!(matches!(one(5000.0), Err(LpomError::GoalOutOfEnvelope { .. })));
    }
}
