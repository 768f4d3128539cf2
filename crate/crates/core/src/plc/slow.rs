use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::PlcError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlowKind {
    VacuumPressure,
    ArgonFlow,
    AirTemp,
}

impl SlowKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "vacuum_pressure" => SlowKind::VacuumPressure,
            "argon_flow" => SlowKind::ArgonFlow,
            "air_temp" => SlowKind::AirTemp,
            _ => return None,
        })
    }

    pub fn default_units(self) -> &'static str {
        match self {
            SlowKind::VacuumPressure => "torr",
            SlowKind::ArgonFlow => "slpm",
            SlowKind::AirTemp => "degC",
        }
    }
}

/// First-order process channel: `v(t) = sp + (v0 - sp) * exp(-t / tau)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowChannel {
    pub channel_id: String,
    pub kind: SlowKind,
    pub units: String,
    pub value: f64,
    pub setpoint: f64,
    pub time_constant_s: f64,
    pub bounds: (f64, f64),
}

impl SlowChannel {
    pub fn new(channel_id: impl Into<String>, kind: SlowKind, value: f64, tau_s: f64, bounds: (f64, f64)) -> Self {
        SlowChannel {
            channel_id: channel_id.into(),
            kind,
            units: kind.default_units().to_string(),
            value,
            setpoint: value,
            time_constant_s: tau_s,
            bounds,
        }
    }

    pub(crate) fn is_well_formed(&self) -> bool {
        let (lo, hi) = self.bounds;
        self.time_constant_s > 0.0
            && self.time_constant_s.is_finite()
            && lo <= hi
            && (lo..=hi).contains(&self.value)
            && (lo..=hi).contains(&self.setpoint)
    }

    pub fn command(&mut self, setpoint: f64) -> Result<f64, PlcError> {
        let (min, max) = self.bounds;
        if !(min..=max).contains(&setpoint) {
            return Err(PlcError::SetpointOutOfBounds {
                channel: self.channel_id.clone(),
                setpoint,
                min,
                max,
            });
        }
        self.setpoint = setpoint;
        Ok(setpoint)
    }

    pub fn advance(&mut self, dt: Duration) {
        if self.value == self.setpoint {
            return;
        }
        let k = (-dt.as_secs_f64() / self.time_constant_s).exp();
        self.value = self.setpoint + (self.value - self.setpoint) * k;
        let (lo, hi) = self.bounds;
        self.value = self.value.clamp(lo, hi);
    }
}
