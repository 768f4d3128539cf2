//! Single-threaded FEP state: control points, commands, arming and shot data.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::devices::{
    capture_waveform, read_energy, render_spot, DeviceKind, DeviceParams, Frame, MotorState, Summary,
};
use crate::clock::SimTime;
use crate::wire::ErrorKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointConfig {
    pub point_id: String,
    pub params: DeviceParams,
    pub units: Option<String>,
}

impl PointConfig {
    pub fn new(point_id: impl Into<String>, params: DeviceParams) -> Self {
        PointConfig {
            point_id: point_id.into(),
            params,
            units: None,
        }
    }

    pub fn kind(&self) -> DeviceKind {
        self.params.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FepConfig {
    pub fep_id: String,
    pub points: Vec<PointConfig>,
    pub seed: u64,
    /// Calorimeter truth when no energy is injected for the beam.
    pub default_energy_j: f64,
}

impl FepConfig {
    pub fn new(fep_id: impl Into<String>, points: Vec<PointConfig>) -> Self {
        FepConfig {
            fep_id: fep_id.into(),
            points,
            seed: 0,
            default_energy_j: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Ok,
    Warning,
    Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "v", rename_all = "snake_case")]
pub enum Value {
    Steps(i64),
    Scalar(f64),
    Summary(Summary),
    Open(bool),
    Armed(Option<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReading {
    pub point_id: String,
    pub value: Value,
    pub health: Health,
    pub reason: Option<String>,
    pub timestamp: SimTime,
}

impl StatusReading {
    fn same_state(&self, other: &StatusReading) -> bool {
        self.value == other.value && self.health == other.health && self.reason == other.reason
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum PointCommand {
    MoveAbsolute { target: i64 },
    MoveRelative { delta: i64 },
    Stop,
    Open,
    Close,
    /// Manual digitizer arming for a test capture.
    Arm { shot_id: String },
    Disarm,
}

impl PointCommand {
    pub fn name(&self) -> &'static str {
        match self {
            PointCommand::MoveAbsolute { .. } => "move_absolute",
            PointCommand::MoveRelative { .. } => "move_relative",
            PointCommand::Stop => "stop",
            PointCommand::Open => "open",
            PointCommand::Close => "close",
            PointCommand::Arm { .. } => "arm",
            PointCommand::Disarm => "disarm",
        }
    }

    pub fn changes_state(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandAck {
    pub point_id: String,
    pub command: String,
    pub accepted: bool,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShotPayload {
    Waveform { sample_rate: u64, samples: Vec<i16> },
    Energy { joules: f64 },
    Image { frame: Frame },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotDataRecord {
    pub shot_id: String,
    pub point_id: String,
    pub kind: DeviceKind,
    pub payload: ShotPayload,
    pub summary: Option<Summary>,
    pub acquired_at_ps: i64,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FepError {
    #[error("duplicate point id {0}")]
    DuplicatePointId(String),
    #[error("invalid device parameters for {point}: {reason}")]
    InvalidDeviceParams { point: String, reason: String },
    #[error("unknown point {0}")]
    UnknownPoint(String),
    #[error("{command} not valid for {point} ({kind})")]
    KindMismatch { point: String, kind: String, command: String },
    #[error("target {target} outside soft limits [{min}, {max}] for {point}")]
    LimitViolation { point: String, target: i64, min: i64, max: i64 },
    #[error("{point} is reserved by {holder}")]
    NotReservationHolder { point: String, holder: String },
    #[error("{0} is not armable")]
    NotArmable(String),
    #[error("{point} already armed for {shot}")]
    AlreadyArmed { point: String, shot: String },
    #[error("no shot data for {0}")]
    ShotUnknown(String),
    #[error("advance requires a positive duration")]
    InvalidDuration,
    #[error("{point} is faulted: {reason}")]
    PointFaulted { point: String, reason: String },
}

impl ErrorKind for FepError {
    fn kind(&self) -> &'static str {
        match self {
            FepError::DuplicatePointId(_) => "DuplicatePointId",
            FepError::InvalidDeviceParams { .. } => "InvalidDeviceParams",
            FepError::UnknownPoint(_) => "UnknownPoint",
            FepError::KindMismatch { .. } => "KindMismatch",
            FepError::LimitViolation { .. } => "LimitViolation",
            FepError::NotReservationHolder { .. } => "NotReservationHolder",
            FepError::NotArmable(_) => "NotArmable",
            FepError::AlreadyArmed { .. } => "AlreadyArmed",
            FepError::ShotUnknown(_) => "ShotUnknown",
            FepError::InvalidDuration => "InvalidDuration",
            FepError::PointFaulted { .. } => "PointFaulted",
        }
    }
}

#[derive(Debug, Clone)]
enum Model {
    Motor(MotorState),
    Digitizer { last: Option<Summary> },
    Calorimeter { last: Option<f64> },
    Photodiode,
    Camera,
    Shutter { open: bool },
}

#[derive(Debug, Clone)]
struct Point {
    config: PointConfig,
    model: Model,
    fault: Option<String>,
    armed_for: Option<String>,
    rng: ChaCha8Rng,
}

/// Per-point seed, stable across runs and platforms.
pub fn point_seed(seed: u64, point_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(point_id.as_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().unwrap())
}

pub fn beam_of(point_id: &str) -> &str {
    point_id.split('/').next().unwrap_or(point_id)
}

#[derive(Debug, Clone)]
pub struct Fep {
    id: String,
    points: BTreeMap<String, Point>,
    now: SimTime,
    default_energy_j: f64,
    shots: BTreeMap<String, Vec<ShotDataRecord>>,
    published: BTreeMap<String, StatusReading>,
}

impl Fep {
    pub fn configure(config: &FepConfig, start: SimTime) -> Result<Fep, FepError> {
        let mut points = BTreeMap::new();
        for pc in &config.points {
            if points.contains_key(&pc.point_id) {
                return Err(FepError::DuplicatePointId(pc.point_id.clone()));
            }
            pc.params.validate().map_err(|reason| FepError::InvalidDeviceParams {
                point: pc.point_id.clone(),
                reason,
            })?;
            let model = match &pc.params {
                DeviceParams::StepperMotor {
                    rate,
                    soft_min,
                    soft_max,
                    initial,
                } => Model::Motor(MotorState::new(*rate, *soft_min, *soft_max, *initial)),
                DeviceParams::TransientDigitizer { .. } => Model::Digitizer { last: None },
                DeviceParams::Calorimeter { .. } => Model::Calorimeter { last: None },
                DeviceParams::Photodiode { .. } => Model::Photodiode,
                DeviceParams::Camera { .. } => Model::Camera,
                DeviceParams::Shutter { open } => Model::Shutter { open: *open },
            };
            points.insert(
                pc.point_id.clone(),
                Point {
                    config: pc.clone(),
                    model,
                    fault: None,
                    armed_for: None,
                    rng: ChaCha8Rng::seed_from_u64(point_seed(config.seed, &pc.point_id)),
                },
            );
        }
        for p in points.values() {
            if let DeviceParams::Camera { motors: Some((mx, my)), .. } = &p.config.params {
                for m in [mx, my] {
                    let ok = points
                        .get(m)
                        .is_some_and(|q| q.config.kind() == DeviceKind::StepperMotor);
                    if !ok {
                        return Err(FepError::InvalidDeviceParams {
                            point: p.config.point_id.clone(),
                            reason: format!("coupled motor {m} not on this FEP"),
                        });
                    }
                }
            }
        }
        Ok(Fep {
            id: config.fep_id.clone(),
            points,
            now: start,
            default_energy_j: config.default_energy_j,
            shots: BTreeMap::new(),
            published: BTreeMap::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn point_ids(&self) -> impl Iterator<Item = &str> {
        self.points.keys().map(String::as_str)
    }

    pub fn kind_of(&self, point_id: &str) -> Option<DeviceKind> {
        self.points.get(point_id).map(|p| p.config.kind())
    }

    pub fn cameras(&self) -> Vec<String> {
        self.points
            .values()
            .filter(|p| p.config.kind() == DeviceKind::Camera)
            .map(|p| p.config.point_id.clone())
            .collect()
    }

    fn point(&self, id: &str) -> Result<&Point, FepError> {
        self.points.get(id).ok_or_else(|| FepError::UnknownPoint(id.to_string()))
    }

    fn point_mut(&mut self, id: &str) -> Result<&mut Point, FepError> {
        self.points.get_mut(id).ok_or_else(|| FepError::UnknownPoint(id.to_string()))
    }

    pub fn apply_command(&mut self, point_id: &str, cmd: &PointCommand) -> Result<CommandAck, FepError> {
        let p = self.point_mut(point_id)?;
        let kind = p.config.kind();
        let mismatch = || FepError::KindMismatch {
            point: point_id.to_string(),
            kind: kind.as_str().to_string(),
            command: cmd.name().to_string(),
        };
        if let Some(reason) = &p.fault {
            return Err(FepError::PointFaulted {
                point: point_id.to_string(),
                reason: reason.clone(),
            });
        }
        match (&mut p.model, cmd) {
            (Model::Motor(m), PointCommand::MoveAbsolute { target }) => start(m, point_id, *target)?,
            (Model::Motor(m), PointCommand::MoveRelative { delta }) => {
                let target = m.position.saturating_add(*delta);
                start(m, point_id, target)?
            }
            (Model::Motor(m), PointCommand::Stop) => m.stop(),
            (Model::Shutter { open }, PointCommand::Open) => *open = true,
            (Model::Shutter { open }, PointCommand::Close) => *open = false,
            (Model::Digitizer { .. }, PointCommand::Arm { shot_id }) => {
                let shot_id = shot_id.clone();
                self.arm_for_shot(&shot_id, &[point_id.to_string()])?;
            }
            (Model::Digitizer { .. }, PointCommand::Disarm) => p.armed_for = None,
            _ => return Err(mismatch()),
        }
        Ok(CommandAck {
            point_id: point_id.to_string(),
            command: cmd.name().to_string(),
            accepted: true,
            value: self.reading(point_id)?.value,
        })
    }

    fn reading(&self, point_id: &str) -> Result<StatusReading, FepError> {
        let p = self.point(point_id)?;
        let mut health = Health::Ok;
        let mut reason = None;
        let value = match &p.model {
            Model::Motor(m) => {
                if let Some(r) = m.at_limit() {
                    health = Health::Warning;
                    reason = Some(r.to_string());
                }
                Value::Steps(m.position)
            }
            Model::Digitizer { last } => match last {
                Some(s) => Value::Summary(*s),
                None => Value::Armed(p.armed_for.clone()),
            },
            Model::Calorimeter { last } => Value::Scalar(last.unwrap_or(0.0)),
            Model::Photodiode => match &p.config.params {
                DeviceParams::Photodiode { power_w, .. } => Value::Scalar(*power_w),
                _ => unreachable!(),
            },
            Model::Camera => Value::Armed(p.armed_for.clone()),
            Model::Shutter { open } => Value::Open(*open),
        };
        if let Some(f) = &p.fault {
            health = Health::Fault;
            reason = Some(f.clone());
        }
        Ok(StatusReading {
            point_id: point_id.to_string(),
            value,
            health,
            reason,
            timestamp: self.now,
        })
    }

    pub fn sample_status(&self, point_id: &str) -> Result<StatusReading, FepError> {
        self.reading(point_id)
    }

    pub fn all_status(&self) -> Vec<StatusReading> {
        self.points.keys().map(|id| self.reading(id).unwrap()).collect()
    }

    /// Readings that differ from what was last handed out here; with
    /// `everything` set, all readings (heartbeat).
    pub fn take_changes(&mut self, everything: bool) -> Vec<StatusReading> {
        let mut out = Vec::new();
        for id in self.points.keys() {
            let r = self.reading(id).unwrap();
            let changed = self.published.get(id).is_none_or(|old| !old.same_state(&r));
            if changed || everything {
                out.push(r);
            }
        }
        for r in &out {
            self.published.insert(r.point_id.clone(), r.clone());
        }
        out
    }

    pub fn advance(&mut self, dt: Duration) -> Result<(), FepError> {
        if dt.is_zero() {
            return Err(FepError::InvalidDuration);
        }
        let ns = dt.as_nanos() as u64;
        for p in self.points.values_mut() {
            if let Model::Motor(m) = &mut p.model {
                m.advance(ns);
            }
        }
        self.now = self.now.add(dt);
        Ok(())
    }

    /// Arms every listed point for `shot_id`, or none of them.
    pub fn arm_for_shot(&mut self, shot_id: &str, points: &[String]) -> Result<Vec<String>, FepError> {
        for id in points {
            let p = self.point(id)?;
            if !p.config.kind().armable() {
                return Err(FepError::NotArmable(id.clone()));
            }
            if let Some(s) = &p.armed_for {
                if s != shot_id {
                    return Err(FepError::AlreadyArmed {
                        point: id.clone(),
                        shot: s.clone(),
                    });
                }
            }
        }
        for id in points {
            self.points.get_mut(id).unwrap().armed_for = Some(shot_id.to_string());
        }
        Ok(points.to_vec())
    }

    /// Disarms points armed for `shot_id` (all armed points when `None`).
    pub fn disarm(&mut self, shot_id: Option<&str>) -> Vec<String> {
        let mut out = Vec::new();
        for p in self.points.values_mut() {
            let hit = match (&p.armed_for, shot_id) {
                (Some(_), None) => true,
                (Some(a), Some(s)) => a == s,
                _ => false,
            };
            if hit {
                p.armed_for = None;
                out.push(p.config.point_id.clone());
            }
        }
        out
    }

    pub fn armed(&self) -> Vec<(String, String)> {
        self.points
            .values()
            .filter_map(|p| p.armed_for.clone().map(|s| (p.config.point_id.clone(), s)))
            .collect()
    }

    /// Fires `shot_id`: each point armed for it yields exactly one record and
    /// is disarmed. `offsets_ps` gives per-point fired times relative to T-0;
    /// `energies_j` the injected beam energy per beam id.
    pub fn trigger(
        &mut self,
        shot_id: &str,
        t0_ps: i64,
        offsets_ps: &BTreeMap<String, i64>,
        energies_j: &BTreeMap<String, f64>,
    ) -> usize {
        let coupled: BTreeMap<String, (f64, f64)> = self.camera_centers();
        let mut records = Vec::new();
        for p in self.points.values_mut() {
            if p.armed_for.as_deref() != Some(shot_id) {
                continue;
            }
            p.armed_for = None;
            let id = p.config.point_id.clone();
            let at = t0_ps + offsets_ps.get(&id).copied().unwrap_or(0);
            let (payload, summary) = match (&p.config.params, &mut p.model) {
                (
                    DeviceParams::TransientDigitizer {
                        sample_rate,
                        record_length,
                        waveform,
                        noise,
                    },
                    Model::Digitizer { last },
                ) => {
                    let samples = capture_waveform(*record_length, waveform, *noise, &mut p.rng);
                    let s = Summary::of_i16(&samples);
                    *last = s;
                    (
                        ShotPayload::Waveform {
                            sample_rate: *sample_rate,
                            samples,
                        },
                        s,
                    )
                }
                (DeviceParams::Calorimeter { noise }, Model::Calorimeter { last }) => {
                    let truth = energies_j.get(beam_of(&id)).copied().unwrap_or(self.default_energy_j);
                    let joules = read_energy(truth, *noise, &mut p.rng);
                    *last = Some(joules);
                    (ShotPayload::Energy { joules }, None)
                }
                (
                    DeviceParams::Camera {
                        width,
                        height,
                        sigma,
                        peak,
                        noise,
                        ..
                    },
                    Model::Camera,
                ) => {
                    let c = coupled[&id];
                    let frame = render_spot(*width, *height, c, *sigma, *peak, *noise, &mut p.rng);
                    let s = Summary::of_u16(&frame.pixels);
                    (ShotPayload::Image { frame }, s)
                }
                _ => continue,
            };
            records.push(ShotDataRecord {
                shot_id: shot_id.to_string(),
                point_id: id,
                kind: p.config.kind(),
                payload,
                summary,
                acquired_at_ps: at,
            });
        }
        let n = records.len();
        self.shots.entry(shot_id.to_string()).or_default().extend(records);
        n
    }

    pub fn read_shot_data(&self, shot_id: &str) -> Result<Vec<ShotDataRecord>, FepError> {
        self.shots
            .get(shot_id)
            .cloned()
            .ok_or_else(|| FepError::ShotUnknown(shot_id.to_string()))
    }

    fn camera_centers(&self) -> BTreeMap<String, (f64, f64)> {
        let pos = |id: &str| match self.points.get(id).map(|p| &p.model) {
            Some(Model::Motor(m)) => m.position as f64,
            _ => 0.0,
        };
        self.points
            .values()
            .filter_map(|p| match &p.config.params {
                DeviceParams::Camera {
                    center, motors, gain, ..
                } => {
                    let (mx, my) = motors.as_ref().map_or((0.0, 0.0), |(a, b)| (pos(a), pos(b)));
                    let c = (
                        center.0 + gain[0][0] * mx + gain[0][1] * my,
                        center.1 + gain[1][0] * mx + gain[1][1] * my,
                    );
                    Some((p.config.point_id.clone(), c))
                }
                _ => None,
            })
            .collect()
    }

    /// True spot center for a camera (test oracle).
    pub fn true_spot(&self, camera_id: &str) -> Option<(f64, f64)> {
        self.camera_centers().get(camera_id).copied()
    }

    /// Live frame; draws noise from the camera's stream.
    pub fn grab_frame(&mut self, camera_id: &str) -> Result<Frame, FepError> {
        let center = self.true_spot(camera_id);
        let p = self.point_mut(camera_id)?;
        match (&p.config.params, center) {
            (
                DeviceParams::Camera {
                    width,
                    height,
                    sigma,
                    peak,
                    noise,
                    ..
                },
                Some(c),
            ) => Ok(render_spot(*width, *height, c, *sigma, *peak, *noise, &mut p.rng)),
            _ => Err(FepError::KindMismatch {
                point: camera_id.to_string(),
                kind: p.config.kind().as_str().to_string(),
                command: "grab_frame".into(),
            }),
        }
    }

    pub fn motor(&self, point_id: &str) -> Option<&MotorState> {
        match self.points.get(point_id).map(|p| &p.model) {
            Some(Model::Motor(m)) => Some(m),
            _ => None,
        }
    }

    pub fn shutter_open(&self, point_id: &str) -> Option<bool> {
        match self.points.get(point_id).map(|p| &p.model) {
            Some(Model::Shutter { open }) => Some(*open),
            _ => None,
        }
    }

    pub fn inject_fault(&mut self, point_id: &str, reason: &str) -> Result<(), FepError> {
        let p = self.point_mut(point_id)?;
        p.fault = Some(if reason.is_empty() { "fault".into() } else { reason.into() });
        if let Model::Motor(m) = &mut p.model {
            m.stop();
        }
        Ok(())
    }

    pub fn clear_fault(&mut self, point_id: &str) -> Result<(), FepError> {
        self.point_mut(point_id)?.fault = None;
        Ok(())
    }

    /// Drives every shutter closed, stops motors and disarms everything.
    pub fn safe_state(&mut self) -> BTreeSet<String> {
        let mut touched = BTreeSet::new();
        for p in self.points.values_mut() {
            match &mut p.model {
                Model::Shutter { open } if *open => {
                    *open = false;
                    touched.insert(p.config.point_id.clone());
                }
                Model::Motor(m) if m.moving => {
                    m.stop();
                    touched.insert(p.config.point_id.clone());
                }
                _ => {}
            }
            if p.armed_for.take().is_some() {
                touched.insert(p.config.point_id.clone());
            }
        }
        touched
    }
}

fn start(m: &mut MotorState, point: &str, target: i64) -> Result<(), FepError> {
    m.start_move(target).map_err(|(min, max)| FepError::LimitViolation {
        point: point.to_string(),
        target,
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fep::devices::Waveform;

    fn motor(id: &str) -> PointConfig {
        PointConfig::new(
            id,
            DeviceParams::StepperMotor {
                rate: 50,
                soft_min: -10_000,
                soft_max: 10_000,
                initial: 0,
            },
        )
    }

    fn dig(id: &str) -> PointConfig {
        PointConfig::new(
            id,
            DeviceParams::TransientDigitizer {
                sample_rate: 1_000_000,
                record_length: 100,
                waveform: Waveform::Pulse {
                    amplitude: 1000.0,
                    center: 0.5,
                    width: 0.1,
                },
                noise: 0.01,
            },
        )
    }

    fn fep() -> Fep {
        let cfg = FepConfig::new(
            "f1",
            vec![
                motor("beam01/mx"),
                motor("beam01/my"),
                dig("beam01/dig0"),
                dig("beam01/dig1"),
                dig("beam01/dig2"),
                PointConfig::new("beam01/cal", DeviceParams::default_for(DeviceKind::Calorimeter)),
                PointConfig::new("beam01/shutter", DeviceParams::default_for(DeviceKind::Shutter)),
            ],
        );
        Fep::configure(&cfg, SimTime::ZERO).unwrap()
    }

    #[test]
    fn configure_and_duplicates() {
        let f = fep();
        assert_eq!(f.point_ids().count(), 7);
        let cfg = FepConfig::new("f", vec![motor("a/b"), motor("a/b")]);
        assert_eq!(
            Fep::configure(&cfg, SimTime::ZERO).unwrap_err(),
            FepError::DuplicatePointId("a/b".into())
        );
        let bad = FepConfig::new(
            "f",
            vec![PointConfig::new(
                "a/b",
                DeviceParams::StepperMotor {
                    rate: 0,
                    soft_min: 0,
                    soft_max: 1,
                    initial: 0,
                },
            )],
        );
        assert!(matches!(
            Fep::configure(&bad, SimTime::ZERO),
            Err(FepError::InvalidDeviceParams { .. })
        ));
    }

    #[test]
    fn move_relative_and_limits() {
        let mut f = fep();
        f.apply_command("beam01/mx", &PointCommand::MoveRelative { delta: 100 }).unwrap();
        f.advance(Duration::from_secs(2)).unwrap();
        assert_eq!(f.sample_status("beam01/mx").unwrap().value, Value::Steps(100));
        let err = f
            .apply_command("beam01/mx", &PointCommand::MoveAbsolute { target: 1_000_000 })
            .unwrap_err();
        assert!(matches!(err, FepError::LimitViolation { .. }));
        assert_eq!(f.motor("beam01/mx").unwrap().position, 100);
        assert_eq!(
            f.advance(Duration::ZERO).unwrap_err(),
            FepError::InvalidDuration
        );
    }

    #[test]
    fn motor_at_limit_warns() {
        let mut f = fep();
        f.apply_command("beam01/mx", &PointCommand::MoveAbsolute { target: 10_000 }).unwrap();
        f.advance(Duration::from_secs(300)).unwrap();
        let _ = f.apply_command("beam01/mx", &PointCommand::MoveRelative { delta: 1 });
        let r = f.sample_status("beam01/mx").unwrap();
        assert_eq!(r.health, Health::Warning);
        assert!(r.reason.unwrap().contains("limit"));
    }

    #[test]
    fn kind_mismatch() {
        let mut f = fep();
        let err = f
            .apply_command("beam01/cal", &PointCommand::Arm { shot_id: "s".into() })
            .unwrap_err();
        assert!(matches!(err, FepError::KindMismatch { .. }));
        assert!(matches!(
            f.apply_command("nope", &PointCommand::Stop),
            Err(FepError::UnknownPoint(_))
        ));
    }

    #[test]
    fn arm_trigger_read() {
        let mut f = fep();
        let digs: Vec<String> = (0..3).map(|i| format!("beam01/dig{i}")).collect();
        f.arm_for_shot("A", &digs).unwrap();
        assert!(matches!(
            f.arm_for_shot("B", &digs[..1]),
            Err(FepError::AlreadyArmed { .. })
        ));
        assert!(matches!(
            f.arm_for_shot("A", &["beam01/mx".to_string()]),
            Err(FepError::NotArmable(_))
        ));
        assert_eq!(f.read_shot_data("A").unwrap_err(), FepError::ShotUnknown("A".into()));
        assert_eq!(f.trigger("A", 0, &BTreeMap::new(), &BTreeMap::new()), 3);
        let recs = f.read_shot_data("A").unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            match &r.payload {
                ShotPayload::Waveform { samples, .. } => assert_eq!(samples.len(), 100),
                p => panic!("{p:?}"),
            }
        }
        assert_eq!(f.read_shot_data("A").unwrap(), recs);
        assert!(f.armed().is_empty());
    }

    #[test]
    fn unarmed_point_produces_nothing() {
        let mut f = fep();
        f.arm_for_shot("A", &["beam01/dig0".to_string()]).unwrap();
        f.trigger("A", 0, &BTreeMap::new(), &BTreeMap::new());
        let recs = f.read_shot_data("A").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].point_id, "beam01/dig0");
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut f = fep();
            f.arm_for_shot("S", &["beam01/dig0".into(), "beam01/cal".into()]).unwrap();
            f.apply_command("beam01/mx", &PointCommand::MoveRelative { delta: 40 }).unwrap();
            f.advance(Duration::from_millis(700)).unwrap();
            f.trigger("S", 5, &BTreeMap::new(), &BTreeMap::from([("beam01".into(), 500.0)]));
            serde_json::to_vec(&f.read_shot_data("S").unwrap()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn camera_follows_motors() {
        let cam = PointConfig::new(
            "beam01/cam",
            DeviceParams::Camera {
                width: 64,
                height: 64,
                center: (20.0, 30.0),
                sigma: 2.0,
                peak: 1000.0,
                noise: 0.0,
                motors: Some(("beam01/mx".into(), "beam01/my".into())),
                gain: [[0.1, 0.0], [0.0, -0.05]],
            },
        );
        let cfg = FepConfig::new("f", vec![motor("beam01/mx"), motor("beam01/my"), cam]);
        let mut f = Fep::configure(&cfg, SimTime::ZERO).unwrap();
        f.apply_command("beam01/mx", &PointCommand::MoveRelative { delta: 50 }).unwrap();
        f.apply_command("beam01/my", &PointCommand::MoveRelative { delta: 20 }).unwrap();
        f.advance(Duration::from_secs(1)).unwrap();
        assert_eq!(f.true_spot("beam01/cam"), Some((25.0, 29.0)));
        let frame = f.grab_frame("beam01/cam").unwrap();
        assert_eq!(frame.get(25, 29), 1000);
        assert!(frame.pixels.iter().map(|&p| p as u64).sum::<u64>() > 0);
    }

    #[test]
    fn camera_with_foreign_motor_rejected() {
        let cam = PointConfig::new(
            "beam01/cam",
            DeviceParams::Camera {
                width: 8,
                height: 8,
                center: (4.0, 4.0),
                sigma: 1.0,
                peak: 10.0,
                noise: 0.0,
                motors: Some(("beam09/mx".into(), "beam09/my".into())),
                gain: [[1.0, 0.0], [0.0, 1.0]],
            },
        );
        let cfg = FepConfig::new("f", vec![cam]);
        assert!(matches!(
            Fep::configure(&cfg, SimTime::ZERO),
            Err(FepError::InvalidDeviceParams { .. })
        ));
    }

    #[test]
    fn change_detection_and_fault() {
        let mut f = fep();
        assert_eq!(f.take_changes(false).len(), 7);
        assert!(f.take_changes(false).is_empty());
        f.inject_fault("beam01/cal", "overtemp").unwrap();
        let ch = f.take_changes(false);
        assert_eq!(ch.len(), 1);
        assert_eq!(ch[0].health, Health::Fault);
        assert_eq!(f.take_changes(true).len(), 7);
    }

    #[test]
    fn safe_state_closes_and_disarms() {
        let mut f = fep();
        f.apply_command("beam01/shutter", &PointCommand::Open).unwrap();
        f.arm_for_shot("S", &["beam01/dig0".into()]).unwrap();
        let touched = f.safe_state();
        assert!(touched.contains("beam01/shutter") && touched.contains("beam01/dig0"));
        assert_eq!(f.shutter_open("beam01/shutter"), Some(false));
        assert!(f.armed().is_empty());
    }
}
