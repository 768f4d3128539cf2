//! Facility configuration files.
//!
//! One directive per line, `#` starts a comment. Parameters are `key=value`.
//!
//! ```text
//! facility desk8
//! beams 8
//! seed 42
//! heartbeat 2s
//! scale points 45000
//! budget alert_delivery 1s
//! fep fep01
//! template dig transient_digitizer record_length=128
//! point fep01 beam01/cam camera center=35,29 motors=beam01/mx,beam01/my
//! point fep01 beam01/mx stepper_motor
//! fill fep01 beam01/d 36 dig
//! plc_input beam01/door true
//! chain power/pc01/charge beam01/door=true facility/estop=true
//! slow beam01/vac000 vacuum_pressure value=1e-6 tau=30 bounds=0,1e-3
//! slow_fill beam01/t 63 air_temp value=21 tau=600 bounds=15,30
//! supervisor sup/power_conditioning power
//! charge_module sup/power_conditioning pc01 12000
//! owns sup/beam_control beam01/cam beam01/mx beam01/my
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{parse_duration, SimTime};
use crate::fep::{DeviceKind, DeviceParams, Fep, FepConfig, PointConfig, Waveform};
use crate::plc::{InterlockInput, Literal, PermissiveChain, PlcSegment, SlowChannel, SlowKind};

/// Beams in the full-scale facility the scale rule divides by.
pub const FULL_SCALE_BEAMS: u64 = 192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisorKind {
    Status,
    Power,
    Diagnostics,
    Lpom,
    BeamControl,
}

impl SupervisorKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "status" => SupervisorKind::Status,
            "power" => SupervisorKind::Power,
            "diagnostics" => SupervisorKind::Diagnostics,
            "lpom" => SupervisorKind::Lpom,
            "beam_control" => SupervisorKind::BeamControl,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisorConfig {
    pub name: String,
    pub kind: SupervisorKind,
    /// Point-id prefixes making up this supervisor's subsystem.
    pub owns: Vec<String>,
    /// Power modules and their charge targets in volts.
    pub charge_modules: BTreeMap<String, f64>,
    /// Alignment target centroid, beam control only.
    pub target: (f64, f64),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlcConfig {
    pub inputs: Vec<InterlockInput>,
    pub chains: Vec<PermissiveChain>,
    pub channels: Vec<SlowChannel>,
    pub scan_period: Duration,
}

impl PlcConfig {
    pub fn point_count(&self) -> usize {
        self.inputs.len() + self.chains.len() + self.channels.len()
    }

    pub fn segment(&self) -> Result<PlcSegment, String> {
        let mut seg = PlcSegment::new();
        for i in &self.inputs {
            seg.add_input(i.clone()).map_err(|e| e.to_string())?;
        }
        for c in &self.channels {
            seg.add_channel(c.clone()).map_err(|e| e.to_string())?;
        }
        for c in &self.chains {
            seg.add_chain(c.clone()).map_err(|e| e.to_string())?;
        }
        Ok(seg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityConfig {
    pub name: String,
    pub beams: u64,
    pub seed: u64,
    pub heartbeat: Duration,
    pub feps: Vec<FepConfig>,
    pub plc: PlcConfig,
    pub supervisors: Vec<SupervisorConfig>,
    /// Full-facility totals to scale, by quantity name.
    pub scale: BTreeMap<String, u64>,
    pub budgets: BTreeMap<String, Duration>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}, {field}: {message}")]
    Parse { line: usize, field: String, message: String },
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

impl FacilityConfig {
    pub fn point_count(&self) -> usize {
        self.feps.iter().map(|f| f.points.len()).sum()
    }

    pub fn points(&self) -> impl Iterator<Item = (&str, &PointConfig)> {
        self.feps
            .iter()
            .flat_map(|f| f.points.iter().map(move |p| (f.fep_id.as_str(), p)))
    }

    pub fn count_kind(&self, kind: DeviceKind) -> usize {
        self.points().filter(|(_, p)| p.kind() == kind).count()
    }

    /// Components this configuration instantiates as separate systems:
    /// FEPs, supervisors, the director, the PLC segment, the timing system
    /// and the four framework services.
    pub fn system_count(&self) -> usize {
        self.feps.len() + self.supervisors.len() + 1 + 1 + 1 + 4
    }

    pub fn budget(&self, name: &str) -> Option<Duration> {
        self.budgets.get(name).copied()
    }

    /// Where each count comes from: full-facility total x beams / 192,
    /// rounded, against what this configuration actually has.
    pub fn scale_note(&self) -> String {
        let actual = |q: &str| -> Option<usize> {
            Some(match q {
                "points" => self.point_count(),
                "plc_points" => self.plc.point_count(),
                "feps" => self.feps.len(),
                "cameras" => self.count_kind(DeviceKind::Camera),
                "systems" => self.system_count(),
                _ => return None,
            })
        };
        let mut out = String::new();
        for (q, total) in &self.scale {
            let scaled = scaled(*total, self.beams);
            out += &format!("{q}: {total} x {}/{FULL_SCALE_BEAMS} = {scaled}", self.beams);
            if let Some(a) = actual(q) {
                out += &format!(", configured {a}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn scaled(total: u64, beams: u64) -> u64 {
    (total * beams + FULL_SCALE_BEAMS / 2) / FULL_SCALE_BEAMS
}

pub fn default_budgets() -> BTreeMap<String, Duration> {
    BTreeMap::from([
        ("alert_delivery".to_string(), Duration::from_secs(1)),
        ("status_propagation".to_string(), Duration::from_secs(10)),
        ("command_round_trip".to_string(), Duration::from_millis(100)),
        ("video_frame_interval".to_string(), Duration::from_millis(100)),
        ("recovery_elapsed".to_string(), Duration::from_secs(30)),
        ("restart_elapsed".to_string(), Duration::from_secs(10)),
    ])
}

struct Parser {
    cfg: FacilityConfig,
    templates: BTreeMap<String, (DeviceKind, Vec<(String, String)>)>,
    fep_index: BTreeMap<String, usize>,
    sup_index: BTreeMap<String, usize>,
    line: usize,
}

type Kv = Vec<(String, String)>;

impl Parser {
    fn err(&self, field: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Parse {
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn split_kv(&self, fields: &[&str]) -> Result<(Vec<String>, Kv), ConfigError> {
        let mut pos = Vec::new();
        let mut kv = Vec::new();
        for f in fields {
            match f.split_once('=') {
                Some((k, v)) if !k.is_empty() && !k.contains('/') => kv.push((k.to_string(), v.to_string())),
                _ => pos.push(f.to_string()),
            }
        }
        Ok((pos, kv))
    }

    fn num<T: std::str::FromStr>(&self, field: &str, s: &str) -> Result<T, ConfigError> {
        s.parse().map_err(|_| self.err(field, format!("not a number: {s:?}")))
    }

    fn pair(&self, field: &str, s: &str) -> Result<(f64, f64), ConfigError> {
        let (a, b) = s.split_once(',').ok_or_else(|| self.err(field, "expected a,b"))?;
        Ok((self.num(field, a)?, self.num(field, b)?))
    }

    fn device(&self, kind: DeviceKind, kv: &Kv) -> Result<DeviceParams, ConfigError> {
        let mut p = DeviceParams::default_for(kind);
        for (k, v) in kv {
            let k = k.as_str();
            match &mut p {
                DeviceParams::StepperMotor {
                    rate,
                    soft_min,
                    soft_max,
                    initial,
                } => match k {
                    "rate" => *rate = self.num(k, v)?,
                    "min" => *soft_min = self.num(k, v)?,
                    "max" => *soft_max = self.num(k, v)?,
                    "initial" => *initial = self.num(k, v)?,
                    _ => return Err(self.err(k, "unknown motor parameter")),
                },
                DeviceParams::TransientDigitizer {
                    sample_rate,
                    record_length,
                    waveform,
                    noise,
                } => match k {
                    "sample_rate" => *sample_rate = self.num(k, v)?,
                    "record_length" => *record_length = self.num(k, v)?,
                    "noise" => *noise = self.num(k, v)?,
                    "amplitude" => {
                        let a = self.num(k, v)?;
                        match waveform {
                            Waveform::Pulse { amplitude, .. } | Waveform::Sine { amplitude, .. } => *amplitude = a,
                        }
                    }
                    _ => return Err(self.err(k, "unknown digitizer parameter")),
                },
                DeviceParams::Calorimeter { noise } => match k {
                    "noise" => *noise = self.num(k, v)?,
                    _ => return Err(self.err(k, "unknown calorimeter parameter")),
                },
                DeviceParams::Photodiode { power_w, noise } => match k {
                    "power" => *power_w = self.num(k, v)?,
                    "noise" => *noise = self.num(k, v)?,
                    _ => return Err(self.err(k, "unknown photodiode parameter")),
                },
                DeviceParams::Camera {
                    width,
                    height,
                    center,
                    sigma,
                    peak,
                    noise,
                    motors,
                    gain,
                } => match k {
                    "width" => *width = self.num(k, v)?,
                    "height" => *height = self.num(k, v)?,
                    "center" => *center = self.pair(k, v)?,
                    "sigma" => *sigma = self.num(k, v)?,
                    "peak" => *peak = self.num(k, v)?,
                    "noise" => *noise = self.num(k, v)?,
                    "motors" => {
                        let (a, b) = v.split_once(',').ok_or_else(|| self.err(k, "expected mx,my"))?;
                        *motors = Some((a.to_string(), b.to_string()));
                    }
                    "gain" => {
                        let g: Vec<f64> = v
                            .split(',')
                            .map(|x| self.num(k, x))
                            .collect::<Result<_, _>>()?;
                        if g.len() != 4 {
                            return Err(self.err(k, "expected four values"));
                        }
                        *gain = [[g[0], g[1]], [g[2], g[3]]];
                    }
                    _ => return Err(self.err(k, "unknown camera parameter")),
                },
                DeviceParams::Shutter { open } => match k {
                    "open" => *open = self.num(k, v)?,
                    _ => return Err(self.err(k, "unknown shutter parameter")),
                },
            }
        }
        Ok(p)
    }

    fn kind_or_template(&self, name: &str, kv: Kv) -> Result<(DeviceKind, Kv), ConfigError> {
        if let Some(k) = DeviceKind::parse(name) {
            return Ok((k, kv));
        }
        let (k, base) = self
            .templates
            .get(name)
            .ok_or_else(|| self.err("kind", format!("unknown kind or template {name:?}")))?;
        let mut merged = base.clone();
        merged.extend(kv);
        Ok((*k, merged))
    }

    fn add_point(&mut self, fep: &str, id: String, kind: DeviceKind, kv: &Kv) -> Result<(), ConfigError> {
        let params = self.device(kind, kv)?;
        let i = *self
            .fep_index
            .get(fep)
            .ok_or_else(|| self.err("fep", format!("unknown fep {fep:?}")))?;
        self.cfg.feps[i].points.push(PointConfig::new(id, params));
        Ok(())
    }

    fn sup(&mut self, name: &str) -> Result<&mut SupervisorConfig, ConfigError> {
        let i = *self
            .sup_index
            .get(name)
            .ok_or_else(|| self.err("supervisor", format!("unknown supervisor {name:?}")))?;
        Ok(&mut self.cfg.supervisors[i])
    }

    fn slow(&self, id: String, kv: &Kv, kind: &str) -> Result<SlowChannel, ConfigError> {
        let kind = SlowKind::parse(kind).ok_or_else(|| self.err("kind", format!("unknown slow kind {kind:?}")))?;
        let mut value = 0.0;
        let mut tau = 60.0;
        let mut bounds = (f64::MIN, f64::MAX);
        for (k, v) in kv {
            match k.as_str() {
                "value" => value = self.num(k, v)?,
                "tau" => tau = self.num(k, v)?,
                "bounds" => bounds = self.pair(k, v)?,
                _ => return Err(self.err(k, "unknown slow channel parameter")),
            }
        }
        Ok(SlowChannel::new(id, kind, value, tau, bounds))
    }

    fn directive(&mut self, fields: &[&str]) -> Result<(), ConfigError> {
        let (pos, kv) = self.split_kv(&fields[1..])?;
        let arity = |n: usize| -> Result<(), ConfigError> {
            if pos.len() < n {
                Err(self.err(fields[0], format!("expected {n} arguments")))
            } else {
                Ok(())
            }
        };
        match fields[0] {
            "facility" => {
                arity(1)?;
                self.cfg.name = pos[0].clone();
            }
            "beams" => {
                arity(1)?;
                self.cfg.beams = self.num("beams", &pos[0])?;
            }
            "seed" => {
                arity(1)?;
                self.cfg.seed = self.num("seed", &pos[0])?;
            }
            "heartbeat" => {
                arity(1)?;
                self.cfg.heartbeat = parse_duration(&pos[0]).ok_or_else(|| self.err("heartbeat", "bad duration"))?;
            }
            "scan_period" => {
                arity(1)?;
                self.cfg.plc.scan_period =
                    parse_duration(&pos[0]).ok_or_else(|| self.err("scan_period", "bad duration"))?;
            }
            "scale" => {
                arity(2)?;
                let total = self.num("total", &pos[1])?;
                self.cfg.scale.insert(pos[0].clone(), total);
            }
            "budget" => {
                arity(2)?;
                let d = parse_duration(&pos[1]).ok_or_else(|| self.err(&pos[0], "bad duration"))?;
                self.cfg.budgets.insert(pos[0].clone(), d);
            }
            "fep" => {
                arity(1)?;
                let mut f = FepConfig::new(pos[0].clone(), Vec::new());
                f.seed = self.cfg.seed;
                for (k, v) in &kv {
                    match k.as_str() {
                        "seed" => f.seed = self.num(k, v)?,
                        "energy" => f.default_energy_j = self.num(k, v)?,
                        _ => return Err(self.err(k, "unknown fep parameter")),
                    }
                }
                if self.fep_index.contains_key(&f.fep_id) {
                    return Err(ConfigError::Validation(format!("duplicate fep id {}", f.fep_id)));
                }
                self.fep_index.insert(f.fep_id.clone(), self.cfg.feps.len());
                self.cfg.feps.push(f);
            }
            "template" => {
                arity(2)?;
                let kind = DeviceKind::parse(&pos[1]).ok_or_else(|| self.err("kind", format!("unknown kind {:?}", pos[1])))?;
                self.device(kind, &kv)?;
                self.templates.insert(pos[0].clone(), (kind, kv));
            }
            "point" => {
                arity(3)?;
                let (kind, kv) = self.kind_or_template(&pos[2], kv)?;
                self.add_point(&pos[0], pos[1].clone(), kind, &kv)?;
            }
            "fill" => {
                arity(4)?;
                let n: usize = self.num("count", &pos[2])?;
                let (kind, kv) = self.kind_or_template(&pos[3], kv)?;
                for i in 0..n {
                    self.add_point(&pos[0], format!("{}{i:03}", pos[1]), kind, &kv)?;
                }
            }
            "plc_input" => {
                arity(2)?;
                let safe = self.num("safe", &pos[1])?;
                self.cfg.plc.inputs.push(InterlockInput::new(pos[0].clone(), safe));
            }
            "chain" => {
                arity(1)?;
                if kv.is_empty() && pos.len() < 2 {
                    return Err(self.err("chain", "no literals"));
                }
                let mut required = Vec::new();
                for lit in &fields[2..] {
                    let (id, v) = lit
                        .rsplit_once('=')
                        .ok_or_else(|| self.err("literal", format!("expected input=bool, got {lit:?}")))?;
                    required.push(Literal {
                        input_id: id.to_string(),
                        required: self.num("literal", v)?,
                    });
                }
                self.cfg.plc.chains.push(PermissiveChain {
                    action_id: pos[0].clone(),
                    required,
                });
            }
            "slow" => {
                arity(2)?;
                let ch = self.slow(pos[0].clone(), &kv, &pos[1])?;
                self.cfg.plc.channels.push(ch);
            }
            "slow_fill" => {
                arity(3)?;
                let n: usize = self.num("count", &pos[1])?;
                for i in 0..n {
                    let ch = self.slow(format!("{}{i:03}", pos[0]), &kv, &pos[2])?;
                    self.cfg.plc.channels.push(ch);
                }
            }
            "supervisor" => {
                arity(2)?;
                let kind =
                    SupervisorKind::parse(&pos[1]).ok_or_else(|| self.err("kind", format!("unknown supervisor kind {:?}", pos[1])))?;
                let mut s = SupervisorConfig {
                    name: pos[0].clone(),
                    kind,
                    owns: Vec::new(),
                    charge_modules: BTreeMap::new(),
                    target: (32.0, 32.0),
                };
                for (k, v) in &kv {
                    match k.as_str() {
                        "target" => s.target = self.pair(k, v)?,
                        _ => return Err(self.err(k, "unknown supervisor parameter")),
                    }
                }
                if self.sup_index.contains_key(&s.name) {
                    return Err(ConfigError::Validation(format!("duplicate supervisor {}", s.name)));
                }
                self.sup_index.insert(s.name.clone(), self.cfg.supervisors.len());
                self.cfg.supervisors.push(s);
            }
            "owns" => {
                arity(2)?;
                let prefixes = pos[1..].to_vec();
                self.sup(&pos[0])?.owns.extend(prefixes);
            }
            "charge_module" => {
                arity(3)?;
                let v: f64 = self.num("volts", &pos[2])?;
                let m = pos[1].clone();
                self.sup(&pos[0])?.charge_modules.insert(m, v);
            }
            other => return Err(self.err(other, "unknown directive")),
        }
        Ok(())
    }
}

/// Parses and validates a configuration. Pure: the same text always gives
/// the same value.
pub fn parse_config(text: &str) -> Result<FacilityConfig, ConfigError> {
    let mut p = Parser {
        cfg: FacilityConfig {
            name: "facility".into(),
            beams: 0,
            seed: 0,
            heartbeat: Duration::from_secs(2),
            feps: Vec::new(),
            plc: PlcConfig {
                scan_period: crate::plc::DEFAULT_SCAN_PERIOD,
                ..PlcConfig::default()
            },
            supervisors: Vec::new(),
            scale: BTreeMap::new(),
            budgets: default_budgets(),
        },
        templates: BTreeMap::new(),
        fep_index: BTreeMap::new(),
        sup_index: BTreeMap::new(),
        line: 0,
    };
    for (i, raw) in text.lines().enumerate() {
        p.line = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        p.directive(&fields)?;
    }
    validate(&p.cfg)?;
    Ok(p.cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<FacilityConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}

pub fn validate(cfg: &FacilityConfig) -> Result<(), ConfigError> {
    let bad = |m: String| Err(ConfigError::Validation(m));
    if cfg.beams == 0 {
        return bad("beams must be positive".into());
    }
    if let Some((name, _)) = cfg.budgets.iter().find(|(_, d)| d.is_zero()) {
        return bad(format!("budget {name} must be positive"));
    }
    if cfg.heartbeat.is_zero() || cfg.plc.scan_period.is_zero() {
        return bad("heartbeat and scan_period must be positive".into());
    }
    let mut ids = BTreeSet::new();
    for (_, p) in cfg.points() {
        if !ids.insert(p.point_id.as_str()) {
            return bad(format!("duplicate point id {}", p.point_id));
        }
        if p.point_id.split('/').count() != 2 || p.point_id.split('/').any(str::is_empty) {
            return bad(format!("point id {} must have two segments", p.point_id));
        }
    }
    for f in &cfg.feps {
        Fep::configure(f, SimTime::ZERO).map_err(|e| ConfigError::Validation(format!("{}: {e}", f.fep_id)))?;
    }
    let mut plc_ids = BTreeSet::new();
    for id in cfg
        .plc
        .inputs
        .iter()
        .map(|i| &i.input_id)
        .chain(cfg.plc.chains.iter().map(|c| &c.action_id))
        .chain(cfg.plc.channels.iter().map(|c| &c.channel_id))
    {
        if !plc_ids.insert(id.as_str()) {
            return bad(format!("duplicate plc id {id}"));
        }
    }
    cfg.plc.segment().map_err(ConfigError::Validation)?;
    let mut modules = BTreeSet::new();
    for s in &cfg.supervisors {
        if !s.name.starts_with("sup/") || s.name.split('/').count() != 2 {
            return bad(format!("supervisor name {} must be sup/<name>", s.name));
        }
        for m in s.charge_modules.keys() {
            if !modules.insert(m.as_str()) {
                return bad(format!("duplicate charge module {m}"));
            }
            if !cfg.plc.chains.iter().any(|c| c.action_id == crate::supervisors::charge_permissive(m)) {
                return bad(format!("no chain {} for module {m}", crate::supervisors::charge_permissive(m)));
            }
        }
        for o in &s.owns {
            if !cfg.points().any(|(_, p)| p.point_id.starts_with(o.as_str())) {
                return bad(format!("{} owns {o}, which matches no point", s.name));
            }
        }
    }
    Ok(())
}
