//! Deterministic device models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    StepperMotor,
    TransientDigitizer,
    Calorimeter,
    Photodiode,
    Camera,
    Shutter,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 6] = [
        DeviceKind::StepperMotor,
        DeviceKind::TransientDigitizer,
        DeviceKind::Calorimeter,
        DeviceKind::Photodiode,
        DeviceKind::Camera,
        DeviceKind::Shutter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceKind::StepperMotor => "stepper_motor",
            DeviceKind::TransientDigitizer => "transient_digitizer",
            DeviceKind::Calorimeter => "calorimeter",
            DeviceKind::Photodiode => "photodiode",
            DeviceKind::Camera => "camera",
            DeviceKind::Shutter => "shutter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        DeviceKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn armable(self) -> bool {
        matches!(
            self,
            DeviceKind::TransientDigitizer | DeviceKind::Calorimeter | DeviceKind::Camera
        )
    }

    pub fn default_units(self) -> &'static str {
        match self {
            DeviceKind::StepperMotor => "steps",
            DeviceKind::TransientDigitizer => "counts",
            DeviceKind::Calorimeter => "J",
            DeviceKind::Photodiode => "W",
            DeviceKind::Camera => "counts",
            DeviceKind::Shutter => "open",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Waveform {
    /// Gaussian pulse; center and width as fractions of the record.
    Pulse {
        amplitude: f64,
        center: f64,
        width: f64,
    },
    Sine {
        amplitude: f64,
        cycles: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviceParams {
    StepperMotor {
        rate: u64,
        soft_min: i64,
        soft_max: i64,
        initial: i64,
    },
    TransientDigitizer {
        sample_rate: u64,
        record_length: usize,
        waveform: Waveform,
        /// Noise standard deviation as a fraction of amplitude.
        noise: f64,
    },
    Calorimeter {
        /// Relative standard deviation of the reading.
        noise: f64,
    },
    Photodiode {
        power_w: f64,
        noise: f64,
    },
    Camera {
        width: u16,
        height: u16,
        /// Spot center with both coupled motors at zero.
        center: (f64, f64),
        sigma: f64,
        peak: f64,
        /// Uniform noise amplitude as a fraction of peak.
        noise: f64,
        /// Motors steering the spot, and pixels per step (row-major 2x2).
        motors: Option<(String, String)>,
        gain: [[f64; 2]; 2],
    },
    Shutter {
        open: bool,
    },
}

impl DeviceParams {
    pub fn kind(&self) -> DeviceKind {
        match self {
            DeviceParams::StepperMotor { .. } => DeviceKind::StepperMotor,
            DeviceParams::TransientDigitizer { .. } => DeviceKind::TransientDigitizer,
            DeviceParams::Calorimeter { .. } => DeviceKind::Calorimeter,
            DeviceParams::Photodiode { .. } => DeviceKind::Photodiode,
            DeviceParams::Camera { .. } => DeviceKind::Camera,
            DeviceParams::Shutter { .. } => DeviceKind::Shutter,
        }
    }

    /// Reasonable defaults per kind.
    pub fn default_for(kind: DeviceKind) -> Self {
        match kind {
            DeviceKind::StepperMotor => DeviceParams::StepperMotor {
                rate: 2000,
                soft_min: -100_000,
                soft_max: 100_000,
                initial: 0,
            },
            DeviceKind::TransientDigitizer => DeviceParams::TransientDigitizer {
                sample_rate: 1_000_000_000,
                record_length: 256,
                waveform: Waveform::Pulse {
                    amplitude: 8000.0,
                    center: 0.4,
                    width: 0.05,
                },
                noise: 0.01,
            },
            DeviceKind::Calorimeter => DeviceParams::Calorimeter { noise: 0.01 },
            DeviceKind::Photodiode => DeviceParams::Photodiode {
                power_w: 1.0,
                noise: 0.01,
            },
            DeviceKind::Camera => DeviceParams::Camera {
                width: 64,
                height: 64,
                center: (32.0, 32.0),
                sigma: 3.0,
                peak: 4000.0,
                noise: 0.0,
                motors: None,
                gain: [[0.01, 0.0], [0.0, 0.01]],
            },
            DeviceKind::Shutter => DeviceParams::Shutter { open: false },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match self {
            DeviceParams::StepperMotor {
                rate,
                soft_min,
                soft_max,
                initial,
            } => *rate > 0 && soft_min <= soft_max && (soft_min..=soft_max).contains(&initial),
            DeviceParams::TransientDigitizer {
                sample_rate,
                record_length,
                noise,
                ..
            } => *sample_rate > 0 && *record_length > 0 && *noise >= 0.0,
            DeviceParams::Calorimeter { noise } => *noise >= 0.0 && noise.is_finite(),
            DeviceParams::Photodiode { power_w, noise } => *power_w >= 0.0 && *noise >= 0.0,
            DeviceParams::Camera {
                width,
                height,
                sigma,
                peak,
                noise,
                gain,
                ..
            } => {
                *width > 0
                    && *height > 0
                    && *sigma > 0.0
                    && *peak > 0.0
                    && *noise >= 0.0
                    && gain.iter().flatten().all(|g| g.is_finite())
            }
            DeviceParams::Shutter { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid {} parameters", self.kind().as_str()))
        }
    }
}

/// Constant-rate integer motion. Position is a pure function of the move
/// start and elapsed nanoseconds, so split advances compose exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotorState {
    pub position: i64,
    pub target: i64,
    pub rate: u64,
    pub soft_limits: (i64, i64),
    pub moving: bool,
    move_from: i64,
    move_elapsed_ns: u64,
}

impl MotorState {
    pub fn new(rate: u64, soft_min: i64, soft_max: i64, initial: i64) -> Self {
        MotorState {
            position: initial,
            target: initial,
            rate,
            soft_limits: (soft_min, soft_max),
            moving: false,
            move_from: initial,
            move_elapsed_ns: 0,
        }
    }

    pub fn start_move(&mut self, target: i64) -> Result<(), (i64, i64)> {
        let (lo, hi) = self.soft_limits;
        if target < lo || target > hi {
            return Err(self.soft_limits);
        }
        self.target = target;
        self.move_from = self.position;
        self.move_elapsed_ns = 0;
        self.moving = target != self.position;
        Ok(())
    }

    pub fn stop(&mut self) {
        self.target = self.position;
        self.moving = false;
    }

    pub fn advance(&mut self, dt_ns: u64) {
        if !self.moving {
            return;
        }
        self.move_elapsed_ns += dt_ns;
        let distance = self.target.abs_diff(self.move_from);
        let travelled = (self.rate as u128 * self.move_elapsed_ns as u128 / 1_000_000_000) as u64;
        let step = travelled.min(distance) as i64;
        self.position = self.move_from + step * (self.target - self.move_from).signum();
        if travelled >= distance {
            self.moving = false;
        }
    }

    pub fn at_limit(&self) -> Option<&'static str> {
        if self.position == self.soft_limits.0 {
            Some("at soft limit min")
        } else if self.position == self.soft_limits.1 {
            Some("at soft limit max")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of_i16(samples: &[i16]) -> Option<Summary> {
        let min = *samples.iter().min()? as f64;
        let max = *samples.iter().max()? as f64;
        let mean = samples.iter().map(|&s| s as i64).sum::<i64>() as f64 / samples.len() as f64;
        Some(Summary { min, max, mean })
    }

    pub fn of_u16(samples: &[u16]) -> Option<Summary> {
        let min = *samples.iter().min()? as f64;
        let max = *samples.iter().max()? as f64;
        let mean = samples.iter().map(|&s| s as u64).sum::<u64>() as f64 / samples.len() as f64;
        Some(Summary { min, max, mean })
    }
}

pub fn capture_waveform(
    record_length: usize,
    waveform: &Waveform,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<i16> {
    let n = record_length as f64;
    let amp = match waveform {
        Waveform::Pulse { amplitude, .. } | Waveform::Sine { amplitude, .. } => *amplitude,
    };
    let normal = Normal::new(0.0, (noise * amp).abs()).expect("finite sigma");
    (0..record_length)
        .map(|i| {
            let x = i as f64 / n;
            let clean = match waveform {
                Waveform::Pulse {
                    amplitude,
                    center,
                    width,
                } => amplitude * (-((x - center) / width).powi(2)).exp(),
                Waveform::Sine { amplitude, cycles } => amplitude * (std::f64::consts::TAU * cycles * x).sin(),
            };
            let v = clean + normal.sample(rng);
            v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect()
}

pub fn read_energy(true_energy: f64, noise: f64, rng: &mut ChaCha8Rng) -> f64 {
    let n = Normal::new(0.0, noise).expect("finite sigma");
    true_energy * (1.0 + n.sample(rng))
}

/// Intensity frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub width: u16,
    pub height: u16,
    pub pixels: Vec<u16>,
}

impl Frame {
    /// `u16 BE width, u16 BE height, then u16 BE pixels row-major`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.pixels.len() * 2);
        out.extend_from_slice(&self.width.to_be_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
        for p in &self.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Frame> {
        let width = u16::from_be_bytes(bytes.get(0..2)?.try_into().ok()?);
        let height = u16::from_be_bytes(bytes.get(2..4)?.try_into().ok()?);
        let n = width as usize * height as usize;
        let body = bytes.get(4..)?;
        if body.len() != n * 2 {
            return None;
        }
        let pixels = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        Some(Frame { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width as usize + x]
    }
}

pub fn render_spot(
    width: u16,
    height: u16,
    center: (f64, f64),
    sigma: f64,
    peak: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Frame {
    let two_s2 = 2.0 * sigma * sigma;
    let mut pixels = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        let dy = y as f64 - center.1;
        for x in 0..width {
            let dx = x as f64 - center.0;
            let mut v = peak * (-(dx * dx + dy * dy) / two_s2).exp();
            if noise > 0.0 {
                v += noise * peak * rng.random::<f64>();
            }
            pixels.push(v.round().clamp(0.0, u16::MAX as f64) as u16);
        }
    }
    Frame { width, height, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn relative_move_kinematics() {
        let mut m = MotorState::new(50, -10_000, 10_000, 0);
        m.start_move(100).unwrap();
        m.advance(2_000_000_000);
        assert_eq!(m.position, 100);
        assert!(!m.moving);
    }

    #[test]
    fn limit_violation_leaves_position() {
        let mut m = MotorState::new(50, -10_000, 10_000, 7);
        assert_eq!(m.start_move(1_000_000), Err((-10_000, 10_000)));
        assert_eq!(m.position, 7);
        assert!(!m.moving);
    }

    #[test]
    fn frame_codec() {
        let f = Frame {
            width: 2,
            height: 1,
            pixels: vec![1, 0x0203],
        };
        let b = f.encode();
        assert_eq!(b, vec![0, 2, 0, 1, 0, 1, 2, 3]);
        assert_eq!(Frame::decode(&b), Some(f));
        assert_eq!(Frame::decode(&b[..7]), None);
    }

    #[test]
    fn waveform_is_seeded() {
        let w = Waveform::Pulse {
            amplitude: 1000.0,
            center: 0.5,
            width: 0.1,
        };
        let a = capture_waveform(128, &w, 0.02, &mut ChaCha8Rng::seed_from_u64(1));
        let b = capture_waveform(128, &w, 0.02, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.len(), 128);
        let s = Summary::of_i16(&a).unwrap();
        assert!(s.max > 900.0 && s.max < 1100.0);
    }

    #[test]
    fn calorimeter_noise_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..4000).map(|_| read_energy(100.0, 0.01, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((mean - 100.0).abs() < 0.1);
        assert!((sd - 1.0).abs() < 0.1);
    }

    proptest! {
        #[test]
        fn split_advances_compose(rate in 1u64..5000, start in -1000i64..1000, target in -5000i64..5000, a in 0u64..3_000_000_000, b in 0u64..3_000_000_000) {
            let mut one = MotorState::new(rate, -5000, 5000, start);
            let mut two = one.clone();
            one.start_move(target).unwrap();
            two.start_move(target).unwrap();
            one.advance(a + b);
            two.advance(a);
            let mid = two.position;
            two.advance(b);
            prop_assert_eq!(one.position, two.position);
            prop_assert!((mid - start).unsigned_abs() as u128 <= rate as u128 * a as u128 / 1_000_000_000);
            prop_assert!(one.position >= -5000 && one.position <= 5000);
        }
    }
}
