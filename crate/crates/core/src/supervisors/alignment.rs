//! Closed-loop beam alignment: camera centroid error corrected through the
//! inverse of a 2×2 motor-to-pixel gain model.

use serde::{Deserialize, Serialize};

use super::centroid::{compute_centroid, CentroidError};
use crate::fep::Frame;
use crate::wire::ErrorKind;

pub type Gain = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub beam_id: String,
    pub camera_id: String,
    pub motor_x: String,
    pub motor_y: String,
    pub target_centroid: (f64, f64),
    /// Pixels per motor step.
    pub gain_matrix: Gain,
    pub tolerance: f64,
    pub max_iterations: u32,
    pub max_condition: f64,
}

impl AlignmentConfig {
    pub fn new(beam_id: &str, target: (f64, f64), gain: Gain) -> Self {
        AlignmentConfig {
            beam_id: beam_id.to_string(),
            camera_id: format!("{beam_id}/cam"),
            motor_x: format!("{beam_id}/mx"),
            motor_y: format!("{beam_id}/my"),
            target_centroid: target,
            gain_matrix: gain,
            tolerance: 0.1,
            max_iterations: 10,
            max_condition: 1e3,
        }
    }

    pub fn validate(&self) -> Result<Gain, AlignError> {
        if !(self.tolerance > 0.0) {
            return Err(AlignError::InvalidConfig("tolerance must be positive".into()));
        }
        let inv = invert(&self.gain_matrix).ok_or_else(|| AlignError::InvalidConfig("gain matrix is singular".into()))?;
        let cond = condition(&self.gain_matrix);
        if !(cond <= self.max_condition) {
            return Err(AlignError::InvalidConfig(format!(
                "gain condition number {cond:.1} above {}",
                self.max_condition
            )));
        }
        Ok(inv)
    }
}

pub fn invert(g: &Gain) -> Option<Gain> {
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([[g[1][1] / det, -g[0][1] / det], [-g[1][0] / det, g[0][0] / det]])
}

pub fn mul(g: &Gain, v: (f64, f64)) -> (f64, f64) {
    (g[0][0] * v.0 + g[0][1] * v.1, g[1][0] * v.0 + g[1][1] * v.1)
}

/// Singular values of a 2×2 matrix, largest first.
pub fn singular_values(g: &Gain) -> (f64, f64) {
    let (a, b, c, d) = (g[0][0], g[0][1], g[1][0], g[1][1]);
    let s1 = a * a + b * b + c * c + d * d;
    let det = (a * d - b * c).abs();
    let disc = (s1 * s1 - 4.0 * det * det).max(0.0).sqrt();
    (((s1 + disc) / 2.0).sqrt(), ((s1 - disc) / 2.0).max(0.0).sqrt())
}

pub fn condition(g: &Gain) -> f64 {
    let (hi, lo) = singular_values(g);
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStep {
    pub centroid: (f64, f64),
    pub error_norm: f64,
    /// Steps commanded after this measurement; `None` on the final one.
    pub motor_moves: Option<(i64, i64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrace {
    pub beam_id: String,
    pub iterations: Vec<AlignmentStep>,
    pub converged: bool,
}

impl AlignmentTrace {
    pub fn corrections(&self) -> usize {
        self.iterations.iter().filter(|s| s.motor_moves.is_some()).count()
    }

    pub fn error_norms(&self) -> Vec<f64> {
        self.iterations.iter().map(|s| s.error_norm).collect()
    }

    pub fn final_error(&self) -> Option<f64> {
        self.iterations.last().map(|s| s.error_norm)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum AlignError {
    #[error("reservation on {0} not held")]
    ReservationMissing(String),
    #[error("device fault: {0}")]
    DeviceFault(String),
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Centroid(#[from] CentroidError),
}

impl ErrorKind for AlignError {
    fn kind(&self) -> &'static str {
        match self {
            AlignError::ReservationMissing(_) => "ReservationMissing",
            AlignError::DeviceFault(_) => "DeviceFault",
            AlignError::InvalidConfig(_) => "InvalidConfig",
            AlignError::Centroid(_) => "ZeroIntensity",
        }
    }
}

/// What the loop needs from the outside world.
pub trait AlignmentRig {
    fn grab(&mut self) -> Result<Frame, AlignError>;
    /// Commands relative moves and returns once both motors have stopped.
    fn move_by(&mut self, dx: i64, dy: i64) -> Result<(), AlignError>;
    fn progress(&mut self, _step: &AlignmentStep) {}
}

pub fn run_alignment(config: &AlignmentConfig, rig: &mut dyn AlignmentRig) -> Result<AlignmentTrace, AlignError> {
    let inv = config.validate()?;
    let mut trace = AlignmentTrace {
        beam_id: config.beam_id.clone(),
        iterations: Vec::new(),
        converged: false,
    };
    loop {
        let c = compute_centroid(&rig.grab()?)?;
        let e = (config.target_centroid.0 - c.0, config.target_centroid.1 - c.1);
        let norm = e.0.hypot(e.1);
        let mut step = AlignmentStep {
            centroid: c,
            error_norm: norm,
            motor_moves: None,
        };
        if norm <= config.tolerance {
            trace.converged = true;
        } else if trace.corrections() < config.max_iterations as usize {
            let s = mul(&inv, e);
            step.motor_moves = Some((s.0.round() as i64, s.1.round() as i64));
        }
        rig.progress(&step);
        let moves = step.motor_moves;
        trace.iterations.push(step);
        match moves {
            Some((dx, dy)) => rig.move_by(dx, dy)?,
            None => return Ok(trace),
        }
    }
}

/// Stand-alone optical bench: a camera looking at a spot whose position is
/// `base + true_gain · motors`.
#[derive(Debug, Clone)]
pub struct BenchRig {
    pub base: (f64, f64),
    pub true_gain: Gain,
    pub motors: (i64, i64),
    pub size: (u16, u16),
    pub sigma: f64,
    pub peak: f64,
    pub noise: f64,
    pub soft_limit: i64,
    rng: rand_chacha::ChaCha8Rng,
}

impl BenchRig {
    pub fn new(base: (f64, f64), true_gain: Gain, seed: u64) -> Self {
        use rand::SeedableRng;
        BenchRig {
            base,
            true_gain,
            motors: (0, 0),
            size: (64, 64),
            sigma: 2.5,
            peak: 60_000.0,
            noise: 0.0,
            soft_limit: i64::MAX,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn spot(&self) -> (f64, f64) {
        let d = mul(&self.true_gain, (self.motors.0 as f64, self.motors.1 as f64));
        (self.base.0 + d.0, self.base.1 + d.1)
    }
}

impl AlignmentRig for BenchRig {
    fn grab(&mut self) -> Result<Frame, AlignError> {
        let c = self.spot();
        Ok(crate::fep::devices::render_spot(
            self.size.0,
            self.size.1,
            c,
            self.sigma,
            self.peak,
            self.noise,
            &mut self.rng,
        ))
    }

    fn move_by(&mut self, dx: i64, dy: i64) -> Result<(), AlignError> {
        let (x, y) = (self.motors.0 + dx, self.motors.1 + dy);
        if x.abs() > self.soft_limit || y.abs() > self.soft_limit {
            return Err(AlignError::DeviceFault(format!("motor limit hit moving to ({x}, {y})")));
        }
        self.motors = (x, y);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TARGET: (f64, f64) = (32.0, 32.0);

    fn scaled(g: Gain, k: f64) -> Gain {
        [[g[0][0] * k, g[0][1] * k], [g[1][0] * k, g[1][1] * k]]
    }

    #[test]
    fn already_aligned() {
        let g = [[0.01, 0.0], [0.0, 0.01]];
        let mut rig = BenchRig::new(TARGET, g, 0);
        let t = run_alignment(&AlignmentConfig::new("b", TARGET, g), &mut rig).unwrap();
        assert!(t.converged);
        assert_eq!(t.corrections(), 0);
    }

    #[test]
    fn exact_gain_one_step() {
        let g = [[0.01, 0.002], [-0.001, 0.012]];
        let mut rig = BenchRig::new((TARGET.0 - 5.0, TARGET.1 + 3.0), g, 0);
        let t = run_alignment(&AlignmentConfig::new("b", TARGET, g), &mut rig).unwrap();
        assert!(t.converged);
        assert_eq!(t.corrections(), 1);
        assert!(t.final_error().unwrap() <= 0.1);
    }

    #[test]
    fn overestimated_gain_contracts_by_a_tenth() {
        let g = [[0.001, 0.0], [0.0, 0.001]];
        let mut rig = BenchRig::new((TARGET.0 - 10.0, TARGET.1), g, 0);
        let mut cfg = AlignmentConfig::new("b", TARGET, scaled(g, 1.1));
        cfg.tolerance = 0.01;
        let t = run_alignment(&cfg, &mut rig).unwrap();
        assert!(t.converged);
        assert!(t.corrections() <= 4, "{}", t.corrections());
        let n = t.error_norms();
        // the model step covers 1/1.1 of the error, leaving 1/11 of it
        for w in n.windows(2) {
            let expect = w[0] / 11.0;
            assert!((w[1] - expect).abs() < 1e-3, "{} vs {}", w[1], expect);
            assert!(w[1] <= 0.1 * w[0] + 1e-3);
        }
    }

    #[test]
    fn limit_hit_is_device_fault() {
        let g = [[0.01, 0.0], [0.0, 0.01]];
        let mut rig = BenchRig::new((TARGET.0 - 10.0, TARGET.1), g, 0);
        rig.soft_limit = 100;
        let err = run_alignment(&AlignmentConfig::new("b", TARGET, g), &mut rig).unwrap_err();
        assert!(matches!(err, AlignError::DeviceFault(_)));
    }

    #[test]
    fn singular_gain_rejected() {
        let cfg = AlignmentConfig::new("b", TARGET, [[1.0, 2.0], [2.0, 4.0]]);
        assert!(matches!(cfg.validate(), Err(AlignError::InvalidConfig(_))));
        let mut cfg = AlignmentConfig::new("b", TARGET, [[1.0, 0.0], [0.0, 1.0]]);
        cfg.tolerance = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn non_convergence_is_reported() {
        let g = [[0.01, 0.0], [0.0, 0.01]];
        let mut rig = BenchRig::new((TARGET.0 - 10.0, TARGET.1), g, 0);
        // model gain 2.5x too small: every step overshoots by 1.5x
        let mut cfg = AlignmentConfig::new("b", TARGET, scaled(g, 0.4));
        cfg.max_iterations = 5;
        let t = run_alignment(&cfg, &mut rig).unwrap();
        assert!(!t.converged);
        assert_eq!(t.corrections(), 5);
        assert_eq!(t.iterations.len(), 6);
    }

    #[test]
    fn singular_value_oracle() {
        // diag(3, 2) rotated has the same singular values
        let (c, s) = (0.6f64, 0.8f64);
        let g = [[3.0 * c, -2.0 * s], [3.0 * s, 2.0 * c]];
        let (hi, lo) = singular_values(&g);
        assert!((hi - 3.0).abs() < 1e-12 && (lo - 2.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn contraction_bound(ox in -15.0f64..15.0, oy in -15.0f64..15.0, rho in 0.0f64..0.5) {
            let g = [[0.001, 0.0], [0.0, 0.001]];
            let mut rig = BenchRig::new((TARGET.0 + ox, TARGET.1 + oy), g, 0);
            // model gain (1 + rho) too large leaves rho / (1 + rho) of the error
            let mut cfg = AlignmentConfig::new("b", TARGET, scaled(g, 1.0 + rho));
            cfg.tolerance = 0.01;
            cfg.max_iterations = 30;
            let t = run_alignment(&cfg, &mut rig).unwrap();
            prop_assert!(t.converged);
            for w in t.error_norms().windows(2) {
                prop_assert!(w[1] <= rho * w[0] + 2e-3, "{} -> {}", w[0], w[1]);
            }
        }
    }
}
