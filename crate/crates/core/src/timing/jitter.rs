use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{validate, TimingError, TriggerSchedule};
use crate::timing::report::FiredRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum JitterModel {
    Zero,
    /// Uniform integer error on `[-bound_ps, bound_ps]`.
    BoundedUniform { bound_ps: u64 },
    /// Approximately normal error with standard deviation `sigma_ps`,
    /// resampled until `|error| <= bound_ps`.
    GaussianTruncated { sigma_ps: u64, bound_ps: u64 },
}

impl JitterModel {
    pub fn bound_ps(&self) -> u64 {
        match *self {
            JitterModel::Zero => 0,
            JitterModel::BoundedUniform { bound_ps } => bound_ps,
            JitterModel::GaussianTruncated { bound_ps, .. } => bound_ps,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> i64 {
        match *self {
            JitterModel::Zero => 0,
            JitterModel::BoundedUniform { bound_ps } => {
                let b = bound_ps as i64;
                rng.random_range(-b..=b)
            }
            JitterModel::GaussianTruncated { sigma_ps, bound_ps } => {
                if sigma_ps == 0 {
                    return 0;
                }
                // Irwin-Hall: twelve uniforms on [-50s, 50s] sum to variance (100s)^2.
                let a = 50 * sigma_ps as i64;
                let b = bound_ps as i64;
                loop {
                    let sum: i64 = (0..12).map(|_| rng.random_range(-a..=a)).sum();
                    let x = div_round(sum, 100);
                    if x.abs() <= b {
                        return x;
                    }
                }
            }
        }
    }
}

/// Integer division rounding half away from zero.
fn div_round(n: i64, d: i64) -> i64 {
    let q = n / d;
    let r = n % d;
    if 2 * r.abs() >= d {
        q + n.signum()
    } else {
        q
    }
}

/// Fires every entry once. Records come back ordered by fired time, ties by
/// channel id. Identical `(schedule, model, seed)` give identical output.
pub fn execute(schedule: &TriggerSchedule, model: JitterModel, seed: u64) -> Result<Vec<FiredRecord>, TimingError> {
    let violations = validate(schedule);
    if !violations.is_empty() {
        return Err(TimingError::InvalidSchedule(violations));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<FiredRecord> = schedule
        .entries
        .iter()
        .map(|e| FiredRecord {
            channel_id: e.channel_id.clone(),
            scheduled_ps: e.offset_ps,
            fired_ps: e.offset_ps + model.sample(&mut rng),
        })
        .collect();
    out.sort_by(|a, b| a.fired_ps.cmp(&b.fired_ps).then_with(|| a.channel_id.cmp(&b.channel_id)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timing::{build_schedule, TimingLimits, TriggerRequest};
    use proptest::prelude::*;

    fn full_schedule() -> TriggerSchedule {
        let reqs = (0..1600)
            .map(|i| TriggerRequest::new(format!("diag{i:04}"), -800_000_000_000 + i * 1_000_003, 5000))
            .collect();
        build_schedule("shot", reqs, TimingLimits::default()).unwrap()
    }

    #[test]
    fn zero_model_is_identity() {
        let s = full_schedule();
        for r in execute(&s, JitterModel::Zero, 1).unwrap() {
            assert_eq!(r.fired_ps, r.scheduled_ps);
        }
    }

    #[test]
    fn uniform_bound_over_full_schedule() {
        let s = full_schedule();
        let recs = execute(&s, JitterModel::BoundedUniform { bound_ps: 30 }, 42).unwrap();
        assert_eq!(recs.len(), 1600);
        assert!(recs.iter().all(|r| (r.fired_ps - r.scheduled_ps).abs() <= 30));
        assert!(recs.iter().any(|r| r.fired_ps != r.scheduled_ps));
    }

    #[test]
    fn same_seed_same_output() {
        let s = full_schedule();
        let m = JitterModel::GaussianTruncated { sigma_ps: 10, bound_ps: 30 };
        assert_eq!(execute(&s, m, 9).unwrap(), execute(&s, m, 9).unwrap());
        assert_ne!(execute(&s, m, 9).unwrap(), execute(&s, m, 10).unwrap());
    }

    #[test]
    fn gaussian_spread_is_plausible() {
        let s = full_schedule();
        let m = JitterModel::GaussianTruncated { sigma_ps: 10, bound_ps: 1000 };
        let recs = execute(&s, m, 3).unwrap();
        let n = recs.len() as f64;
        let var = recs
            .iter()
            .map(|r| ((r.fired_ps - r.scheduled_ps) as f64).powi(2))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        assert!((8.5..11.5).contains(&sd), "sd {sd}");
    }

    #[test]
    fn invalid_schedule_rejected() {
        let mut s = full_schedule();
        s.entries.push(s.entries[0].clone());
        assert!(matches!(
            execute(&s, JitterModel::Zero, 0),
            Err(TimingError::InvalidSchedule(_))
        ));
    }

    #[test]
    fn div_round_cases() {
        assert_eq!(div_round(150, 100), 2);
        assert_eq!(div_round(-150, 100), -2);
        assert_eq!(div_round(149, 100), 1);
        assert_eq!(div_round(-49, 100), 0);
    }

    fn model() -> impl Strategy<Value = JitterModel> {
        prop_oneof![
            Just(JitterModel::Zero),
            (0u64..200).prop_map(|b| JitterModel::BoundedUniform { bound_ps: b }),
            (0u64..50, 0u64..200).prop_map(|(s, b)| JitterModel::GaussianTruncated { sigma_ps: s, bound_ps: b }),
        ]
    }

    proptest! {
        #[test]
        fn declared_bound_holds(m in model(), seed in any::<u64>(), n in 1usize..64) {
            let reqs = (0..n).map(|i| TriggerRequest::new(format!("c{i}"), (i as i64 - 30) * 7, 1)).collect();
            let s = build_schedule("p", reqs, TimingLimits::default()).unwrap();
            let recs = execute(&s, m, seed).unwrap();
            prop_assert_eq!(recs.len(), n);
            for r in &recs {
                prop_assert!((r.fired_ps - r.scheduled_ps).unsigned_abs() <= m.bound_ps());
            }
            for w in recs.windows(2) {
                prop_assert!((w[0].fired_ps, &w[0].channel_id) <= (w[1].fired_ps, &w[1].channel_id));
            }
        }
    }
}
