//! Decay schedules for the probability of feeding the true previous token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps the mini-batch index `i` to `ε_i`, the probability of feeding the
/// ground-truth previous token.
///
/// Construct through [`DecaySchedule::validate`] (or deserialize and then
/// validate); `epsilon_at` assumes a valid schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DecaySchedule {
    /// `max(epsilon, k - c·i)`
    Linear {
        k: f64,
        c: f64,
        epsilon: f64,
    },
    /// `k^i`
    Exponential {
        k: f64,
    },
    /// `k / (k + exp(i / k))`
    InverseSigmoid {
        k: f64,
    },
    Constant {
        epsilon: f64,
    },
    /// Straight line from `epsilon_start` at `i = 0` to `epsilon_end` at
    /// `i = ramp_steps`, flat afterwards.
    LinearRamp {
        epsilon_start: f64,
        epsilon_end: f64,
        ramp_steps: u64,
    },
}

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl DecaySchedule {
    pub fn linear(k: f64, c: f64, epsilon: f64) -> Result<Self> {
        DecaySchedule::Linear { k, c, epsilon }.validate()
    }

    pub fn exponential(k: f64) -> Result<Self> {
        DecaySchedule::Exponential { k }.validate()
    }

    pub fn inverse_sigmoid(k: f64) -> Result<Self> {
        DecaySchedule::InverseSigmoid { k }.validate()
    }

    pub fn constant(epsilon: f64) -> Result<Self> {
        DecaySchedule::Constant { epsilon }.validate()
    }

    pub fn linear_ramp(epsilon_start: f64, epsilon_end: f64, ramp_steps: u64) -> Result<Self> {
        DecaySchedule::LinearRamp {
            epsilon_start,
            epsilon_end,
            ramp_steps,
        }
        .validate()
    }

    pub fn validate(self) -> Result<Self> {
        let ok = match self {
            // k above 1 would push the value out of [0, 1]; c < 0 would grow
            DecaySchedule::Linear { k, c, epsilon } => {
                (0.0..1.0).contains(&epsilon) && in_unit(k) && c >= 0.0 && c.is_finite()
            }
            DecaySchedule::Exponential { k } => k > 0.0 && k < 1.0,
            DecaySchedule::InverseSigmoid { k } => k >= 1.0 && k.is_finite(),
            DecaySchedule::Constant { epsilon } => in_unit(epsilon),
            DecaySchedule::LinearRamp {
                epsilon_start,
                epsilon_end,
                ramp_steps,
            } => {
                in_unit(epsilon_start)
                    && in_unit(epsilon_end)
                    && epsilon_end <= epsilon_start
                    && ramp_steps >= 1
            }
        };
        if ok {
            Ok(self)
        } else {
            Err(Error::config(format!("invalid decay schedule {self:?}")))
        }
    }

    pub fn epsilon_at(&self, i: u64) -> f64 {
        let x = i as f64;
        match *self {
            DecaySchedule::Linear { k, c, epsilon } => epsilon.max(k - c * x),
            DecaySchedule::Exponential { k } => k.powf(x),
            DecaySchedule::InverseSigmoid { k } => k / (k + (x / k).exp()),
            DecaySchedule::Constant { epsilon } => epsilon,
            DecaySchedule::LinearRamp {
                epsilon_start,
                epsilon_end,
                ramp_steps,
            } => {
                if i >= ramp_steps {
                    epsilon_end
                } else {
                    let frac = x / ramp_steps as f64;
                    epsilon_start + (epsilon_end - epsilon_start) * frac
                }
            }
        }
    }

    /// Value approached as `i → ∞`.
    pub fn limit(&self) -> f64 {
        match *self {
            DecaySchedule::Linear { epsilon, c, k } => {
                if c > 0.0 {
                    epsilon
                } else {
                    epsilon.max(k)
                }
            }
            DecaySchedule::Exponential { .. } | DecaySchedule::InverseSigmoid { .. } => 0.0,
            DecaySchedule::Constant { epsilon } => epsilon,
            DecaySchedule::LinearRamp { epsilon_end, .. } => epsilon_end,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn point_values() {
        let exp = DecaySchedule::exponential(0.99).unwrap();
        assert_eq!(exp.epsilon_at(0), 1.0);
        // 0.99^100 = 0.366032341273229... (evaluated with 50-digit arithmetic)
        assert!((exp.epsilon_at(100) - 0.366_032_341_273_229_3).abs() < 1e-12);
        assert_eq!(
            DecaySchedule::inverse_sigmoid(1.0).unwrap().epsilon_at(0),
            0.5
        );
        let lin = DecaySchedule::linear(1.0, 0.005, 0.1).unwrap();
        assert!((lin.epsilon_at(50) - 0.75).abs() < 1e-15);
        assert_eq!(lin.epsilon_at(500), 0.1);
        let ramp = DecaySchedule::linear_ramp(0.9, 0.5, 10).unwrap();
        assert!((ramp.epsilon_at(5) - 0.7).abs() < 1e-15);
        assert_eq!(ramp.epsilon_at(10), 0.5);
        assert_eq!(ramp.epsilon_at(1000), 0.5);
    }

    #[test]
    fn rejects_invalid() {
        assert!(DecaySchedule::exponential(1.0).is_err());
        assert!(DecaySchedule::exponential(0.0).is_err());
        assert!(DecaySchedule::inverse_sigmoid(0.5).is_err());
        assert!(DecaySchedule::linear(1.0, 0.01, 1.0).is_err());
        assert!(DecaySchedule::constant(1.5).is_err());
        assert!(DecaySchedule::linear_ramp(0.5, 0.9, 10).is_err());
        assert!(DecaySchedule::linear_ramp(0.9, 0.5, 0).is_err());
    }

    #[test]
    fn config_schema() {
        let s: DecaySchedule =
            serde_json::from_str(r#"{"type":"inverse_sigmoid","k":20.0}"#).unwrap();
        assert_eq!(s, DecaySchedule::InverseSigmoid { k: 20.0 });
        let s: DecaySchedule = serde_json::from_str(
            r#"{"type":"linear_ramp","epsilon_start":0.25,"epsilon_end":0.0,"ramp_steps":100}"#,
        )
        .unwrap();
        assert_eq!(s.epsilon_at(100), 0.0);
        let json = serde_json::to_string(&DecaySchedule::Linear {
            k: 1.0,
            c: 0.1,
            epsilon: 0.2,
        })
        .unwrap();
        assert_eq!(json, r#"{"type":"linear","k":1.0,"c":0.1,"epsilon":0.2}"#);
    }

    fn any_schedule() -> impl Strategy<Value = DecaySchedule> {
        prop_oneof![
            (0.0f64..=1.0, 0.0f64..0.1, 0.0f64..0.99)
                .prop_map(|(k, c, epsilon)| DecaySchedule::Linear { k, c, epsilon }),
            (0.5f64..0.99999).prop_map(|k| DecaySchedule::Exponential { k }),
            (1.0f64..5000.0).prop_map(|k| DecaySchedule::InverseSigmoid { k }),
            (0.0f64..=1.0).prop_map(|epsilon| DecaySchedule::Constant { epsilon }),
            (0.0f64..=1.0, 0.0f64..=1.0, 1u64..10_000).prop_map(|(a, b, n)| {
                DecaySchedule::LinearRamp {
                    epsilon_start: a.max(b),
                    epsilon_end: a.min(b),
                    ramp_steps: n,
                }
            }),
        ]
    }

    proptest! {
        #[test]
        fn monotone_and_in_range(s in any_schedule(), i in 0u64..200_000) {
            let s = s.validate().unwrap();
            let a = s.epsilon_at(i);
            let b = s.epsilon_at(i + 1);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b <= a, "{s:?} at {i}: {a} -> {b}");
        }
    }
}
