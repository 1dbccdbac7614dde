//! Mapping knowledge-awareness to a sampling temperature.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dist::KlMode;
use crate::error::{Error, Result};
use crate::ka::{KaParams, LayerSet};
use crate::real::Real;

pub const DEFAULT_T_MIN: f64 = 0.05;
pub const DEFAULT_T_MAX: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    /// Ignores KA, always `t0`. The fixed-temperature baseline.
    Fixed,
    Linear,
    Sigmoid,
    #[default]
    Exponential,
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformKind::Fixed => "fixed",
            TransformKind::Linear => "linear",
            TransformKind::Sigmoid => "sigmoid",
            TransformKind::Exponential => "exponential",
        })
    }
}

/// `sigma * ka + t0`.
pub fn linear_focus<F: Real>(ka: F, sigma: F, t0: F) -> F {
    sigma * ka + t0
}

/// `sigma / (sigma + exp(ka / sigma)) + t0`. An overflowing exponential
/// drives the fraction to zero.
pub fn sigmoid_focus<F: Real>(ka: F, sigma: F, t0: F) -> F {
    let e = (ka / sigma).exp();
    if e.is_infinite() {
        return t0;
    }
    sigma / (sigma + e) + t0
}

/// `t0 * 2^(-ka / sigma)`: `sigma` is the half-life in nats of KA.
pub fn exponential_focus<F: Real>(ka: F, sigma: F, t0: F) -> F {
    t0 * (F::LN_2() * -ka / sigma).exp()
}

/// Unclamped transform value.
pub fn raw_temperature<F: Real>(kind: TransformKind, ka: F, sigma: F, t0: F) -> F {
    match kind {
        TransformKind::Fixed => t0,
        TransformKind::Linear => linear_focus(ka, sigma, t0),
        TransformKind::Sigmoid => sigmoid_focus(ka, sigma, t0),
        TransformKind::Exponential => exponential_focus(ka, sigma, t0),
    }
}

/// The `t0` that makes `kind` map the sample mean of KA to exactly 1.
pub fn calibrate_t0<F: Real>(ka_samples: &[F], sigma: F, kind: TransformKind) -> Result<F> {
    if ka_samples.is_empty() {
        return Err(Error::Calibration("no KA samples collected".into()));
    }
    if ka_samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Calibration("non-finite KA sample".into()));
    }
    let mean = ka_samples.iter().copied().sum::<F>() / F::of(ka_samples.len() as f64);
    let t0 = match kind {
        TransformKind::Fixed => F::one(),
        TransformKind::Linear => F::one() - sigma * mean,
        TransformKind::Sigmoid => {
            let e = (mean / sigma).exp();
            if e.is_infinite() {
                F::one()
            } else {
                F::one() - sigma / (sigma + e)
            }
        }
        TransformKind::Exponential => (F::LN_2() * mean / sigma).exp(),
    };
    Ok(t0)
}

/// Everything needed to turn one step's logits into a temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusConfig<F> {
    pub transform: TransformKind,
    pub sigma: F,
    pub t0: F,
    pub t_min: F,
    pub t_max: F,
    pub layer_set: LayerSet,
    pub alpha: F,
    pub kl_mode: KlMode,
    pub q_floor: F,
}

impl<F: Real> Default for FocusConfig<F> {
    fn default() -> Self {
        let ka = KaParams::<F>::default();
        Self {
            transform: TransformKind::Exponential,
            sigma: F::one(),
            t0: F::one(),
            t_min: F::of(DEFAULT_T_MIN),
            t_max: F::of(DEFAULT_T_MAX),
            layer_set: ka.layers,
            alpha: ka.alpha,
            kl_mode: ka.mode,
            q_floor: ka.q_floor,
        }
    }
}

impl<F: Real> FocusConfig<F> {
    /// The fixed-temperature baseline at `t0`.
    pub fn fixed(t0: F) -> Self {
        Self {
            transform: TransformKind::Fixed,
            t0,
            ..Self::default()
        }
    }

    /// Checks invariants. On success returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if !(self.t_min > F::zero()) || !(self.t_max >= self.t_min) || !self.t_max.is_finite() {
            return Err(Error::config(
                "limits.t_min",
                format!("need 0 < t_min <= t_max, got t_min={} t_max={}", self.t_min, self.t_max),
            ));
        }
        if !(self.t0 > F::zero()) || !self.t0.is_finite() {
            return Err(Error::config("focus.t0", format!("must be positive, got {}", self.t0)));
        }
        if !self.sigma.is_finite() {
            return Err(Error::config("focus.sigma", "must be finite"));
        }
        match self.transform {
            TransformKind::Fixed => {}
            TransformKind::Linear => {
                if self.sigma == F::zero() {
                    return Err(Error::config("focus.sigma", "must be nonzero for the linear transform"));
                }
                if self.sigma > F::zero() {
                    warnings.push(format!(
                        "focus.sigma = {} is positive: the linear transform will raise the temperature as KA grows",
                        self.sigma
                    ));
                }
            }
            TransformKind::Sigmoid | TransformKind::Exponential => {
                if !(self.sigma > F::zero()) {
                    return Err(Error::config(
                        "focus.sigma",
                        format!(
                            "must be positive for the {} transform, got {}",
                            self.transform, self.sigma
                        ),
                    ));
                }
                if self.transform == TransformKind::Sigmoid && self.sigma >= F::one() {
                    warnings.push(format!(
                        "focus.sigma = {} >= 1; the sigmoid transform expects sigma < 1",
                        self.sigma
                    ));
                }
            }
        }
        if !(self.alpha > F::zero() && self.alpha <= F::one()) {
            return Err(Error::config(
                "focus.alpha",
                format!("must lie in (0, 1], got {}", self.alpha),
            ));
        }
        if !(self.q_floor > F::zero()) {
            return Err(Error::config("focus.q_floor", "must be positive"));
        }
        Ok(warnings)
    }

    pub fn ka_params(&self) -> KaParams<F> {
        KaParams {
            alpha: self.alpha,
            layers: self.layer_set,
            mode: self.kl_mode,
            q_floor: self.q_floor,
        }
    }

    /// Transform value clamped to `[t_min, t_max]`.
    pub fn temperature(&self, ka: F) -> F {
        let t = raw_temperature(self.transform, ka, self.sigma, self.t0);
        if t.is_nan() {
            return self.t_max;
        }
        t.max(self.t_min).min(self.t_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(transform: TransformKind, sigma: f64, t0: f64) -> FocusConfig<f64> {
        FocusConfig {
            transform,
            sigma,
            t0,
            ..FocusConfig::default()
        }
    }

    #[test]
    fn linear_examples() {
        let c = cfg(TransformKind::Linear, -0.8, 1.2);
        assert_eq!(c.temperature(0.0), 1.2);
        assert!((c.temperature(0.5) - 0.8).abs() < 1e-12);
        assert_eq!(c.temperature(10.0), 0.05);
    }

    #[test]
    fn sigmoid_examples() {
        assert!((sigmoid_focus(0.0f64, 0.5, 0.7) - (0.5 / 1.5 + 0.7)).abs() < 1e-15);
        assert!((sigmoid_focus(0.5f64, 0.5, 0.7) - 0.855_362_403_496_963_6).abs() < 1e-12);
        assert_eq!(sigmoid_focus(1e6, 0.5, 0.7), 0.7);
        assert!((sigmoid_focus(50.0f64, 0.5, 0.7) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn exponential_examples() {
        assert_eq!(exponential_focus(0.0f64, 2.0, 1.3), 1.3);
        assert!((exponential_focus(2.0f64, 2.0, 1.3) - 0.65).abs() < 1e-15);
        assert!((exponential_focus(4.0f64, 2.0, 1.4) - 0.35).abs() < 1e-15);
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_t0(&[0.0, 0.0], 1.0, TransformKind::Exponential).unwrap(), 1.0);
        let t0 = calibrate_t0(&[1.5f64, 2.5], 2.0, TransformKind::Exponential).unwrap();
        assert!((t0 - 2.0).abs() < 1e-15);
        assert!((exponential_focus(2.0f64, 2.0, t0) - 1.0).abs() < 1e-15);
        let t0 = calibrate_t0(&[0.2f64, 1.0, 0.6], 2.0, TransformKind::Exponential).unwrap();
        assert!((t0 - 1.231_144_413_344_916_3).abs() < 1e-12);
        assert!(matches!(
            calibrate_t0::<f64>(&[], 1.0, TransformKind::Linear),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn fixed_ignores_ka() {
        let c = FocusConfig::<f64>::fixed(1.0);
        for ka in [0.0, 0.3, 7.0] {
            assert_eq!(c.temperature(ka), 1.0);
        }
    }

    #[test]
    fn validation() {
        assert!(cfg(TransformKind::Exponential, 0.0, 1.0).validate().is_err());
        assert!(cfg(TransformKind::Sigmoid, -0.5, 1.0).validate().is_err());
        assert!(cfg(TransformKind::Linear, 0.0, 1.0).validate().is_err());
        assert_eq!(cfg(TransformKind::Linear, 0.5, 1.0).validate().unwrap().len(), 1);
        assert!(cfg(TransformKind::Linear, -0.5, 1.0).validate().unwrap().is_empty());
        let mut c = cfg(TransformKind::Exponential, 1.0, 1.0);
        c.t_min = 3.0;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "limits.t_min"));
    }

    proptest! {
        #[test]
        fn monotone_non_increasing(a in 0.0f64..20.0, b in 0.0f64..20.0, sigma in 0.05f64..10.0, t0 in 0.1f64..3.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for kind in [TransformKind::Sigmoid, TransformKind::Exponential] {
                let c = cfg(kind, sigma, t0);
                prop_assert!(c.temperature(lo) >= c.temperature(hi));
            }
        }

        #[test]
        fn output_stays_in_clamp(ka in 0.0f64..1e6, sigma in -10.0f64..10.0, t0 in 0.01f64..100.0) {
            for kind in [TransformKind::Fixed, TransformKind::Linear, TransformKind::Sigmoid, TransformKind::Exponential] {
                let s = if kind == TransformKind::Linear { sigma } else { sigma.abs().max(1e-3) };
                let t = cfg(kind, s, t0).temperature(ka);
                prop_assert!((DEFAULT_T_MIN..=DEFAULT_T_MAX).contains(&t));
            }
        }

        #[test]
        fn calibration_round_trip(samples in prop::collection::vec(0.0f64..5.0, 1..50), sigma in 0.1f64..10.0) {
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            for kind in [TransformKind::Linear, TransformKind::Sigmoid, TransformKind::Exponential] {
                let s = if kind == TransformKind::Linear { -sigma } else { sigma };
                let t0 = calibrate_t0(&samples, s, kind).unwrap();
                prop_assert!((raw_temperature(kind, mean, s, t0) - 1.0).abs() < 1e-9);
            }
        }
    }
}
