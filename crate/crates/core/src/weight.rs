//! Weight functions turning the age of detection into contact-tracing usefulness.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bounded nonnegative weight `ψ(a)` on detection ages `a ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightFunction<T> {
    /// `1` on the closed window `[0, window]`, `0` afterwards.
    Indicator { window: T },
    /// `exp(-rate * a)`.
    Exponential { rate: T },
    /// Normalized gamma density with the given shape and scale.
    GammaDensity { shape: T, scale: T },
    /// Constant `level` for every age.
    Constant { level: T },
}

impl<T: Scalar> WeightFunction<T> {
    pub fn indicator(window: T) -> Self {
        WeightFunction::Indicator { window }
    }

    pub fn exponential(rate: T) -> Self {
        WeightFunction::Exponential { rate }
    }

    pub fn gamma(shape: T, scale: T) -> Self {
        WeightFunction::GammaDensity { shape, scale }
    }

    pub fn constant(level: T) -> Self {
        WeightFunction::Constant { level }
    }

    /// Checks parameter ranges.
    ///
    /// Gamma shapes below one are rejected: their density is unbounded at `a = 0`.
    pub fn validate(&self) -> Result<()> {
        let ok = |x: T| x.is_finite() && x > T::zero();
        match *self {
            WeightFunction::Indicator { window } if !ok(window) => {
                Err(Error::InvalidModel(format!("indicator window must be > 0, got {window}")))
            }
            WeightFunction::Exponential { rate } if !ok(rate) => {
                Err(Error::InvalidModel(format!("exponential rate must be > 0, got {rate}")))
            }
            WeightFunction::GammaDensity { shape, scale } => {
                if !(shape.is_finite() && shape >= T::one()) {
                    return Err(Error::InvalidModel(format!(
                        "gamma shape must be >= 1 for a bounded weight, got {shape}"
                    )));
                }
                if !ok(scale) {
                    return Err(Error::InvalidModel(format!("gamma scale must be > 0, got {scale}")));
                }
                Ok(())
            }
            WeightFunction::Constant { level } if !(level.is_finite() && level >= T::zero()) => {
                Err(Error::InvalidModel(format!("constant level must be >= 0, got {level}")))
            }
            _ => Ok(()),
        }
    }

    /// Pointwise value `ψ(age)`.
    pub fn evaluate(&self, age: T) -> Result<T> {
        if age < T::zero() || age.is_nan() {
            return Err(Error::Domain(format!("negative age {age}")));
        }
        Ok(self.eval_unchecked(age))
    }

    /// `ψ(age)` without the sign check; callers guarantee `age >= 0`.
    #[inline]
    pub(crate) fn eval_unchecked(&self, age: T) -> T {
        match *self {
            WeightFunction::Indicator { window } => {
                if age <= window {
                    T::one()
                } else {
                    T::zero()
                }
            }
            WeightFunction::Exponential { rate } => (-rate * age).exp(),
            WeightFunction::GammaDensity { shape, scale } => gamma_density(shape, scale, age),
            WeightFunction::Constant { level } => level,
        }
    }

    /// `ψ(0)`, the weight a freshly detected individual carries.
    pub fn at_zero(&self) -> T {
        self.eval_unchecked(T::zero())
    }

    /// `sup_a ψ(a)`.
    pub fn upper_bound(&self) -> T {
        match *self {
            WeightFunction::Indicator { .. } | WeightFunction::Exponential { .. } => T::one(),
            WeightFunction::Constant { level } => level,
            WeightFunction::GammaDensity { shape, scale } => {
                // mode at (k - 1) * scale; k == 1 puts it at the origin
                let mode = (shape - T::one()).max(T::zero()) * scale;
                gamma_density(shape, scale, mode)
            }
        }
    }

    /// Whether `ψ` is nonincreasing in age. The simulator's thinning envelope depends on it.
    pub fn is_nonincreasing(&self) -> bool {
        match *self {
            WeightFunction::GammaDensity { shape, .. } => shape <= T::one(),
            _ => true,
        }
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> WeightFunction<U> {
        let c = |x: T| U::lit(x.as_f64());
        match *self {
            WeightFunction::Indicator { window } => WeightFunction::Indicator { window: c(window) },
            WeightFunction::Exponential { rate } => WeightFunction::Exponential { rate: c(rate) },
            WeightFunction::GammaDensity { shape, scale } => {
                WeightFunction::GammaDensity { shape: c(shape), scale: c(scale) }
            }
            WeightFunction::Constant { level } => WeightFunction::Constant { level: c(level) },
        }
    }
}

fn gamma_density<T: Scalar>(shape: T, scale: T, age: T) -> T {
    if age == T::zero() {
        return if shape == T::one() { scale.recip() } else { T::zero() };
    }
    let log_norm = T::lit(ln_gamma(shape.as_f64())) + shape * scale.ln();
    ((shape - T::one()) * age.ln() - age / scale - log_norm).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn indicator_inside_and_boundary() {
        let psi = WeightFunction::indicator(4.0);
        assert_eq!(psi.evaluate(2.0).unwrap(), 1.0);
        assert_eq!(psi.evaluate(4.0).unwrap(), 1.0);
        assert_eq!(psi.evaluate(4.000_001).unwrap(), 0.0);
    }

    #[test]
    fn exponential_values() {
        let psi = WeightFunction::exponential(0.01_f64);
        assert_eq!(psi.evaluate(0.0).unwrap(), 1.0);
        assert!((psi.evaluate(100.0).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn negative_age_rejected() {
        let psi = WeightFunction::constant(1.0);
        assert!(matches!(psi.evaluate(-1e-9), Err(Error::Domain(_))));
    }

    #[test]
    fn gamma_matches_closed_form() {
        // shape 2, scale 1.5: a e^{-a/1.5} / 1.5^2
        let psi = WeightFunction::gamma(2.0, 1.5);
        let a: f64 = 0.7;
        let expected = a * (-a / 1.5).exp() / 2.25;
        assert!((psi.evaluate(a).unwrap() - expected).abs() < 1e-14);
        // mode (k-1) * scale = 1.5
        let sup = 1.5 * (-1.0_f64).exp() / 2.25;
        assert!((psi.upper_bound() - sup).abs() < 1e-14);
        assert!(!psi.is_nonincreasing());
        assert!(WeightFunction::gamma(1.0, 2.0).is_nonincreasing());
        assert_eq!(WeightFunction::gamma(1.0, 2.0).at_zero(), 0.5);
    }

    #[test]
    fn validation() {
        assert!(WeightFunction::indicator(0.0).validate().is_err());
        assert!(WeightFunction::exponential(-1.0).validate().is_err());
        assert!(WeightFunction::gamma(0.5, 1.0).validate().is_err());
        assert!(WeightFunction::constant(-0.1).validate().is_err());
        assert!(WeightFunction::constant(0.0).validate().is_ok());
        assert!(WeightFunction::gamma(3.0, 0.2).validate().is_ok());
    }

    #[test]
    fn single_precision_agrees() {
        let psi = WeightFunction::<f32>::exponential(0.5);
        assert!((psi.evaluate(2.0).unwrap() - (-1.0_f32).exp()).abs() < 1e-6);
    }

    fn any_weight() -> impl Strategy<Value = WeightFunction<f64>> {
        prop_oneof![
            (0.01..20.0).prop_map(WeightFunction::indicator),
            (0.001..5.0).prop_map(WeightFunction::exponential),
            ((1.0..6.0), (0.05..4.0)).prop_map(|(k, s)| WeightFunction::gamma(k, s)),
            (0.0..3.0).prop_map(WeightFunction::constant),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn bounded_and_nonnegative(psi in any_weight(), a in 0.0..200.0_f64) {
            let v = psi.evaluate(a).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!(v <= psi.upper_bound() * (1.0 + 1e-12));
        }
    }

    proptest! {
        #[test]
        fn monotone_flag_is_honest(psi in any_weight(), a in 0.0..50.0_f64, da in 0.0..5.0_f64) {
            if psi.is_nonincreasing() {
                prop_assert!(psi.evaluate(a + da).unwrap() <= psi.evaluate(a).unwrap() * (1.0 + 1e-12));
            }
        }
    }
}
