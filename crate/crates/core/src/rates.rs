//! Parametric jump-rate functions for infection and contact-tracing detection.
//!
//! Both families are functions of two nonnegative arguments `(x, y)`:
//! `(S, I)` for infection and `(I, ⟨R,ψ⟩)` for tracing. Each variant carries
//! its coefficient, so `rate = coefficient * shape(x, y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Infection rate `λ1(S, I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", content = "coefficient", rename_all = "snake_case")]
pub enum InfectionRate<T> {
    /// `λ S I`.
    MassAction(T),
    /// `λ S I / (S + I)`, zero when `S + I = 0`.
    FrequencyDependent(T),
    /// `λ I`.
    Linear(T),
}

/// Contact-tracing detection rate `λ3(I, ⟨R,ψ⟩)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", content = "coefficient")]
pub enum TracingRate<T> {
    /// `λ ⟨R,ψ⟩`.
    A(T),
    /// `λ I ⟨R,ψ⟩ / (I + ⟨R,ψ⟩)`, zero when the denominator vanishes.
    B(T),
    /// `λ I ⟨R,ψ⟩`.
    C(T),
}

/// Coefficient-free tracing shape, used by inference where the coefficient is the unknown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TracingModel {
    A,
    B,
    C,
}

#[inline]
fn ratio<T: Scalar>(x: T, y: T) -> T {
    let d = x + y;
    if d == T::zero() {
        T::zero()
    } else {
        x * y / d
    }
}

#[inline]
fn ratio_partials<T: Scalar>(x: T, y: T) -> (T, T) {
    let d = x + y;
    if d == T::zero() {
        (T::zero(), T::zero())
    } else {
        let d2 = d * d;
        (y * y / d2, x * x / d2)
    }
}

fn check_coefficient<T: Scalar>(what: &str, c: T) -> Result<()> {
    if c.is_finite() && c >= T::zero() {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!("{what} coefficient must be finite and >= 0, got {c}")))
    }
}

impl<T: Scalar> InfectionRate<T> {
    pub fn coefficient(&self) -> T {
        match *self {
            InfectionRate::MassAction(c) | InfectionRate::FrequencyDependent(c) | InfectionRate::Linear(c) => c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_coefficient("infection", self.coefficient())
    }

    #[inline]
    pub fn eval(&self, s: T, i: T) -> T {
        match *self {
            InfectionRate::MassAction(c) => c * s * i,
            InfectionRate::FrequencyDependent(c) => c * ratio(s, i),
            InfectionRate::Linear(c) => c * i,
        }
    }

    /// `(∂_S λ1, ∂_I λ1)`.
    pub fn partials(&self, s: T, i: T) -> (T, T) {
        match *self {
            InfectionRate::MassAction(c) => (c * i, c * s),
            InfectionRate::FrequencyDependent(c) => {
                let (ds, di) = ratio_partials(s, i);
                (c * ds, c * di)
            }
            InfectionRate::Linear(c) => (T::zero(), c),
        }
    }

    /// Constant `λ̄` with `rate(x, y) <= λ̄ x y` on the whole quadrant, when one exists.
    ///
    /// Only mass action has one. The other forms stay positive when one argument
    /// vanishes and are instead bounded by `λ (x + y)`.
    pub fn domination_constant(&self) -> Option<T> {
        match *self {
            InfectionRate::MassAction(c) => Some(c),
            _ => None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> InfectionRate<U> {
        let c = |x: T| U::lit(x.as_f64());
        match *self {
            InfectionRate::MassAction(x) => InfectionRate::MassAction(c(x)),
            InfectionRate::FrequencyDependent(x) => InfectionRate::FrequencyDependent(c(x)),
            InfectionRate::Linear(x) => InfectionRate::Linear(c(x)),
        }
    }
}

impl TracingModel {
    /// `λ3(i, r) / λ3`, the part of the tracing rate that does not depend on the coefficient.
    #[inline]
    pub fn shape<T: Scalar>(self, i: T, r: T) -> T {
        match self {
            TracingModel::A => r,
            TracingModel::B => ratio(i, r),
            TracingModel::C => i * r,
        }
    }

    /// `(∂_I, ∂_R)` of the shape.
    pub fn shape_partials<T: Scalar>(self, i: T, r: T) -> (T, T) {
        match self {
            TracingModel::A => (T::zero(), T::one()),
            TracingModel::B => ratio_partials(i, r),
            TracingModel::C => (r, i),
        }
    }

    pub fn with_coefficient<T>(self, c: T) -> TracingRate<T> {
        match self {
            TracingModel::A => TracingRate::A(c),
            TracingModel::B => TracingRate::B(c),
            TracingModel::C => TracingRate::C(c),
        }
    }
}

impl<T: Scalar> TracingRate<T> {
    pub fn coefficient(&self) -> T {
        match *self {
            TracingRate::A(c) | TracingRate::B(c) | TracingRate::C(c) => c,
        }
    }

    pub fn model(&self) -> TracingModel {
        match self {
            TracingRate::A(_) => TracingModel::A,
            TracingRate::B(_) => TracingModel::B,
            TracingRate::C(_) => TracingModel::C,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_coefficient("tracing", self.coefficient())
    }

    #[inline]
    pub fn eval(&self, i: T, r: T) -> T {
        self.coefficient() * self.model().shape(i, r)
    }

    /// `(∂_I λ3, ∂_R λ3)`.
    pub fn partials(&self, i: T, r: T) -> (T, T) {
        let c = self.coefficient();
        let (di, dr) = self.model().shape_partials(i, r);
        (c * di, c * dr)
    }

    /// Constant `λ̄` with `rate(x, y) <= λ̄ x y` on the whole quadrant, when one exists.
    ///
    /// Model C has one; A and B are only bounded by `λ (x + y)`.
    pub fn domination_constant(&self) -> Option<T> {
        match *self {
            TracingRate::C(c) => Some(c),
            _ => None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> TracingRate<U> {
        self.model().with_coefficient(U::lit(self.coefficient().as_f64()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_diff(f: impl Fn(f64, f64) -> f64, x: f64, y: f64) -> (f64, f64) {
        let h = 1e-5;
        ((f(x + h, y) - f(x - h, y)) / (2.0 * h), (f(x, y + h) - f(x, y - h)) / (2.0 * h))
    }

    #[test]
    fn model_c_product() {
        assert!((TracingRate::C(0.1).eval(2.0, 3.0) - 0.6_f64).abs() < 1e-15);
    }

    #[test]
    fn degenerate_denominators_are_zero() {
        assert_eq!(InfectionRate::FrequencyDependent(2.0).eval(0.0, 0.0), 0.0);
        assert_eq!(TracingRate::B(2.0).eval(0.0, 0.0), 0.0);
        assert_eq!(TracingRate::B(2.0).partials(0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn vanish_on_axes() {
        for x in [0.0, 0.5, 7.0] {
            assert_eq!(InfectionRate::MassAction(1.3).eval(0.0, x), 0.0);
            assert_eq!(InfectionRate::MassAction(1.3).eval(x, 0.0), 0.0);
            assert_eq!(TracingRate::B(1.3).eval(0.0, x), 0.0);
            assert_eq!(TracingRate::B(1.3).eval(x, 0.0), 0.0);
            assert_eq!(TracingRate::C(1.3).eval(0.0, x), 0.0);
            assert_eq!(TracingRate::C(1.3).eval(x, 0.0), 0.0);
            assert_eq!(TracingRate::A(1.3).eval(x, 0.0), 0.0);
        }
        // model A keeps a positive hazard with no infectives
        assert!(TracingRate::A(1.3).eval(0.0, 2.0) > 0.0);
    }

    #[test]
    fn domination_fails_off_the_product_forms() {
        // below x + y = 1 the saturating forms exceed λ x y
        assert!(InfectionRate::FrequencyDependent(1.0).eval(0.1, 0.1) > 1.0 * 0.1 * 0.1);
        assert!(TracingRate::A(1.0).eval(0.0, 1.0) > 0.0);
        assert!(InfectionRate::<f64>::Linear(1.0).domination_constant().is_none());
    }

    #[test]
    fn partials_match_finite_differences() {
        let points = [(0.3, 1.7), (2.0, 0.05), (5.0, 5.0), (0.01, 0.02)];
        let infections = [
            InfectionRate::MassAction(0.7),
            InfectionRate::FrequencyDependent(0.7),
            InfectionRate::Linear(0.7),
        ];
        for rate in infections {
            for &(x, y) in &points {
                let (fx, fy) = central_diff(|a, b| rate.eval(a, b), x, y);
                let (ax, ay) = rate.partials(x, y);
                assert!((fx - ax).abs() < 1e-6 && (fy - ay).abs() < 1e-6, "{rate:?} at {x},{y}");
            }
        }
        for rate in [TracingRate::A(0.4), TracingRate::B(0.4), TracingRate::C(0.4)] {
            for &(x, y) in &points {
                let (fx, fy) = central_diff(|a, b| rate.eval(a, b), x, y);
                let (ax, ay) = rate.partials(x, y);
                assert!((fx - ax).abs() < 1e-6 && (fy - ay).abs() < 1e-6, "{rate:?} at {x},{y}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn product_domination(x in 0.0..100.0_f64, y in 0.0..100.0_f64, c in 0.0..10.0_f64) {
            for rate in [InfectionRate::MassAction(c), InfectionRate::FrequencyDependent(c), InfectionRate::Linear(c)] {
                if let Some(bar) = rate.domination_constant() {
                    prop_assert!(rate.eval(x, y) <= bar * x * y * (1.0 + 1e-12));
                }
                prop_assert!(rate.eval(x, y) <= c * (x + y + x * y) * (1.0 + 1e-12));
            }
            for rate in [TracingRate::A(c), TracingRate::B(c), TracingRate::C(c)] {
                if let Some(bar) = rate.domination_constant() {
                    prop_assert!(rate.eval(x, y) <= bar * x * y * (1.0 + 1e-12));
                }
                prop_assert!(rate.eval(x, y) <= c * (x + y + x * y) * (1.0 + 1e-12));
            }
        }

        #[test]
        fn tracing_nondecreasing_in_pairing(i in 0.0..50.0_f64, r in 0.0..50.0_f64, dr in 0.0..5.0_f64) {
            for rate in [TracingRate::A(0.3), TracingRate::B(0.3), TracingRate::C(0.3)] {
                prop_assert!(rate.eval(i, r + dr) >= rate.eval(i, r));
            }
        }
    }
}
