//! Model specification, population state and the six event hazards.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cohort::AgedCohort;
use crate::error::{Error, Result};
use crate::rates::{InfectionRate, TracingRate};
use crate::scalar::Scalar;
use crate::weight::WeightFunction;

/// Event types, numbered as in the usual SIR-with-tracing taxonomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
#[repr(u8)]
pub enum EventKind {
    /// Recruitment of a susceptible.
    Recruitment = 0,
    /// Death or emigration of a susceptible.
    SusceptibleExit = 1,
    Infection = 2,
    /// Detection by random screening.
    SpontaneousDetection = 3,
    /// Detection through contact-tracing.
    TracedDetection = 4,
    /// Death or emigration of an infective.
    InfectiveExit = 5,
}

impl EventKind {
    pub const ALL: [EventKind; 6] = [
        EventKind::Recruitment,
        EventKind::SusceptibleExit,
        EventKind::Infection,
        EventKind::SpontaneousDetection,
        EventKind::TracedDetection,
        EventKind::InfectiveExit,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_detection(self) -> bool {
        matches!(self, EventKind::SpontaneousDetection | EventKind::TracedDetection)
    }
}

impl TryFrom<u8> for EventKind {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        EventKind::ALL.get(v as usize).copied().ok_or_else(|| format!("event type {v} outside 0..=5"))
    }
}

impl From<EventKind> for u8 {
    fn from(e: EventKind) -> u8 {
        e as u8
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// All rates of the model plus the weight function and the scale `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec<T> {
    /// Immigration rate `λ0`.
    pub lambda0: T,
    /// Susceptible exit rate `μ0`.
    pub mu0: T,
    /// Infective exit rate `μ1`.
    pub mu1: T,
    /// Spontaneous detection rate `λ2`.
    pub lambda2: T,
    pub infection: InfectionRate<T>,
    pub tracing: TracingRate<T>,
    pub psi: WeightFunction<T>,
    /// Scale parameter; rates are renormalized as `nλ0`, `nλ1(S/n, I/n)`, `nλ3(I/n, ⟨R,ψ⟩/n)`.
    pub n: u64,
    pub time_unit: String,
}

/// The six hazards indexed by [`EventKind`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventRates<T>(pub [T; 6]);

impl<T: Scalar> EventRates<T> {
    pub fn total(&self) -> T {
        self.0.iter().copied().sum()
    }

    pub fn get(&self, e: EventKind) -> T {
        self.0[e.index()]
    }
}

impl<T: Scalar> ModelSpec<T> {
    /// A spec with every rate zero, `n = 1`, tracing form A and `ψ ≡ 1`.
    pub fn zero() -> Self {
        Self {
            lambda0: T::zero(),
            mu0: T::zero(),
            mu1: T::zero(),
            lambda2: T::zero(),
            infection: InfectionRate::MassAction(T::zero()),
            tracing: TracingRate::A(T::zero()),
            psi: WeightFunction::Constant { level: T::one() },
            n: 1,
            time_unit: "days".to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda0", self.lambda0), ("mu0", self.mu0), ("mu1", self.mu1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= T::zero()) {
                return Err(Error::InvalidModel(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.n == 0 {
            return Err(Error::InvalidModel("scale n must be >= 1".into()));
        }
        self.infection.validate()?;
        self.tracing.validate()?;
        self.psi.validate()
    }

    pub fn scale(&self) -> T {
        T::from_count(self.n)
    }

    /// Infection hazard `nλ1(S/n, I/n)` at counts `(s, i)`.
    #[inline]
    pub fn infection_hazard(&self, s: u64, i: u64) -> T {
        let n = self.scale();
        n * self.infection.eval(T::from_count(s) / n, T::from_count(i) / n)
    }

    /// Tracing hazard `nλ3(I/n, ⟨R,ψ⟩/n)`; zero when there are no infectives to detect.
    #[inline]
    pub fn tracing_hazard(&self, i: u64, pairing: T) -> T {
        if i == 0 {
            return T::zero();
        }
        let n = self.scale();
        n * self.tracing.eval(T::from_count(i) / n, pairing / n)
    }

    /// Hazards at counts `(s, i)` with `⟨R,ψ⟩ = pairing`.
    #[inline]
    pub fn rates_with_pairing(&self, s: u64, i: u64, pairing: T) -> EventRates<T> {
        let (st, it) = (T::from_count(s), T::from_count(i));
        EventRates([
            self.scale() * self.lambda0,
            self.mu0 * st,
            self.infection_hazard(s, i),
            self.lambda2 * it,
            self.tracing_hazard(i, pairing),
            self.mu1 * it,
        ])
    }

    /// Hazards in `state`, evaluating `⟨R_t,ψ⟩` from the cohort directly.
    pub fn event_rates(&self, state: &EpidemicState<T>) -> Result<EventRates<T>> {
        let pairing = state.removed.pairing(&self.psi, state.t)?;
        Ok(self.rates_with_pairing(state.susceptibles, state.infectives, pairing))
    }

    pub fn cast<U: Scalar>(&self) -> ModelSpec<U> {
        let c = |x: T| U::lit(x.as_f64());
        ModelSpec {
            lambda0: c(self.lambda0),
            mu0: c(self.mu0),
            mu1: c(self.mu1),
            lambda2: c(self.lambda2),
            infection: self.infection.cast(),
            tracing: self.tracing.cast(),
            psi: self.psi.cast(),
            n: self.n,
            time_unit: self.time_unit.clone(),
        }
    }
}

/// Population state `(t, S, I, R(da))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpidemicState<T> {
    pub t: T,
    pub susceptibles: u64,
    pub infectives: u64,
    pub removed: AgedCohort<T>,
}

impl<T: Scalar> EpidemicState<T> {
    /// State at time zero with nobody detected yet.
    pub fn initial(susceptibles: u64, infectives: u64) -> Self {
        Self { t: T::zero(), susceptibles, infectives, removed: AgedCohort::new() }
    }

    /// Applies one event at time `t`.
    pub fn apply(&mut self, event: EventKind, t: T) -> Result<()> {
        if t < self.t {
            return Err(Error::Domain(format!("event at {t} precedes current time {}", self.t)));
        }
        let under = |what: &str| Error::InconsistentLog(format!("{what} would become negative at t={t}"));
        match event {
            EventKind::Recruitment => {
                self.susceptibles = self.susceptibles.checked_add(1).ok_or(Error::Overflow(t.as_f64()))?;
            }
            EventKind::SusceptibleExit => {
                self.susceptibles = self.susceptibles.checked_sub(1).ok_or_else(|| under("S"))?;
            }
            EventKind::Infection => {
                self.susceptibles = self.susceptibles.checked_sub(1).ok_or_else(|| under("S"))?;
                self.infectives = self.infectives.checked_add(1).ok_or(Error::Overflow(t.as_f64()))?;
            }
            EventKind::SpontaneousDetection | EventKind::TracedDetection => {
                self.infectives = self.infectives.checked_sub(1).ok_or_else(|| under("I"))?;
                self.removed.insert(t)?;
            }
            EventKind::InfectiveExit => {
                self.infectives = self.infectives.checked_sub(1).ok_or_else(|| under("I"))?;
            }
        }
        self.t = t;
        Ok(())
    }
}
