//! Exact bookkeeping of `⟨R_t,ψ⟩` along a path and the time integrals needed by inference.
//!
//! Between two events the counts `S`, `I` and the cohort are frozen, so every
//! integrand depends on time only through `⟨R_u,ψ⟩`. For exponential,
//! indicator and constant weights the integrals are evaluated in closed form;
//! gamma weights fall back to adaptive quadrature at absolute tolerance `1e-9`
//! per interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EpidemicState, EventKind, ModelSpec};
use crate::quad::adaptive_simpson;
use crate::rates::TracingModel;
use crate::scalar::Scalar;
use crate::trajectory::Trajectory;
use crate::weight::WeightFunction;

const QUAD_TOL: f64 = 1e-9;

/// Incremental evaluator of `⟨R_t,ψ⟩` for nondecreasing query times.
#[derive(Clone, Debug)]
pub(crate) struct PairingTracker<T> {
    psi: WeightFunction<T>,
    detections: Vec<T>,
    // exponential weight: value at the last detection time
    anchor: T,
    anchored: T,
    // indicator weight: first detection still inside the window
    first_active: usize,
}

impl<T: Scalar> PairingTracker<T> {
    pub fn new(psi: WeightFunction<T>) -> Self {
        Self { psi, detections: Vec::new(), anchor: T::zero(), anchored: T::zero(), first_active: 0 }
    }

    pub fn count(&self) -> u64 {
        self.detections.len() as u64
    }

    /// `⟨R_t,ψ⟩`. Successive calls must use nondecreasing `t`.
    pub fn value_at(&mut self, t: T) -> T {
        match self.psi {
            WeightFunction::Exponential { rate } => {
                if self.detections.is_empty() {
                    T::zero()
                } else {
                    self.anchored * (-(rate * (t - self.anchor))).exp()
                }
            }
            WeightFunction::Indicator { window } => {
                while self.first_active < self.detections.len() && t - self.detections[self.first_active] > window {
                    self.first_active += 1;
                }
                T::from_count((self.detections.len() - self.first_active) as u64)
            }
            WeightFunction::Constant { level } => level * T::from_count(self.count()),
            WeightFunction::GammaDensity { .. } => self.direct(t),
        }
    }

    fn direct(&self, t: T) -> T {
        self.detections.iter().map(|&d| self.psi.eval_unchecked(t - d)).sum()
    }

    pub fn insert(&mut self, d: T) {
        if let WeightFunction::Exponential { .. } = self.psi {
            self.anchored = self.value_at(d) + T::one();
            self.anchor = d;
        }
        self.detections.push(d);
    }

    /// `(∫P, ∫I·P, ∫I·P/(I+P))` over `[t0, t1]` with `I = infectives` and no detection inside.
    pub fn integrate(&mut self, t0: T, t1: T, infectives: T) -> Result<[T; 3]> {
        let p0 = self.value_at(t0);
        let len = t1 - t0;
        if len <= T::zero() || self.detections.is_empty() {
            return Ok([T::zero(); 3]);
        }
        let i = infectives;
        let ratio = |p: T| if i + p == T::zero() { T::zero() } else { i * p / (i + p) };
        match self.psi {
            WeightFunction::Exponential { rate } => {
                let decayed = -(-(rate * len)).exp_m1();
                let int_p = p0 * decayed / rate;
                let sat = if i == T::zero() || p0 == T::zero() {
                    T::zero()
                } else {
                    let p1 = p0 * (-(rate * len)).exp();
                    i / rate * ((p0 * decayed) / (i + p1)).ln_1p()
                };
                Ok([int_p, i * int_p, sat])
            }
            WeightFunction::Constant { .. } => Ok([p0 * len, i * p0 * len, ratio(p0) * len]),
            WeightFunction::Indicator { window } => {
                let mut out = [T::zero(); 3];
                let mut count = p0;
                let mut cur = t0;
                let mut idx = self.first_active;
                while idx < self.detections.len() {
                    let expiry = self.detections[idx] + window;
                    if expiry >= t1 {
                        break;
                    }
                    let end = expiry.max(cur);
                    let dt = end - cur;
                    out[0] = out[0] + count * dt;
                    out[2] = out[2] + ratio(count) * dt;
                    count = count - T::one();
                    cur = end;
                    idx += 1;
                }
                let dt = t1 - cur;
                out[0] = out[0] + count * dt;
                out[2] = out[2] + ratio(count) * dt;
                out[1] = i * out[0];
                Ok(out)
            }
            WeightFunction::GammaDensity { .. } => {
                let tol = T::lit(QUAD_TOL);
                let fail = || Error::Quadrature { start: t0.as_f64(), end: t1.as_f64() };
                let int_p = adaptive_simpson(&|u| self.direct(u), t0, t1, tol).ok_or_else(fail)?;
                let sat = if i == T::zero() {
                    T::zero()
                } else {
                    adaptive_simpson(&|u| ratio(self.direct(u)), t0, t1, tol).ok_or_else(fail)?
                };
                Ok([int_p, i * int_p, sat])
            }
        }
    }

    /// `∫ f(⟨R_u,ψ⟩) du` over `[t0, t1]` with no detection inside.
    pub fn integrate_with(&mut self, t0: T, t1: T, tol: T, f: &impl Fn(T) -> T) -> Result<T> {
        let p0 = self.value_at(t0);
        let len = t1 - t0;
        if len <= T::zero() {
            return Ok(T::zero());
        }
        let fail = || Error::Quadrature { start: t0.as_f64(), end: t1.as_f64() };
        match self.psi {
            WeightFunction::Constant { .. } => Ok(f(p0) * len),
            _ if self.detections.is_empty() => Ok(f(T::zero()) * len),
            WeightFunction::Indicator { window } => {
                let mut acc = T::zero();
                let mut count = p0;
                let mut cur = t0;
                let mut idx = self.first_active;
                while idx < self.detections.len() {
                    let expiry = self.detections[idx] + window;
                    if expiry >= t1 {
                        break;
                    }
                    let end = expiry.max(cur);
                    acc = acc + f(count) * (end - cur);
                    count = count - T::one();
                    cur = end;
                    idx += 1;
                }
                Ok(acc + f(count) * (t1 - cur))
            }
            WeightFunction::Exponential { rate } => {
                adaptive_simpson(&|u: T| f(p0 * (-(rate * (u - t0))).exp()), t0, t1, tol).ok_or_else(fail)
            }
            WeightFunction::GammaDensity { .. } => {
                adaptive_simpson(&|u: T| f(self.direct(u)), t0, t1, tol).ok_or_else(fail)
            }
        }
    }
}

/// Time integrals along a path, in raw (not renormalized) counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathIntegrals<T> {
    /// `∫ S dt`.
    pub susceptible_time: T,
    /// `∫ I dt`.
    pub infective_time: T,
    /// `∫ ⟨R,ψ⟩ dt`.
    pub pairing: T,
    /// `∫ ⟨R,ψ⟩ 1{I > 0} dt`, the Model A exposure once the tracing hazard is clamped at `I = 0`.
    pub active_pairing: T,
    /// `∫ I ⟨R,ψ⟩ dt`.
    pub infective_pairing: T,
    /// `∫ I ⟨R,ψ⟩ / (I + ⟨R,ψ⟩) dt`.
    pub saturating_pairing: T,
    /// `∫ nλ1(S/n, I/n) dt`, the integrated infection hazard.
    pub infection_hazard: T,
}

impl<T: Scalar> PathIntegrals<T> {
    /// Exposure `D` with `∫ nλ3(I/n, ⟨R,ψ⟩/n) dt = λ3 · D` (raw counts).
    pub fn tracing_exposure(&self, model: TracingModel, n: u64) -> T {
        match model {
            TracingModel::A => self.active_pairing,
            TracingModel::B => self.saturating_pairing,
            TracingModel::C => self.infective_pairing / T::from_count(n),
        }
    }

    /// Integrated tracing hazard `∫ nλ3(I/n, ⟨R,ψ⟩/n) dt` under `spec`.
    pub fn tracing_hazard(&self, spec: &ModelSpec<T>) -> T {
        spec.tracing.coefficient() * self.tracing_exposure(spec.tracing.model(), spec.n)
    }
}

/// Per-event view produced by [`replay`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplayedEvent<T> {
    pub t: T,
    pub kind: EventKind,
    pub susceptibles_pre: u64,
    pub infectives_pre: u64,
    /// `⟨R_{t-},ψ⟩` under the replay weight.
    pub pairing_pre: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Replay<T> {
    pub events: Vec<ReplayedEvent<T>>,
    pub integrals: PathIntegrals<T>,
    pub terminal_time: T,
}

struct Walker<'a, T> {
    spec: &'a ModelSpec<T>,
    tracker: PairingTracker<T>,
    state: EpidemicState<T>,
    integrals: PathIntegrals<T>,
    integrate: bool,
}

impl<'a, T: Scalar> Walker<'a, T> {
    fn new(traj: &'a Trajectory<T>, psi: WeightFunction<T>, integrate: bool) -> Self {
        let c = &traj.config;
        Self {
            spec: &c.spec,
            tracker: PairingTracker::new(psi),
            state: EpidemicState::initial(c.initial_susceptibles, c.initial_infectives),
            integrals: PathIntegrals::default(),
            integrate,
        }
    }

    fn advance(&mut self, t1: T) -> Result<()> {
        let t0 = self.state.t;
        if t1 < t0 {
            return Err(Error::InconsistentLog(format!("time {t1} precedes {t0}")));
        }
        if self.integrate && t1 > t0 {
            let dt = t1 - t0;
            let (s, i) = (self.state.susceptibles, self.state.infectives);
            let acc = &mut self.integrals;
            acc.susceptible_time = acc.susceptible_time + T::from_count(s) * dt;
            acc.infective_time = acc.infective_time + T::from_count(i) * dt;
            acc.infection_hazard = acc.infection_hazard + self.spec.infection_hazard(s, i) * dt;
            let [p, ip, sat] = self.tracker.integrate(t0, t1, T::from_count(i))?;
            acc.pairing = acc.pairing + p;
            if i > 0 {
                acc.active_pairing = acc.active_pairing + p;
            }
            acc.infective_pairing = acc.infective_pairing + ip;
            acc.saturating_pairing = acc.saturating_pairing + sat;
        }
        self.state.t = t1;
        Ok(())
    }

    fn apply(&mut self, kind: EventKind, t: T) -> Result<ReplayedEvent<T>> {
        self.advance(t)?;
        let pre = ReplayedEvent {
            t,
            kind,
            susceptibles_pre: self.state.susceptibles,
            infectives_pre: self.state.infectives,
            pairing_pre: self.tracker.value_at(t),
        };
        self.state.apply(kind, t)?;
        if kind.is_detection() {
            self.tracker.insert(t);
        }
        Ok(pre)
    }
}

/// Recomputes every event's pre-state and the path integrals under weight `psi`.
pub fn replay<T: Scalar>(traj: &Trajectory<T>, psi: &WeightFunction<T>) -> Result<Replay<T>> {
    let mut walker = Walker::new(traj, *psi, true);
    let mut events = Vec::with_capacity(traj.events.len());
    for rec in &traj.events {
        events.push(walker.apply(rec.event, rec.t)?);
    }
    walker.advance(traj.terminal_time)?;
    Ok(Replay { events, integrals: walker.integrals, terminal_time: traj.terminal_time })
}

/// The path integrals of `traj` under weight `psi`.
pub fn path_integrals<T: Scalar>(traj: &Trajectory<T>, psi: &WeightFunction<T>) -> Result<PathIntegrals<T>> {
    replay(traj, psi).map(|r| r.integrals)
}

/// Rebuilds the state from the event types alone and checks every recorded snapshot,
/// including `r_psi_pre`, bit for bit.
pub fn verify_replay<T: Scalar>(traj: &Trajectory<T>) -> Result<()> {
    let mut walker = Walker::new(traj, traj.config.spec.psi, false);
    let mut last_t = None;
    for rec in &traj.events {
        if last_t.is_some_and(|t| rec.t <= t) {
            return Err(Error::InconsistentLog(format!("event {} not strictly after its predecessor", rec.k)));
        }
        last_t = Some(rec.t);
        let pre = walker.apply(rec.event, rec.t)?;
        let st = &walker.state;
        let snapshot = (st.susceptibles, st.infectives, st.removed.count());
        if snapshot != (rec.s, rec.i, rec.r_count) {
            return Err(Error::InconsistentLog(format!(
                "event {}: replayed (S, I, R) = {snapshot:?}, recorded ({}, {}, {})",
                rec.k, rec.s, rec.i, rec.r_count
            )));
        }
        if pre.pairing_pre.to_bits_eq(rec.r_psi_pre) {
            continue;
        }
        return Err(Error::InconsistentLog(format!(
            "event {}: replayed pairing {} differs from recorded {}",
            rec.k, pre.pairing_pre, rec.r_psi_pre
        )));
    }
    Ok(())
}

trait BitEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // integer_decode is exact for both f32 and f64
        self.integer_decode() == other.integer_decode()
    }
}

/// State sampled at a grid time, raw counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint<T> {
    pub t: T,
    pub s: u64,
    pub i: u64,
    pub r_count: u64,
    pub r_psi: T,
}

/// Samples the right-continuous path at increasing `grid` times.
pub fn sample_grid<T: Scalar>(traj: &Trajectory<T>, psi: &WeightFunction<T>, grid: &[T]) -> Result<Vec<GridPoint<T>>> {
    let mut walker = Walker::new(traj, *psi, false);
    let mut next = 0;
    let mut out = Vec::with_capacity(grid.len());
    for &g in grid {
        if g < walker.state.t {
            return Err(Error::Usage("sampling grid must be nondecreasing".into()));
        }
        while next < traj.events.len() && traj.events[next].t <= g {
            walker.apply(traj.events[next].event, traj.events[next].t)?;
            next += 1;
        }
        walker.advance(g)?;
        out.push(GridPoint {
            t: g,
            s: walker.state.susceptibles,
            i: walker.state.infectives,
            r_count: walker.state.removed.count(),
            r_psi: walker.tracker.value_at(g),
        });
    }
    Ok(out)
}

/// `∫ f(I_u, ⟨R_u,ψ⟩) du` over the observation window, raw counts.
///
/// Integrands are piecewise smooth; each inter-event interval is integrated
/// exactly when `⟨R,ψ⟩` is piecewise constant and by adaptive quadrature at
/// tolerance `tol` otherwise.
pub fn path_functional<T: Scalar>(
    traj: &Trajectory<T>,
    psi: &WeightFunction<T>,
    tol: T,
    f: impl Fn(T, T) -> T,
) -> Result<T> {
    let mut walker = Walker::new(traj, *psi, false);
    let mut total = T::zero();
    let mut step = |walker: &mut Walker<'_, T>, t1: T| -> Result<()> {
        let t0 = walker.state.t;
        let i = T::from_count(walker.state.infectives);
        total = total + walker.tracker.integrate_with(t0, t1, tol, &|p| f(i, p))?;
        Ok(())
    };
    for rec in &traj.events {
        step(&mut walker, rec.t)?;
        walker.apply(rec.event, rec.t)?;
    }
    step(&mut walker, traj.terminal_time)?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{EventRecord, SimulationConfig};

    fn trajectory(i0: u64, events: &[(f64, EventKind)], horizon: f64) -> Trajectory<f64> {
        let config = SimulationConfig::new(ModelSpec::zero(), 0, i0, horizon);
        let mut state = EpidemicState::initial(0, i0);
        let mut records = Vec::new();
        for (k, &(t, e)) in events.iter().enumerate() {
            state.apply(e, t).unwrap();
            records.push(EventRecord {
                k: k as u64 + 1,
                t,
                event: e,
                s: state.susceptibles,
                i: state.infectives,
                r_count: state.removed.count(),
                r_psi_pre: 0.0,
            });
        }
        Trajectory { config, events: records, terminal_time: horizon, integrals: PathIntegrals::default(), thinning: None }
    }

    #[test]
    fn constant_infectives_no_cohort() {
        let traj = trajectory(2, &[], 3.0);
        let got = path_integrals(&traj, &WeightFunction::exponential(1.0)).unwrap();
        assert_eq!(got.infective_time, 6.0);
        assert_eq!(got.pairing, 0.0);
        assert_eq!(got.infective_pairing, 0.0);
        assert_eq!(got.saturating_pairing, 0.0);
    }

    #[test]
    fn single_detection_exponential() {
        let traj = trajectory(1, &[(0.0, EventKind::SpontaneousDetection)], 1.0);
        let got = path_integrals(&traj, &WeightFunction::exponential(1.0)).unwrap();
        assert!((got.pairing - (1.0 - (-1.0_f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn single_detection_indicator() {
        let traj = trajectory(1, &[(0.0, EventKind::SpontaneousDetection)], 1.0);
        let got = path_integrals(&traj, &WeightFunction::indicator(0.5)).unwrap();
        assert!((got.pairing - 0.5).abs() < 1e-15);
    }

    fn mixed_path() -> Trajectory<f64> {
        use EventKind::*;
        trajectory(
            5,
            &[
                (0.3, SpontaneousDetection),
                (0.9, TracedDetection),
                (1.1, InfectiveExit),
                (1.25, SpontaneousDetection),
                (2.7, TracedDetection),
            ],
            4.0,
        )
    }

    /// Brute-force oracle: midpoint rule on a fine grid using the definitional pairing.
    fn brute_force(traj: &Trajectory<f64>, psi: &WeightFunction<f64>) -> [f64; 3] {
        let steps = 400_000;
        let h = traj.terminal_time / steps as f64;
        let mut acc = [0.0; 3];
        for j in 0..steps {
            let u = (j as f64 + 0.5) * h;
            let (_, i, _) = traj.counts_at(u);
            let p: f64 = traj
                .events
                .iter()
                .filter(|e| e.event.is_detection() && e.t <= u)
                .map(|e| psi.evaluate(u - e.t).unwrap())
                .sum();
            let i = i as f64;
            acc[0] += p * h;
            acc[1] += i * p * h;
            acc[2] += if i + p > 0.0 { i * p / (i + p) * h } else { 0.0 };
        }
        acc
    }

    #[test]
    fn closed_forms_match_brute_force() {
        let traj = mixed_path();
        for psi in [
            WeightFunction::exponential(0.8),
            WeightFunction::indicator(0.7),
            WeightFunction::constant(1.5),
            WeightFunction::gamma(2.5, 0.6),
        ] {
            let got = path_integrals(&traj, &psi).unwrap();
            let want = brute_force(&traj, &psi);
            let got = [got.pairing, got.infective_pairing, got.saturating_pairing];
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 2e-5, "{psi:?} component {k}: {} vs {}", got[k], want[k]);
            }
        }
    }

    #[test]
    fn functional_matches_closed_forms() {
        let traj = mixed_path();
        for psi in [WeightFunction::exponential(0.8), WeightFunction::indicator(0.7), WeightFunction::gamma(2.0, 0.5)] {
            let exact = path_integrals(&traj, &psi).unwrap();
            let sat = path_functional(&traj, &psi, 1e-12, |i, p| if i + p > 0.0 { i * p / (i + p) } else { 0.0 }).unwrap();
            let ip = path_functional(&traj, &psi, 1e-12, |i, p| i * p).unwrap();
            assert!((sat - exact.saturating_pairing).abs() < 1e-8, "{psi:?}");
            assert!((ip - exact.infective_pairing).abs() < 1e-8, "{psi:?}");
        }
    }

    #[test]
    fn tracker_agrees_with_definition() {
        let traj = mixed_path();
        for psi in [WeightFunction::exponential(0.8), WeightFunction::indicator(0.7), WeightFunction::gamma(3.0, 0.2)] {
            let grid: Vec<f64> = (0..=80).map(|k| k as f64 * 0.05).collect();
            let pts = sample_grid(&traj, &psi, &grid).unwrap();
            for p in pts {
                let direct: f64 = traj
                    .events
                    .iter()
                    .filter(|e| e.event.is_detection() && e.t <= p.t)
                    .map(|e| psi.evaluate(p.t - e.t).unwrap())
                    .sum();
                assert!((p.r_psi - direct).abs() < 1e-12, "{psi:?} at {}", p.t);
            }
        }
    }

    #[test]
    fn infective_time_is_piecewise_sum() {
        let traj = mixed_path();
        let got = path_integrals(&traj, &WeightFunction::constant(1.0)).unwrap();
        // I: 5 on [0,.3], 4 on [.3,.9], 3 on [.9,1.1], 2 on [1.1,1.25], 1 on [1.25,2.7], 0 after
        let want = 5.0 * 0.3 + 4.0 * 0.6 + 3.0 * 0.2 + 2.0 * 0.15 + 1.45;
        assert!((got.infective_time - want).abs() < 1e-14);
    }
}
