//! Ground truth for the constant-weight case.
//!
//! With `ψ` constant, `⟨R,ψ⟩ = level·#R`, so `(S, I, #R)` is a finite-rate
//! Markov chain. Its transient law on a truncated box is computed by
//! uniformization; transitions leaving the box feed a lost-mass bucket.
//! Everything here is `f64` only.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{EventKind, ModelSpec};
use crate::weight::WeightFunction;

/// Inclusive upper bounds of the truncated box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub s: u64,
    pub i: u64,
    pub r: u64,
}

impl Caps {
    pub fn new(s: u64, i: u64, r: u64) -> Self {
        Caps { s, i, r }
    }

    pub fn states(&self) -> usize {
        ((self.s + 1) * (self.i + 1) * (self.r + 1)) as usize
    }

    pub fn index(&self, s: u64, i: u64, r: u64) -> usize {
        (s + (self.s + 1) * (i + (self.i + 1) * r)) as usize
    }

    pub fn contains(&self, s: u64, i: u64, r: u64) -> bool {
        s <= self.s && i <= self.i && r <= self.r
    }

    fn decode(&self, idx: usize) -> (u64, u64, u64) {
        let idx = idx as u64;
        let s = idx % (self.s + 1);
        let rest = idx / (self.s + 1);
        (s, rest % (self.i + 1), rest / (self.i + 1))
    }

    /// Caps covering `mean + 10 sd` of pessimistic bounds on each marginal.
    ///
    /// `S_t` is bounded by `S0` plus all recruitments by `t`, a Poisson count;
    /// `I_t` and `#R_t` are bounded by `I0` plus every susceptible ever present.
    pub fn default_for(spec: &ModelSpec<f64>, s0: u64, i0: u64, t: f64) -> Caps {
        let arrivals = spec.scale() * spec.lambda0 * t;
        let bound = |m: f64| (m + 10.0 * m.sqrt()).ceil() as u64 + 1;
        let s = s0 + bound(arrivals);
        Caps { s, i: i0 + s, r: i0 + s }
    }
}

/// The truncated chain with its uniformization constant.
#[derive(Clone, Debug)]
pub struct TruncatedChain {
    pub caps: Caps,
    /// Outgoing transitions per state; `None` marks the lost-mass bucket.
    transitions: Vec<Vec<(Option<usize>, f64)>>,
    exit_rates: Vec<f64>,
    pub uniformization: f64,
}

impl TruncatedChain {
    /// Builds the chain, with `Λ = factor · max exit rate` (`factor >= 1`).
    pub fn new(spec: &ModelSpec<f64>, caps: Caps, factor: f64) -> Result<Self> {
        spec.validate()?;
        let level = match spec.psi {
            WeightFunction::Constant { level } => level,
            _ => return Err(Error::Usage("the oracle requires a constant weight function".into())),
        };
        if !(factor >= 1.0) {
            return Err(Error::Usage(format!("uniformization factor must be >= 1, got {factor}")));
        }
        let mut transitions = Vec::with_capacity(caps.states());
        let mut exit_rates = Vec::with_capacity(caps.states());
        for idx in 0..caps.states() {
            let (s, i, r) = caps.decode(idx);
            let rates = spec.rates_with_pairing(s, i, level * r as f64);
            let mut out = Vec::with_capacity(6);
            for kind in EventKind::ALL {
                let q = rates.get(kind);
                if q <= 0.0 {
                    continue;
                }
                let (ns, ni, nr) = match kind {
                    EventKind::Recruitment => (s + 1, i, r),
                    EventKind::SusceptibleExit => (s - 1, i, r),
                    EventKind::Infection => (s - 1, i + 1, r),
                    EventKind::SpontaneousDetection | EventKind::TracedDetection => (s, i - 1, r + 1),
                    EventKind::InfectiveExit => (s, i - 1, r),
                };
                let target = caps.contains(ns, ni, nr).then(|| caps.index(ns, ni, nr));
                out.push((target, q));
            }
            exit_rates.push(rates.total());
            transitions.push(out);
        }
        let max_exit = exit_rates.iter().copied().fold(0.0, f64::max);
        Ok(TruncatedChain { caps, transitions, exit_rates, uniformization: factor * max_exit })
    }

    /// Diagonal of the generator, `-exit rate`.
    pub fn diagonal(&self, idx: usize) -> f64 {
        -self.exit_rates[idx]
    }

    /// One step `v ↦ v P` of the uniformized jump chain `P = I + Q/Λ`; returns mass sent out of the box.
    fn step(&self, v: &[f64], out: &mut [f64]) -> f64 {
        let lam = self.uniformization;
        let mut lost = 0.0;
        for (idx, &p) in v.iter().enumerate() {
            out[idx] += p * (1.0 - self.exit_rates[idx] / lam);
        }
        for (idx, &p) in v.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for &(target, q) in &self.transitions[idx] {
                let flow = p * q / lam;
                match target {
                    Some(j) => out[j] += flow,
                    None => lost += flow,
                }
            }
        }
        lost
    }
}

/// Transient law on the box plus the bookkeeping of dropped mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientDistribution {
    pub caps: Caps,
    pub probabilities: Vec<f64>,
    /// Probability of having left the box by time `t` (upper bound for the true loss).
    pub lost: f64,
    /// Poisson tail mass dropped by truncating the uniformization series.
    pub truncation: f64,
}

impl TransientDistribution {
    pub fn probability(&self, s: u64, i: u64, r: u64) -> f64 {
        if self.caps.contains(s, i, r) {
            self.probabilities[self.caps.index(s, i, r)]
        } else {
            0.0
        }
    }

    fn marginal(&self, len: u64, pick: impl Fn(u64, u64, u64) -> u64) -> Vec<f64> {
        let mut out = vec![0.0; len as usize + 1];
        for (idx, &p) in self.probabilities.iter().enumerate() {
            let (s, i, r) = self.caps.decode(idx);
            out[pick(s, i, r) as usize] += p;
        }
        out
    }

    pub fn marginal_s(&self) -> Vec<f64> {
        self.marginal(self.caps.s, |s, _, _| s)
    }

    pub fn marginal_i(&self) -> Vec<f64> {
        self.marginal(self.caps.i, |_, i, _| i)
    }

    pub fn marginal_r(&self) -> Vec<f64> {
        self.marginal(self.caps.r, |_, _, r| r)
    }

    pub fn total(&self) -> f64 {
        self.probabilities.iter().sum()
    }
}

/// Law at time `t` of the chain started from `(s0, i0, r0)`.
///
/// The series `Σ_k Pois(k; Λt) v_k` is summed past its mode until the
/// current Poisson weight is below `1e-6·epsilon`, so the dropped tail is far
/// below `epsilon`. Errors with suggested doubled caps when the mass
/// that left the box reaches `epsilon`.
pub fn transient_distribution(chain: &TruncatedChain, initial: (u64, u64, u64), t: f64, epsilon: f64) -> Result<TransientDistribution> {
    if !(epsilon > 0.0 && epsilon <= 1e-6) {
        return Err(Error::Usage(format!("epsilon must lie in (0, 1e-6], got {epsilon}")));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Usage(format!("time must be finite and >= 0, got {t}")));
    }
    let caps = chain.caps;
    let (s0, i0, r0) = initial;
    if !caps.contains(s0, i0, r0) {
        return Err(Error::Usage(format!("initial state {initial:?} outside caps {caps:?}")));
    }
    let mut v = vec![0.0; caps.states()];
    v[caps.index(s0, i0, r0)] = 1.0;
    let mut acc = vec![0.0; caps.states()];
    let lt = chain.uniformization * t;
    if lt == 0.0 {
        return Ok(TransientDistribution { caps, probabilities: v, lost: 0.0, truncation: 0.0 });
    }

    // weights in log space so large Λt does not underflow the first terms
    let log_weight = |k: u64| -lt + k as f64 * lt.ln() - ln_gamma(k as f64 + 1.0);
    let mut cumulative_weight = 0.0;
    let mut lost_so_far = 0.0;
    let mut lost = 0.0;
    let mut next = vec![0.0; caps.states()];
    let mut k = 0u64;
    loop {
        let w = log_weight(k).exp();
        cumulative_weight += w;
        for (a, &p) in acc.iter_mut().zip(&v) {
            *a += w * p;
        }
        lost += w * lost_so_far;
        // past the mode the tail is dominated by a geometric series in the current weight
        if k as f64 > lt && 1.0 - cumulative_weight < epsilon && w < 1e-6 * epsilon {
            break;
        }
        next.iter_mut().for_each(|x| *x = 0.0);
        lost_so_far += chain.step(&v, &mut next);
        std::mem::swap(&mut v, &mut next);
        k += 1;
    }
    let truncation = (1.0 - cumulative_weight).max(0.0);
    if lost >= epsilon {
        return Err(Error::CapsTooSmall { lost, epsilon, suggested: (2 * caps.s.max(1), 2 * caps.i.max(1), 2 * caps.r.max(1)) });
    }
    Ok(TransientDistribution { caps, probabilities: acc, lost, truncation })
}

/// Stationary law of the susceptible count when infection is switched off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryLaw {
    pub mean: f64,
    /// `p_k` for `k = 0..=k_max`.
    pub pmf: Vec<f64>,
    /// Balance residuals `λ0 p_{k-1} - λ0 p_k + μ0 (k+1) p_{k+1} - μ0 k p_k`, `k = 0..=k_max`.
    pub residuals: Vec<f64>,
}

/// Poisson(`λ0/μ0`) law of the immigration-death chain, with its balance residuals.
pub fn stationary_susceptibles(lambda0: f64, mu0: f64, k_max: usize) -> Result<StationaryLaw> {
    if !(mu0 > 0.0 && mu0.is_finite()) {
        return Err(Error::Usage(format!("mu0 must be > 0, got {mu0}")));
    }
    if !(lambda0 >= 0.0 && lambda0.is_finite()) {
        return Err(Error::Usage(format!("lambda0 must be >= 0, got {lambda0}")));
    }
    let mean = lambda0 / mu0;
    let p = |k: usize| -> f64 {
        if mean == 0.0 {
            return if k == 0 { 1.0 } else { 0.0 };
        }
        (-mean + k as f64 * mean.ln() - ln_gamma(k as f64 + 1.0)).exp()
    };
    let full: Vec<f64> = (0..=k_max + 1).map(p).collect();
    let residuals = (0..=k_max)
        .map(|k| {
            let prev = if k == 0 { 0.0 } else { full[k - 1] };
            lambda0 * prev - lambda0 * full[k] + mu0 * (k + 1) as f64 * full[k + 1] - mu0 * k as f64 * full[k]
        })
        .collect();
    Ok(StationaryLaw { mean, pmf: full[..=k_max].to_vec(), residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::{InfectionRate, TracingRate};

    fn death_spec() -> ModelSpec<f64> {
        ModelSpec { mu1: 1.0, ..ModelSpec::zero() }
    }

    #[test]
    fn pure_death_two_individuals() {
        let chain = TruncatedChain::new(&death_spec(), Caps::new(0, 2, 0), 1.0).unwrap();
        let law = transient_distribution(&chain, (0, 2, 0), 1.0, 1e-12).unwrap();
        let want = (1.0 - (-1.0_f64).exp()).powi(2);
        assert!((law.probability(0, 0, 0) - want).abs() < 1e-12);
        assert!((law.total() - 1.0).abs() < 1e-11);
    }

    #[test]
    fn time_zero_is_point_mass() {
        let chain = TruncatedChain::new(&death_spec(), Caps::new(0, 3, 0), 1.0).unwrap();
        let law = transient_distribution(&chain, (0, 3, 0), 0.0, 1e-9).unwrap();
        assert_eq!(law.probability(0, 3, 0), 1.0);
        assert_eq!(law.total(), 1.0);
    }

    fn full_spec() -> ModelSpec<f64> {
        ModelSpec {
            lambda0: 0.5,
            mu0: 0.5,
            mu1: 0.2,
            lambda2: 0.3,
            infection: InfectionRate::MassAction(0.1),
            tracing: TracingRate::C(0.1),
            psi: WeightFunction::constant(1.0),
            ..ModelSpec::zero()
        }
    }

    #[test]
    fn independent_of_uniformization_constant() {
        let caps = Caps::new(15, 10, 10);
        let a = transient_distribution(&TruncatedChain::new(&full_spec(), caps, 1.0).unwrap(), (4, 3, 0), 2.0, 1e-6).unwrap();
        let b = transient_distribution(&TruncatedChain::new(&full_spec(), caps, 2.5).unwrap(), (4, 3, 0), 2.0, 1e-6).unwrap();
        for (x, y) in a.probabilities.iter().zip(&b.probabilities) {
            assert!((x - y).abs() < 1e-10);
            assert!(*x >= 0.0);
        }
        assert!(a.total() <= 1.0 + 1e-12);
    }

    #[test]
    fn tight_caps_are_reported() {
        let chain = TruncatedChain::new(&full_spec(), Caps::new(5, 4, 2), 1.0).unwrap();
        match transient_distribution(&chain, (4, 3, 0), 2.0, 1e-9) {
            Err(Error::CapsTooSmall { suggested, .. }) => assert_eq!(suggested, (10, 8, 4)),
            other => panic!("expected CapsTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_constant_weight() {
        let spec = ModelSpec { psi: WeightFunction::exponential(1.0), ..full_spec() };
        assert!(TruncatedChain::new(&spec, Caps::new(2, 2, 2), 1.0).is_err());
    }

    #[test]
    fn poisson_law() {
        let law = stationary_susceptibles(2.0, 1.0, 50).unwrap();
        assert!((law.pmf[0] - (-2.0_f64).exp()).abs() < 1e-15);
        let mean: f64 = law.pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        let second: f64 = law.pmf.iter().enumerate().map(|(k, p)| (k * k) as f64 * p).sum();
        assert!((mean - 2.0).abs() < 1e-12);
        assert!((second - mean * mean - 2.0).abs() < 1e-12);
        assert!(law.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn immigration_death_reaches_poisson() {
        let spec = ModelSpec { lambda0: 2.0, mu0: 1.0, ..ModelSpec::zero() };
        let chain = TruncatedChain::new(&spec, Caps::new(30, 0, 0), 1.0).unwrap();
        let law = transient_distribution(&chain, (0, 0, 0), 50.0, 1e-9).unwrap();
        let target = stationary_susceptibles(2.0, 1.0, 30).unwrap();
        let tv: f64 = law.marginal_s().iter().zip(&target.pmf).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 1e-6, "total variation {tv}");
    }
}
