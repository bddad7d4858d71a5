//! Event-driven simulation with thinning for the tracing hazard.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EventKind, EventRates};
use crate::path::{path_integrals, sample_grid, PairingTracker};
use crate::scalar::Scalar;
use crate::trajectory::{EventRecord, SimulationConfig, ThinningStats, Trajectory};

const ENVELOPE_SLACK: f64 = 1e-12;
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replica `idx` derived from a master seed.
///
/// `mix64(master + (idx + 1)·γ)` with the SplitMix64 increment `γ`, so replica
/// streams depend only on `(master, idx)` and not on the thread schedule.
pub fn replica_seed(master: u64, idx: u64) -> u64 {
    mix64(master.wrapping_add(idx.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Smallest representable time strictly after `t`.
fn next_after<T: Scalar>(t: T) -> T {
    let step = T::epsilon() * t.abs().max(T::min_positive_value());
    let mut next = t + step;
    while next <= t {
        next = next + step;
    }
    next
}

/// Draws one path of the process.
///
/// The five hazards that are constant between events are used as is. The
/// tracing hazard varies continuously through `⟨R_t,ψ⟩`, so it is replaced by
/// an upper envelope: its value at the current time when `ψ` is
/// nonincreasing, or `λ3(I, ψ̄·#R)` otherwise. A candidate landing in the
/// tracing slot is kept with probability `λ3(t_new)/envelope`; rejected
/// candidates move the clock and leave no record.
pub fn simulate<T: Scalar>(config: &SimulationConfig<T>) -> Result<Trajectory<T>> {
    config.validate()?;
    let spec = &config.spec;
    let psi = spec.psi;
    let monotone = psi.is_nonincreasing();
    let psi_max = psi.upper_bound();
    let horizon = config.horizon;
    let slack = T::one() + T::lit(ENVELOPE_SLACK);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tracker = PairingTracker::new(psi);
    let (mut s, mut i) = (config.initial_susceptibles, config.initial_infectives);
    let mut t = T::zero();
    let mut events: Vec<EventRecord<T>> = Vec::new();
    let mut stats = ThinningStats::default();

    loop {
        if config.stop.on_extinction && i == 0 {
            break;
        }
        let pairing = tracker.value_at(t);
        let mut rates = spec.rates_with_pairing(s, i, pairing);
        let envelope = if monotone { rates.0[4] } else { spec.tracing_hazard(i, psi_max * T::from_count(tracker.count())) };
        rates.0[4] = envelope;
        let total = rates.total();
        if !(total > T::zero()) {
            break;
        }

        let u1 = 1.0 - rng.gen::<f64>();
        let mut t_new = t + T::lit(-u1.ln()) / total;
        if t_new > horizon {
            break;
        }
        if t_new <= t {
            t_new = next_after(t);
        }
        let target = T::lit(rng.gen::<f64>()) * total;
        let (kind, offset) = pick(&rates, target);

        let pre = tracker.value_at(t_new);
        if kind == EventKind::TracedDetection {
            stats.tracing_proposals += 1;
            let actual = spec.tracing_hazard(i, pre);
            if actual > envelope * slack {
                return Err(Error::EnvelopeViolation { time: t_new.as_f64(), hazard: actual.as_f64(), envelope: envelope.as_f64() });
            }
            if !(offset < actual) {
                stats.rejections += 1;
                t = t_new;
                continue;
            }
        }

        let under = || Error::Overflow(t_new.as_f64());
        match kind {
            EventKind::Recruitment => s = s.checked_add(1).ok_or_else(under)?,
            EventKind::SusceptibleExit => s -= 1,
            EventKind::Infection => {
                s -= 1;
                i = i.checked_add(1).ok_or_else(under)?;
            }
            EventKind::SpontaneousDetection | EventKind::TracedDetection => {
                i -= 1;
                tracker.insert(t_new);
            }
            EventKind::InfectiveExit => i -= 1,
        }
        t = t_new;
        events.push(EventRecord {
            k: events.len() as u64 + 1,
            t,
            event: kind,
            s,
            i,
            r_count: tracker.count(),
            r_psi_pre: pre,
        });
        if config.stop.max_events.is_some_and(|m| events.len() as u64 >= m) {
            break;
        }
    }

    let terminal_time = config.terminal_time(&events);
    let mut traj = Trajectory {
        config: config.clone(),
        events,
        terminal_time,
        integrals: Default::default(),
        thinning: config.thinning_stats.then_some(stats),
    };
    traj.integrals = path_integrals(&traj, &psi)?;
    Ok(traj)
}

/// Slot selected by `target ∈ [0, total)` in the cumulative order `E = 0..5`,
/// with the offset of `target` inside that slot. Empty slots are never chosen.
fn pick<T: Scalar>(rates: &EventRates<T>, target: T) -> (EventKind, T) {
    let mut acc = T::zero();
    let mut last = EventKind::Recruitment;
    for kind in EventKind::ALL {
        let r = rates.get(kind);
        if r > T::zero() {
            if target < acc + r {
                return (kind, target - acc);
            }
            last = kind;
        }
        acc = acc + r;
    }
    // rounding pushed target to the very top: take the last nonempty slot
    let r = rates.get(last);
    (last, r - r * T::epsilon())
}

/// Runs `m` replicas with seeds derived from `config.seed` and maps each path.
///
/// Replicas run in parallel; results are returned in replica order.
pub fn map_replicas<T, R, F>(config: &SimulationConfig<T>, m: u64, f: F) -> Result<Vec<R>>
where
    T: Scalar,
    R: Send,
    F: Fn(u64, Trajectory<T>) -> Result<R> + Sync + Send,
{
    (0..m)
        .into_par_iter()
        .map(|idx| {
            let cfg = SimulationConfig { seed: replica_seed(config.seed, idx), ..config.clone() };
            f(idx, simulate(&cfg)?)
        })
        .collect()
}

/// Per-time empirical moments of `(s, i, ⟨r,ψ⟩, ⟨r,1⟩)`, renormalized by `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMoments<T> {
    pub grid: Vec<T>,
    pub replicas: u64,
    pub mean: Vec<[T; 4]>,
    /// Unbiased sample covariance (zero for a single replica).
    pub covariance: Vec<[[T; 4]; 4]>,
}

impl<T: Scalar> EnsembleMoments<T> {
    pub fn variance(&self, k: usize, component: usize) -> T {
        self.covariance[k][component][component]
    }

    /// Standard error of the mean of `component` at grid point `k`.
    pub fn std_error(&self, k: usize, component: usize) -> T {
        (self.variance(k, component) / T::from_count(self.replicas)).sqrt()
    }
}

/// Simulates `m` replicas and accumulates moments on `grid`.
pub fn ensemble<T: Scalar>(config: &SimulationConfig<T>, m: u64, grid: &[T]) -> Result<EnsembleMoments<T>> {
    if m == 0 {
        return Err(Error::Usage("ensemble needs at least one replica".into()));
    }
    if grid.iter().any(|&g| g < T::zero() || g > config.horizon) {
        return Err(Error::Usage("ensemble grid must lie within [0, horizon]".into()));
    }
    let n = config.spec.scale();
    let psi = config.spec.psi;
    let samples = map_replicas(config, m, |_, traj| {
        let pts = sample_grid(&traj, &psi, grid)?;
        Ok(pts
            .into_iter()
            .map(|p| [T::from_count(p.s) / n, T::from_count(p.i) / n, p.r_psi / n, T::from_count(p.r_count) / n])
            .collect::<Vec<_>>())
    })?;

    let mf = T::from_count(m);
    let mut mean = vec![[T::zero(); 4]; grid.len()];
    let mut covariance = vec![[[T::zero(); 4]; 4]; grid.len()];
    for (k, (mk, ck)) in mean.iter_mut().zip(covariance.iter_mut()).enumerate() {
        for sample in &samples {
            for a in 0..4 {
                mk[a] = mk[a] + sample[k][a];
            }
        }
        for a in 0..4 {
            mk[a] = mk[a] / mf;
        }
        if m > 1 {
            for sample in &samples {
                for a in 0..4 {
                    for b in 0..4 {
                        ck[a][b] = ck[a][b] + (sample[k][a] - mk[a]) * (sample[k][b] - mk[b]);
                    }
                }
            }
            for row in ck.iter_mut() {
                for v in row.iter_mut() {
                    *v = *v / (mf - T::one());
                }
            }
        }
    }
    Ok(EnsembleMoments { grid: grid.to_vec(), replicas: m, mean, covariance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::path::verify_replay;
    use crate::rates::{InfectionRate, TracingRate};
    use crate::weight::WeightFunction;

    fn busy_spec(psi: WeightFunction<f64>) -> ModelSpec<f64> {
        ModelSpec {
            lambda0: 1.0,
            mu0: 0.1,
            mu1: 0.2,
            lambda2: 0.4,
            infection: InfectionRate::MassAction(0.3),
            tracing: TracingRate::B(5.0),
            psi,
            ..ModelSpec::zero()
        }
    }

    #[test]
    fn seeds_determine_paths() {
        let cfg = SimulationConfig::new(busy_spec(WeightFunction::exponential(0.5)), 10, 3, 20.0).with_seed(9);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate(&cfg.clone().with_seed(10)).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn replay_reproduces_every_snapshot() {
        for psi in [
            WeightFunction::exponential(0.5),
            WeightFunction::indicator(1.5),
            WeightFunction::gamma(2.0, 0.7),
            WeightFunction::constant(0.3),
        ] {
            let cfg = SimulationConfig::new(busy_spec(psi), 10, 3, 15.0).with_seed(3);
            let traj = simulate(&cfg).unwrap();
            assert!(traj.count_of(EventKind::TracedDetection) > 0, "{psi:?}");
            verify_replay(&traj).unwrap();
        }
    }

    #[test]
    fn counts_are_conserved() {
        let cfg = SimulationConfig::new(busy_spec(WeightFunction::indicator(2.0)), 12, 4, 25.0).with_seed(77);
        let traj = simulate(&cfg).unwrap();
        let c = |k| traj.count_of(k) as i64;
        use EventKind::*;
        let (s, i, r) = traj.final_counts();
        assert_eq!(s as i64, 12 + c(Recruitment) - c(SusceptibleExit) - c(Infection));
        assert_eq!(i as i64, 4 + c(Infection) - c(SpontaneousDetection) - c(TracedDetection) - c(InfectiveExit));
        assert_eq!(r as i64, c(SpontaneousDetection) + c(TracedDetection));
        assert!(traj.events.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn thinning_stats_recorded_for_gamma() {
        let mut cfg = SimulationConfig::new(busy_spec(WeightFunction::gamma(3.0, 0.5)), 10, 5, 20.0).with_seed(1);
        cfg.thinning_stats = true;
        let traj = simulate(&cfg).unwrap();
        let stats = traj.thinning.unwrap();
        assert!(stats.tracing_proposals >= traj.count_of(EventKind::TracedDetection));
        assert_eq!(stats.tracing_proposals - stats.rejections, traj.count_of(EventKind::TracedDetection));
        assert!(stats.rejections > 0);
    }

    #[test]
    fn stop_rules() {
        let mut cfg = SimulationConfig::new(busy_spec(WeightFunction::exponential(1.0)), 5, 2, 1e4).with_seed(5);
        cfg.stop.on_extinction = true;
        let traj = simulate(&cfg).unwrap();
        assert_eq!(traj.final_counts().1, 0);
        assert_eq!(traj.terminal_time, traj.events.last().unwrap().t);
        cfg.stop = crate::trajectory::StopRule { on_extinction: false, max_events: Some(7) };
        let traj = simulate(&cfg).unwrap();
        assert_eq!(traj.events.len(), 7);
        assert_eq!(traj.terminal_time, traj.events[6].t);
    }

    #[test]
    fn single_replica_moments_are_path_values() {
        let cfg = SimulationConfig::new(busy_spec(WeightFunction::exponential(1.0)), 10, 3, 5.0).with_seed(21);
        let grid = [0.0, 1.0, 2.5, 5.0];
        let mom = ensemble(&cfg, 1, &grid).unwrap();
        let traj = simulate(&SimulationConfig { seed: replica_seed(21, 0), ..cfg.clone() }).unwrap();
        let pts = sample_grid(&traj, &cfg.spec.psi, &grid).unwrap();
        for (k, p) in pts.iter().enumerate() {
            assert_eq!(mom.mean[k], [p.s as f64, p.i as f64, p.r_psi, p.r_count as f64]);
            assert_eq!(mom.covariance[k], [[0.0; 4]; 4]);
        }
    }

    #[test]
    fn replica_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..10_000).map(|i| replica_seed(42, i)).collect();
        assert_eq!(seeds.len(), 10_000);
    }

    #[test]
    fn f32_paths_replay() {
        let spec: ModelSpec<f32> = busy_spec(WeightFunction::exponential(0.5)).cast();
        let traj = simulate(&SimulationConfig::new(spec, 8, 3, 10.0_f32).with_seed(4)).unwrap();
        verify_replay(&traj).unwrap();
        assert!(traj.integrals.infective_time > 0.0);
    }
}
