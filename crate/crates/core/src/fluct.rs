//! Fluctuations around the limit: bracket rates, the linearized drift and the
//! covariance ODE of the closed projection `(η^s, η^i, ⟨η^r,ψ⟩)` for
//! exponential `ψ`, plus a Monte Carlo harness checking them.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::limit::{solve_limit, LimitSolution};
use crate::model::ModelSpec;
use crate::scalar::Scalar;
use crate::simulate::map_replicas;
use crate::stats::Summary;
use crate::trajectory::SimulationConfig;
use crate::weight::WeightFunction;

pub type Mat3<T> = [[T; 3]; 3];

pub fn zero3<T: Scalar>() -> Mat3<T> {
    [[T::zero(); 3]; 3]
}

/// Instantaneous covariance of `(W^s, W^i, W^r(f))` at grid point `j`.
///
/// Only `f(0)` enters, since new removed individuals have age zero.
pub fn bracket_at<T: Scalar>(sol: &LimitSolution<T>, j: usize, f0: T) -> Mat3<T> {
    let sp = &sol.spec;
    let (s, i, m) = (sol.s[j], sol.i[j], sol.m[j]);
    let inf = sp.infection.eval(s, i);
    let trace = sp.tracing.eval(i, m);
    let removal = sp.lambda2 * i + trace;
    let ss = sp.lambda0 + sp.mu0 * s + inf;
    let ii = inf + (sp.mu1 + sp.lambda2) * i + trace;
    [[ss, -inf, T::zero()], [-inf, ii, -f0 * removal], [T::zero(), -f0 * removal, f0 * f0 * removal]]
}

/// [`bracket_at`] on the whole grid for test function `f`.
pub fn bracket_rates<T: Scalar>(sol: &LimitSolution<T>, f: impl Fn(T) -> T) -> Vec<Mat3<T>> {
    let f0 = f(T::zero());
    (0..sol.len()).map(|j| bracket_at(sol, j, f0)).collect()
}

/// Jacobian of `(s, i, m) ↦ (ṡ, i̇, ṁ)` for `ψ(a) = e^{-ca}`.
pub fn drift_matrix<T: Scalar>(spec: &ModelSpec<T>, s: T, i: T, m: T, c: T) -> Mat3<T> {
    let (ds1, di1) = spec.infection.partials(s, i);
    let (di3, dr3) = spec.tracing.partials(i, m);
    [
        [-spec.mu0 - ds1, -di1, T::zero()],
        [ds1, di1 - spec.mu1 - spec.lambda2 - di3, -dr3],
        [T::zero(), spec.lambda2 + di3, dr3 - c],
    ]
}

/// Vector field of the reduced limit system, used to cross-check [`drift_matrix`].
pub fn reduced_field<T: Scalar>(spec: &ModelSpec<T>, x: [T; 3], c: T) -> [T; 3] {
    let [s, i, m] = x;
    let inf = spec.infection.eval(s, i);
    let trace = spec.tracing.eval(i, m);
    [
        spec.lambda0 - spec.mu0 * s - inf,
        inf - (spec.mu1 + spec.lambda2) * i - trace,
        spec.lambda2 * i + trace - c * m,
    ]
}

fn mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = zero3();
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

fn transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = zero3();
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[c][r];
        }
    }
    out
}

fn lyapunov<T: Scalar>(a: &Mat3<T>, sigma: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let left = mul(a, sigma);
    let right = mul(sigma, &transpose(a));
    let mut out = zero3();
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = left[r][c] + right[r][c] + b[r][c];
        }
    }
    out
}

/// Limiting covariance of `(η^s, η^i, ⟨η^r,ψ⟩)` on the limit grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitCovariance<T> {
    pub times: Vec<T>,
    pub sigma: Vec<Mat3<T>>,
    pub brackets: Vec<Mat3<T>>,
}

impl<T: Scalar> LimitCovariance<T> {
    pub fn terminal(&self) -> &Mat3<T> {
        self.sigma.last().expect("nonempty grid")
    }
}

/// Integrates `dΣ/dt = AΣ + ΣAᵀ + B` along `sol` with Heun's method.
///
/// Only exponential `ψ` closes in three dimensions; other weights are rejected.
pub fn covariance_ode<T: Scalar>(sol: &LimitSolution<T>, sigma0: Mat3<T>) -> Result<LimitCovariance<T>> {
    let c = match sol.spec.psi {
        WeightFunction::Exponential { rate } => rate,
        _ => return Err(Error::Usage("the covariance ODE closes only for an exponential weight function".into())),
    };
    let spec = &sol.spec;
    let drift = |j: usize| drift_matrix(spec, sol.s[j], sol.i[j], sol.m[j], c);
    let brackets = bracket_rates(sol, |_| T::one());
    let h = sol.step;
    let half = T::lit(0.5);
    let mut sigma = Vec::with_capacity(sol.len());
    sigma.push(sigma0);
    for j in 0..sol.len() - 1 {
        let cur = sigma[j];
        let k1 = lyapunov(&drift(j), &cur, &brackets[j]);
        let mut pred = zero3();
        for r in 0..3 {
            for col in 0..3 {
                pred[r][col] = cur[r][col] + h * k1[r][col];
            }
        }
        let k2 = lyapunov(&drift(j + 1), &pred, &brackets[j + 1]);
        let mut next = zero3();
        for r in 0..3 {
            for col in 0..3 {
                next[r][col] = cur[r][col] + half * h * (k1[r][col] + k2[r][col]);
            }
        }
        // symmetrize against rounding drift
        for r in 0..3 {
            for col in r + 1..3 {
                let avg = half * (next[r][col] + next[col][r]);
                next[r][col] = avg;
                next[col][r] = avg;
            }
        }
        sigma.push(next);
    }
    Ok(LimitCovariance { times: sol.times.clone(), sigma, brackets })
}

/// Smallest eigenvalue of a symmetric 3×3 matrix.
pub fn min_eigenvalue<T: Scalar>(m: &Mat3<T>) -> f64 {
    let mat = Matrix3::from_fn(|r, c| m[r][c].as_f64());
    SymmetricEigen::new(mat).eigenvalues.min()
}

/// Whether `m` is symmetric positive semidefinite up to `tol`.
pub fn is_psd<T: Scalar>(m: &Mat3<T>, tol: f64) -> bool {
    let symmetric = (0..3).all(|r| (0..3).all(|c| (m[r][c] - m[c][r]).abs().as_f64() <= tol.max(1e-12)));
    symmetric && min_eigenvalue(m) >= -tol
}

/// Settings of a CLT experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltSettings {
    /// Spec, horizon and master seed; `n` and the initial counts are set per scale.
    pub base: SimulationConfig<f64>,
    pub s0: f64,
    pub i0: f64,
    pub scales: Vec<u64>,
    pub replicas: u64,
    /// Step of the limit solver.
    pub step: f64,
    /// Test functions `f` for the projections `⟨η^r, f⟩`.
    pub test_functions: Vec<WeightFunction<f64>>,
}

/// Result for one scale `n`. Projections are ordered `s, i, ⟨r,f_1⟩, ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltRow {
    pub n: u64,
    pub replicas: u64,
    pub projections: Vec<String>,
    /// Moments and normality z-scores of each projection of `η` at the horizon.
    pub summaries: Vec<Summary>,
    pub covariance: Vec<Vec<f64>>,
    /// Covariance ODE at the horizon for `(s, i, ⟨r,ψ⟩)` when `ψ` is exponential.
    pub theory: Option<Mat3<f64>>,
    /// `Var(√n M^i_T)` over replicas.
    pub martingale_variance: f64,
    /// `∫ (λ1 + (μ1+λ2) i + λ3) dt` from the limit.
    pub martingale_target: f64,
    /// Richardson estimate of the limit grid error, times `√n`, relative to the smallest projection sd.
    pub discretization_ratio: f64,
}

impl CltRow {
    pub fn mean_z(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.z(0.0)).collect()
    }
}

fn label(f: &WeightFunction<f64>) -> String {
    match *f {
        WeightFunction::Indicator { window } => format!("r_indicator_{window}"),
        WeightFunction::Exponential { rate } => format!("r_exp_{rate}"),
        WeightFunction::GammaDensity { shape, scale } => format!("r_gamma_{shape}_{scale}"),
        WeightFunction::Constant { level } => format!("r_const_{level}"),
    }
}

/// Samples `η^(n)` at the horizon for every scale and compares with the theory.
///
/// Initial counts are `(⌊n s0⌋, ⌊n i0⌋)` and the limit is started from
/// `(⌊n s0⌋/n, ⌊n i0⌋/n)`, so the initial fluctuation is exactly zero.
pub fn clt_experiment(settings: &CltSettings) -> Result<Vec<CltRow>> {
    if settings.replicas < 2 {
        return Err(Error::Usage("a CLT experiment needs at least two replicas".into()));
    }
    let horizon = settings.base.horizon;
    let mut rows = Vec::with_capacity(settings.scales.len());
    for &n in &settings.scales {
        let nf = n as f64;
        let s_count = (nf * settings.s0).floor() as u64;
        let i_count = (nf * settings.i0).floor() as u64;
        let spec = ModelSpec { n, ..settings.base.spec.clone() };
        let (s0, i0) = (s_count as f64 / nf, i_count as f64 / nf);
        let sol = solve_limit(&spec, s0, i0, horizon, settings.step)?;
        let coarse = solve_limit(&spec, s0, i0, horizon, 2.0 * settings.step)?;
        let funcs = &settings.test_functions;
        let limit_pairings: Vec<f64> = funcs
            .iter()
            .map(|f| if *f == spec.psi { *sol.m.last().unwrap() } else { *sol.pairing_with(|a| f.eval_unchecked(a)).last().unwrap() })
            .collect();
        let last = sol.len() - 1;
        let (s_t, i_t) = (sol.s[last], sol.i[last]);

        let config = SimulationConfig {
            spec: spec.clone(),
            initial_susceptibles: s_count,
            initial_infectives: i_count,
            seed: settings.base.seed ^ n.wrapping_mul(0xA24B_AED4_963E_E407),
            ..settings.base.clone()
        };
        let root_n = nf.sqrt();
        let samples = map_replicas(&config, settings.replicas, |_, traj| {
            let (s_end, i_end, _) = traj.final_counts();
            let mut eta = vec![root_n * (s_end as f64 / nf - s_t), root_n * (i_end as f64 / nf - i_t)];
            let detections: Vec<f64> = traj.events.iter().filter(|e| e.event.is_detection()).map(|e| e.t).collect();
            for (f, &lim) in funcs.iter().zip(&limit_pairings) {
                let raw: f64 = detections.iter().map(|&d| f.eval_unchecked(traj.terminal_time - d)).sum();
                eta.push(root_n * (raw / nf - lim));
            }
            let g = &traj.integrals;
            let sp = &traj.config.spec;
            let compensator = g.infection_hazard - (sp.mu1 + sp.lambda2) * g.infective_time - g.tracing_hazard(sp);
            let m_i = (i_end as f64 - i_count as f64 - compensator) / nf;
            Ok((eta, root_n * m_i, traj.terminal_time < horizon))
        })?;
        if samples.iter().any(|s| s.2) {
            return Err(Error::Usage("CLT runs must reach the horizon; disable early stopping".into()));
        }

        let dim = 2 + funcs.len();
        let columns: Vec<Vec<f64>> = (0..dim).map(|k| samples.iter().map(|s| s.0[k]).collect()).collect();
        let summaries: Vec<Summary> = columns.iter().map(|c| Summary::of(c)).collect();
        let mf = settings.replicas as f64;
        let covariance = (0..dim)
            .map(|a| {
                (0..dim)
                    .map(|b| {
                        let (ma, mb) = (summaries[a].mean, summaries[b].mean);
                        columns[a].iter().zip(&columns[b]).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (mf - 1.0)
                    })
                    .collect()
            })
            .collect();
        let martingale = Summary::of(&samples.iter().map(|s| s.1).collect::<Vec<_>>());
        let sp = &sol.spec;
        let martingale_target = sol.integrate(|j| {
            sp.infection.eval(sol.s[j], sol.i[j]) + (sp.mu1 + sp.lambda2) * sol.i[j] + sp.tracing.eval(sol.i[j], sol.m[j])
        });
        let theory = match spec.psi {
            WeightFunction::Exponential { .. } => Some(*covariance_ode(&sol, zero3())?.terminal()),
            _ => None,
        };
        let cl = coarse.len() - 1;
        let grid_err = ((sol.s[last] - coarse.s[cl]).abs().max((sol.i[last] - coarse.i[cl]).abs())
            .max((sol.m[last] - coarse.m[cl]).abs()))
            / 3.0;
        let min_sd = summaries.iter().map(|s| s.variance.sqrt()).fold(f64::INFINITY, f64::min);
        let mut projections = vec!["s".to_string(), "i".to_string()];
        projections.extend(funcs.iter().map(label));
        rows.push(CltRow {
            n,
            replicas: settings.replicas,
            projections,
            summaries,
            covariance,
            theory,
            martingale_variance: martingale.variance,
            martingale_target,
            discretization_ratio: root_n * grid_err / min_sd,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::{InfectionRate, TracingRate};

    fn spec(tracing: TracingRate<f64>, infection: InfectionRate<f64>) -> ModelSpec<f64> {
        ModelSpec {
            lambda0: 0.2,
            mu0: 0.1,
            mu1: 0.2,
            lambda2: 0.3,
            infection,
            tracing,
            psi: WeightFunction::exponential(1.3),
            ..ModelSpec::zero()
        }
    }

    #[test]
    fn equilibrium_susceptible_bracket() {
        let sp = ModelSpec::<f64> { lambda0: 1.0, mu0: 1.0, psi: WeightFunction::exponential(1.0), ..ModelSpec::zero() };
        let sol = solve_limit(&sp, 1.0, 0.0, 1.0, 0.01).unwrap();
        for b in bracket_rates(&sol, |_| 1.0) {
            assert!((b[0][0] - 2.0).abs() < 1e-12);
            assert_eq!(b[0][2], 0.0);
        }
    }

    #[test]
    fn vanishing_test_function_at_zero() {
        let sol = solve_limit(&spec(TracingRate::C(1.0), InfectionRate::MassAction(2.0)), 1.0, 0.2, 2.0, 0.01).unwrap();
        for b in bracket_rates(&sol, |a| a * (-a).exp()) {
            assert_eq!(b[2][2], 0.0);
            assert_eq!(b[0][2], 0.0);
            assert_eq!(b[2][0], 0.0);
        }
    }

    #[test]
    fn drift_matches_finite_differences() {
        let c = 1.3;
        let point = [0.7, 0.25, 0.4];
        for tracing in [TracingRate::A(0.8), TracingRate::B(0.8), TracingRate::C(0.8)] {
            for infection in [InfectionRate::MassAction(2.0), InfectionRate::FrequencyDependent(2.0), InfectionRate::Linear(0.6)] {
                let sp = spec(tracing, infection);
                let a = drift_matrix(&sp, point[0], point[1], point[2], c);
                let eps = 1e-6;
                for col in 0..3 {
                    let (mut up, mut down) = (point, point);
                    up[col] += eps;
                    down[col] -= eps;
                    let (fu, fd) = (reduced_field(&sp, up, c), reduced_field(&sp, down, c));
                    for row in 0..3 {
                        let fd_val = (fu[row] - fd[row]) / (2.0 * eps);
                        assert!((a[row][col] - fd_val).abs() < 1e-6, "{tracing:?} {infection:?} [{row}][{col}]");
                    }
                }
            }
        }
    }

    #[test]
    fn decoupled_susceptible_variance() {
        let sp = ModelSpec::<f64> { lambda0: 1.0, mu0: 1.0, psi: WeightFunction::exponential(1.0), ..ModelSpec::zero() };
        let sol = solve_limit(&sp, 1.0, 0.0, 3.0, 1e-3).unwrap();
        let cov = covariance_ode(&sol, zero3()).unwrap();
        for (t, sig) in cov.times.iter().zip(&cov.sigma) {
            assert!((sig[0][0] - (1.0 - (-2.0 * t).exp())).abs() < 1e-6);
        }
    }

    #[test]
    fn no_noise_no_covariance() {
        let sp = ModelSpec::<f64> { psi: WeightFunction::exponential(1.0), ..ModelSpec::zero() };
        let sol = solve_limit(&sp, 0.0, 0.0, 1.0, 0.01).unwrap();
        let cov = covariance_ode(&sol, zero3()).unwrap();
        assert!(cov.sigma.iter().all(|s| *s == zero3::<f64>()));
    }

    #[test]
    fn covariance_stays_psd() {
        for tracing in [TracingRate::A(0.5), TracingRate::B(0.8), TracingRate::C(0.8)] {
            let sol = solve_limit(&spec(tracing, InfectionRate::MassAction(2.0)), 1.0, 0.2, 5.0, 1e-3).unwrap();
            let cov = covariance_ode(&sol, zero3()).unwrap();
            assert!(cov.sigma.iter().all(|s| is_psd(s, 1e-10)), "{tracing:?}");
        }
    }

    #[test]
    fn non_exponential_rejected() {
        let sp = ModelSpec::<f64> { psi: WeightFunction::indicator(1.0), ..spec(TracingRate::C(1.0), InfectionRate::MassAction(1.0)) };
        let sol = solve_limit(&sp, 1.0, 0.1, 1.0, 0.1).unwrap();
        assert!(matches!(covariance_ode(&sol, zero3()), Err(Error::Usage(_))));
    }
}
