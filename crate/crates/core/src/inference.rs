//! Maximum likelihood for the detection rates `(λ2, λ3)` from an event log.
//!
//! The other rates are treated as known. With `i = I/n` and `r = ⟨R,ψ⟩/n`
//! just before each event, the log-likelihood is
//!
//! ```text
//! l(θ) = Σ_{E=3} ln(λ2 i) + Σ_{E=4} ln λ3(i, r) − n ∫ (λ2 i + λ3(i, r)) dt
//! ```
//!
//! θ-independent terms such as `ln i` are kept so values compare across models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::limit::LimitSolution;
use crate::model::{EventKind, ModelSpec};
use crate::path::{path_functional, replay, PathIntegrals};
use crate::rates::TracingModel;
use crate::scalar::Scalar;
use crate::trajectory::{SimulationConfig, Trajectory};
use crate::weight::WeightFunction;

const NEWTON_MAX_ITER: usize = 200;
const NEWTON_TOL: f64 = 1e-10;
const COMPENSATOR_TOL: f64 = 1e-12;

/// `Φ(x) = ln x + 1/x − 1`, nonnegative with its only zero at `x = 1`.
pub fn phi<T: Scalar>(x: T) -> T {
    x.ln() + x.recip() - T::one()
}

/// What the likelihood needs from a path under a given weight `ψ`.
#[derive(Clone, Debug)]
pub struct Evidence<'a, T> {
    pub trajectory: &'a Trajectory<T>,
    pub psi: WeightFunction<T>,
    pub n: u64,
    /// `I` just before each spontaneous detection.
    pub spontaneous: Vec<T>,
    /// `(I, ⟨R,ψ⟩)` just before each traced detection.
    pub traced: Vec<(T, T)>,
    pub integrals: PathIntegrals<T>,
}

impl<'a, T: Scalar> Evidence<'a, T> {
    /// Collects the evidence; reuses the recorded pairings and integrals when `ψ` is the simulation weight.
    pub fn new(trajectory: &'a Trajectory<T>, psi: &WeightFunction<T>) -> Result<Self> {
        psi.validate()?;
        let n = trajectory.config.spec.n;
        let mut spontaneous = Vec::new();
        let mut traced = Vec::new();
        let integrals = if *psi == trajectory.config.spec.psi {
            for e in &trajectory.events {
                let i_pre = T::from_count(e.i + 1);
                match e.event {
                    EventKind::SpontaneousDetection => spontaneous.push(i_pre),
                    EventKind::TracedDetection => traced.push((i_pre, e.r_psi_pre)),
                    _ => {}
                }
            }
            trajectory.integrals
        } else {
            let rep = replay(trajectory, psi)?;
            for e in &rep.events {
                let i_pre = T::from_count(e.infectives_pre);
                match e.kind {
                    EventKind::SpontaneousDetection => spontaneous.push(i_pre),
                    EventKind::TracedDetection => traced.push((i_pre, e.pairing_pre)),
                    _ => {}
                }
            }
            rep.integrals
        };
        Ok(Evidence { trajectory, psi: *psi, n, spontaneous, traced, integrals })
    }

    pub fn scale(&self) -> T {
        T::from_count(self.n)
    }

    pub fn counts(&self) -> (u64, u64) {
        (self.spontaneous.len() as u64, self.traced.len() as u64)
    }

    /// `n ∫ i dt` (raw infective time).
    pub fn spontaneous_exposure(&self) -> T {
        self.integrals.infective_time
    }

    /// `D_raw` with `n ∫ λ3(i, r) dt = λ3 · D_raw` for a multiplicative tracing model.
    pub fn tracing_exposure(&self, model: TracingModel) -> T {
        self.integrals.tracing_exposure(model, self.n)
    }
}

/// Log-likelihood value, with the index of the first observed event of zero hazard if any.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihood<T> {
    pub value: T,
    pub zero_hazard_event: Option<usize>,
}

/// Log-likelihood of `(λ2, λ3)` under tracing model `model` with weight `psi`.
pub fn log_likelihood<T: Scalar>(traj: &Trajectory<T>, lambda2: T, lambda3: T, model: TracingModel, psi: &WeightFunction<T>) -> Result<LogLikelihood<T>> {
    let ev = Evidence::new(traj, psi)?;
    Ok(likelihood_of(&ev, lambda2, lambda3, model))
}

fn likelihood_of<T: Scalar>(ev: &Evidence<'_, T>, lambda2: T, lambda3: T, model: TracingModel) -> LogLikelihood<T> {
    let n = ev.scale();
    let mut value = T::zero();
    let mut zero_hazard_event = None;
    for (k, &i) in ev.spontaneous.iter().enumerate() {
        let h = lambda2 * i / n;
        if !(h > T::zero()) {
            zero_hazard_event.get_or_insert(k);
        }
        value = value + h.ln();
    }
    for (k, &(i, p)) in ev.traced.iter().enumerate() {
        let h = lambda3 * model.shape(i / n, p / n);
        if !(h > T::zero()) {
            zero_hazard_event.get_or_insert(ev.spontaneous.len() + k);
        }
        value = value + h.ln();
    }
    let compensator = lambda2 * ev.spontaneous_exposure() + lambda3 * ev.tracing_exposure(model);
    if zero_hazard_event.is_some() {
        value = T::neg_infinity();
    } else {
        value = value - compensator;
    }
    LogLikelihood { value, zero_hazard_event }
}

/// Estimates with their Fisher information and asymptotic standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub model: TracingModel,
    pub n: u64,
    /// `(λ̂2, λ̂3)` for the multiplicative models; the raw parameter vector otherwise.
    pub theta: Vec<T>,
    /// Per-unit-`n` information matrix `𝓘`.
    pub fisher: Vec<Vec<T>>,
    /// `sqrt((𝓘⁻¹)_jj / n)`; `None` for a degenerate component.
    pub std: Vec<Option<T>>,
    /// Component estimated at the boundary `0` because its event count is zero.
    pub degenerate: Vec<bool>,
    pub log_likelihood: T,
    /// `(K3, K4)`.
    pub counts: (u64, u64),
    pub integrals: PathIntegrals<T>,
    /// Newton iterations (zero for the closed form).
    pub iterations: usize,
    /// Observed information at the optimum is positive semidefinite.
    pub information_psd: bool,
}

impl<T: Scalar> FitResult<T> {
    pub fn lambda2(&self) -> T {
        self.theta[0]
    }

    pub fn lambda3(&self) -> T {
        self.theta[1]
    }
}

/// Explicit maximizer for Models A, B and C: `λ̂2 = K3 / ∫I`, `λ̂3 = K4 / D`.
pub fn fit_closed_form<T: Scalar>(traj: &Trajectory<T>, model: TracingModel, psi: &WeightFunction<T>) -> Result<FitResult<T>> {
    let ev = Evidence::new(traj, psi)?;
    closed_form(&ev, model)
}

fn closed_form<T: Scalar>(ev: &Evidence<'_, T>, model: TracingModel) -> Result<FitResult<T>> {
    let (k3, k4) = ev.counts();
    let n = ev.scale();
    let exposures = [ev.spontaneous_exposure(), ev.tracing_exposure(model)];
    let counts = [k3, k4];
    let mut theta = vec![T::zero(); 2];
    let mut fisher = vec![vec![T::zero(); 2]; 2];
    let mut std = vec![None; 2];
    let mut degenerate = vec![false; 2];
    for j in 0..2 {
        if counts[j] == 0 {
            degenerate[j] = true;
            continue;
        }
        if !(exposures[j] > T::zero()) {
            return Err(Error::InconsistentLog(format!(
                "{} detections of type {} but zero exposure",
                counts[j],
                j + 3
            )));
        }
        theta[j] = T::from_count(counts[j]) / exposures[j];
        fisher[j][j] = exposures[j] / n / theta[j];
        std[j] = Some((T::one() / (n * fisher[j][j])).sqrt());
    }
    let ll = likelihood_of(ev, theta[0], theta[1], model);
    Ok(FitResult {
        model,
        n: ev.n,
        theta,
        fisher,
        std,
        degenerate,
        log_likelihood: ll.value,
        counts: (k3, k4),
        integrals: ev.integrals,
        iterations: 0,
        information_psd: true,
    })
}

/// Value, gradient and Hessian of a scalar function of `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet<T> {
    pub value: T,
    pub grad: Vec<T>,
    pub hess: Vec<Vec<T>>,
}

impl<T: Scalar> Jet<T> {
    pub fn constant(value: T, dim: usize) -> Self {
        Jet { value, grad: vec![T::zero(); dim], hess: vec![vec![T::zero(); dim]; dim] }
    }
}

/// Twice differentiable parametrization of the detection rates.
///
/// `i` and `r` are renormalized (`I/n`, `⟨R,ψ⟩/n`).
pub trait DetectionParametrization<T: Scalar>: Sync {
    fn dim(&self) -> usize;

    fn admissible(&self, theta: &[T]) -> bool;

    /// `λ2(θ)`.
    fn spontaneous(&self, theta: &[T]) -> Jet<T>;

    /// `λ3(i, r; θ)`.
    fn tracing(&self, theta: &[T], i: T, r: T) -> Jet<T>;

    /// `n ∫ λ3(i_t, r_t; θ) dt` over the path, with the hazard switched off when `I = 0`.
    ///
    /// The default integrates every component numerically along the path.
    fn tracing_compensator(&self, theta: &[T], ev: &Evidence<'_, T>) -> Result<Jet<T>> {
        let d = self.dim();
        let n = ev.scale();
        let tol = T::lit(COMPENSATOR_TOL);
        let integrate = |pick: &dyn Fn(&Jet<T>) -> T| {
            path_functional(ev.trajectory, &ev.psi, tol, |i, p| {
                if i == T::zero() {
                    T::zero()
                } else {
                    n * pick(&self.tracing(theta, i / n, p / n))
                }
            })
        };
        let mut jet = Jet::constant(integrate(&|j| j.value)?, d);
        for a in 0..d {
            jet.grad[a] = integrate(&|j| j.grad[a])?;
            for b in a..d {
                let v = integrate(&|j| j.hess[a][b])?;
                jet.hess[a][b] = v;
                jet.hess[b][a] = v;
            }
        }
        Ok(jet)
    }
}

/// `λ2(θ) = θ_0`, `λ3(i, r; θ) = θ_1 · shape(i, r)` for Models A, B, C.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiplicativeModel(pub TracingModel);

impl<T: Scalar> DetectionParametrization<T> for MultiplicativeModel {
    fn dim(&self) -> usize {
        2
    }

    fn admissible(&self, theta: &[T]) -> bool {
        theta.iter().all(|&x| x > T::zero() && x.is_finite())
    }

    fn spontaneous(&self, theta: &[T]) -> Jet<T> {
        let mut jet = Jet::constant(theta[0], 2);
        jet.grad[0] = T::one();
        jet
    }

    fn tracing(&self, theta: &[T], i: T, r: T) -> Jet<T> {
        let shape = self.0.shape(i, r);
        let mut jet = Jet::constant(theta[1] * shape, 2);
        jet.grad[1] = shape;
        jet
    }

    fn tracing_compensator(&self, theta: &[T], ev: &Evidence<'_, T>) -> Result<Jet<T>> {
        let d = ev.tracing_exposure(self.0);
        let mut jet = Jet::constant(theta[1] * d, 2);
        jet.grad[1] = d;
        Ok(jet)
    }
}

/// Log-likelihood with score and Hessian under a parametrization.
pub fn likelihood_jet<T: Scalar>(param: &dyn DetectionParametrization<T>, theta: &[T], ev: &Evidence<'_, T>) -> Result<Jet<T>> {
    let d = param.dim();
    let n = ev.scale();
    let mut out = Jet::constant(T::zero(), d);
    let mut add_log = |jet: &Jet<T>, extra: T| {
        // ln(h·extra) with h = jet.value
        let h = jet.value;
        out.value = out.value + (h * extra).ln();
        for a in 0..d {
            out.grad[a] = out.grad[a] + jet.grad[a] / h;
            for b in 0..d {
                out.hess[a][b] = out.hess[a][b] + jet.hess[a][b] / h - jet.grad[a] * jet.grad[b] / (h * h);
            }
        }
    };
    let l2 = param.spontaneous(theta);
    for &i in &ev.spontaneous {
        add_log(&l2, i / n);
    }
    for &(i, p) in &ev.traced {
        add_log(&param.tracing(theta, i / n, p / n), T::one());
    }
    let comp3 = param.tracing_compensator(theta, ev)?;
    let expo = ev.spontaneous_exposure();
    out.value = out.value - l2.value * expo - comp3.value;
    for a in 0..d {
        out.grad[a] = out.grad[a] - l2.grad[a] * expo - comp3.grad[a];
        for b in 0..d {
            out.hess[a][b] = out.hess[a][b] - l2.hess[a][b] * expo - comp3.hess[a][b];
        }
    }
    Ok(out)
}

/// Solves `a x = rhs` by Gaussian elimination with partial pivoting.
fn solve<T: Scalar>(mut a: Vec<Vec<T>>, mut rhs: Vec<T>) -> Option<Vec<T>> {
    let d = rhs.len();
    for col in 0..d {
        let pivot = (col..d).max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap_or(std::cmp::Ordering::Equal))?;
        if a[pivot][col] == T::zero() || !a[pivot][col].is_finite() {
            return None;
        }
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..d {
            let f = a[row][col] / a[col][col];
            for k in col..d {
                let v = a[col][k];
                a[row][k] = a[row][k] - f * v;
            }
            rhs[row] = rhs[row] - f * rhs[col];
        }
    }
    let mut x = vec![T::zero(); d];
    for row in (0..d).rev() {
        let mut acc = rhs[row];
        for k in row + 1..d {
            acc = acc - a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Whether a symmetric matrix is positive definite (Cholesky succeeds).
fn positive_definite<T: Scalar>(m: &[Vec<T>]) -> bool {
    let d = m.len();
    let mut l = vec![vec![T::zero(); d]; d];
    for j in 0..d {
        let mut diag = m[j][j];
        for k in 0..j {
            diag = diag - l[j][k] * l[j][k];
        }
        if !(diag > T::zero()) {
            return false;
        }
        l[j][j] = diag.sqrt();
        for i in j + 1..d {
            let mut v = m[i][j];
            for k in 0..j {
                v = v - l[i][k] * l[j][k];
            }
            l[i][j] = v / l[j][j];
        }
    }
    true
}

fn inverse<T: Scalar>(m: &[Vec<T>]) -> Option<Vec<Vec<T>>> {
    let d = m.len();
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        let mut e = vec![T::zero(); d];
        e[j] = T::one();
        cols.push(solve(m.to_vec(), e)?);
    }
    Some((0..d).map(|r| (0..d).map(|c| cols[c][r]).collect()).collect())
}

/// Newton's method on the analytic score and Hessian, with step halving.
///
/// Converged when `|∇l| < 1e-10 (1 + |l|)`. The reported standard deviations
/// come from the observed information `−∇²l`.
pub fn fit_numeric<T: Scalar>(
    traj: &Trajectory<T>,
    param: &dyn DetectionParametrization<T>,
    model: TracingModel,
    psi: &WeightFunction<T>,
    theta_init: &[T],
) -> Result<FitResult<T>> {
    let ev = Evidence::new(traj, psi)?;
    newton(&ev, param, model, theta_init)
}

fn newton<T: Scalar>(ev: &Evidence<'_, T>, param: &dyn DetectionParametrization<T>, model: TracingModel, theta_init: &[T]) -> Result<FitResult<T>> {
    let d = param.dim();
    if theta_init.len() != d || !param.admissible(theta_init) {
        return Err(Error::Usage("initial parameter outside the admissible region".into()));
    }
    let tol = T::lit(NEWTON_TOL);
    let mut theta = theta_init.to_vec();
    let mut jet = likelihood_jet(param, &theta, ev)?;
    let mut trace = Vec::new();
    for iter in 1..=NEWTON_MAX_ITER {
        let gnorm = jet.grad.iter().map(|&g| g * g).sum::<T>().sqrt();
        trace.push(format!("iter {iter}: l = {}, |score| = {}", jet.value, gnorm));
        if gnorm < tol * (T::one() + jet.value.abs()) {
            return finish(ev, param, model, theta, jet, iter);
        }
        let neg_h: Vec<Vec<T>> = jet.hess.iter().map(|row| row.iter().map(|&v| -v).collect()).collect();
        // ascent direction: Newton if −H is positive definite, scaled gradient otherwise
        let dir = if positive_definite(&neg_h) {
            solve(neg_h, jet.grad.clone()).unwrap_or_else(|| jet.grad.clone())
        } else {
            jet.grad.clone()
        };
        let mut step = T::one();
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<T> = theta.iter().zip(&dir).map(|(&t, &g)| t + step * g).collect();
            if param.admissible(&cand) {
                let cj = likelihood_jet(param, &cand, ev)?;
                // near the optimum the change in l is below rounding; do not halve on noise
                let slack = T::lit(1e-13) * (T::one() + jet.value.abs());
                if cj.value.is_finite() && cj.value >= jet.value - slack {
                    theta = cand;
                    jet = cj;
                    accepted = true;
                    break;
                }
            }
            step = step * T::lit(0.5);
        }
        if !accepted {
            return Err(Error::Divergence { iterations: iter, reason: format!("no ascent step found; trace: {}", trace.join("; ")) });
        }
    }
    Err(Error::Divergence { iterations: NEWTON_MAX_ITER, reason: format!("score did not vanish; trace: {}", trace.join("; ")) })
}

fn finish<T: Scalar>(ev: &Evidence<'_, T>, param: &dyn DetectionParametrization<T>, model: TracingModel, theta: Vec<T>, jet: Jet<T>, iterations: usize) -> Result<FitResult<T>> {
    let d = param.dim();
    let n = ev.scale();
    let observed: Vec<Vec<T>> = jet.hess.iter().map(|row| row.iter().map(|&v| -v).collect()).collect();
    let information_psd = positive_definite(&observed);
    let std = match inverse(&observed) {
        Some(inv) => (0..d).map(|j| (inv[j][j] > T::zero()).then(|| inv[j][j].sqrt())).collect(),
        None => vec![None; d],
    };
    let fisher = observed.iter().map(|row| row.iter().map(|&v| v / n).collect()).collect();
    Ok(FitResult {
        model,
        n: ev.n,
        theta,
        fisher,
        std,
        degenerate: vec![false; d],
        log_likelihood: jet.value,
        counts: ev.counts(),
        integrals: ev.integrals,
        iterations,
        information_psd,
    })
}

/// `K(θ, θ*) = ∫ λ2* i Φ(λ2*/λ2) dt + ∫ λ3* Φ(λ3*/λ3) dt` along the limit path of `θ*`.
///
/// Terms where the true hazard vanishes contribute zero.
pub fn contrast<T: Scalar>(param: &dyn DetectionParametrization<T>, theta: &[T], theta_star: &[T], limit: &LimitSolution<T>) -> T {
    let l2 = param.spontaneous(theta).value;
    let l2s = param.spontaneous(theta_star).value;
    let term = |truth: T, alt: T| if truth > T::zero() { truth * phi(truth / alt) } else { T::zero() };
    limit.integrate(|j| {
        let (i, m) = (limit.i[j], limit.m[j]);
        let t3 = param.tracing(theta_star, i, m).value;
        let a3 = param.tracing(theta, i, m).value;
        term(l2s * i, l2 * i) + term(t3, a3)
    })
}

/// `𝓘_θ* = ∫ ∇λ2 ∇λ2ᵀ i / λ2 dt + ∫ ∇λ3 ∇λ3ᵀ / λ3 dt` along the limit path.
pub fn fisher_information<T: Scalar>(param: &dyn DetectionParametrization<T>, theta_star: &[T], limit: &LimitSolution<T>) -> Vec<Vec<T>> {
    let d = param.dim();
    let l2 = param.spontaneous(theta_star);
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    limit.integrate(|j| {
                        let (i, m) = (limit.i[j], limit.m[j]);
                        let mut v = if l2.value > T::zero() { l2.grad[a] * l2.grad[b] * i / l2.value } else { T::zero() };
                        let l3 = param.tracing(theta_star, i, m);
                        if l3.value > T::zero() {
                            v = v + l3.grad[a] * l3.grad[b] / l3.value;
                        }
                        v
                    })
                })
                .collect()
        })
        .collect()
}

/// Settings of a consistency experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySettings {
    /// True model (`λ2*`, tracing coefficient `λ3*`), horizon and master seed.
    pub base: SimulationConfig<f64>,
    /// Initial densities; counts are `⌊n s0⌋`, `⌊n i0⌋`.
    pub s0: f64,
    pub i0: f64,
    pub scales: Vec<u64>,
    pub replicas: u64,
    /// Also run Newton on every replica and record the largest relative gap to the closed form.
    pub cross_check_newton: bool,
}

/// Monte Carlo behaviour of one estimator component at one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub truth: f64,
    pub mean: f64,
    pub bias_std_error: f64,
    pub rmse: f64,
    /// Fraction of `θ̂ ± 1.96 std` intervals containing the truth.
    pub coverage: f64,
    /// Normality z-scores of `(θ̂ − θ*)/std`.
    pub standardized: crate::stats::Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub n: u64,
    pub used: u64,
    /// Replicas dropped because `K3` or `K4` was zero.
    pub excluded: u64,
    pub mean_counts: (f64, f64),
    pub lambda2: EstimatorStats,
    pub lambda3: EstimatorStats,
    pub max_newton_gap: Option<f64>,
}

fn estimator_stats(truth: f64, est: &[(f64, f64)]) -> EstimatorStats {
    let m = est.len() as f64;
    let values: Vec<f64> = est.iter().map(|e| e.0).collect();
    let s = crate::stats::Summary::of(&values);
    let rmse = (values.iter().map(|v| (v - truth) * (v - truth)).sum::<f64>() / m).sqrt();
    let covered = est.iter().filter(|(v, sd)| (v - truth).abs() <= 1.96 * sd).count() as f64;
    let z: Vec<f64> = est.iter().map(|(v, sd)| (v - truth) / sd).collect();
    EstimatorStats { truth, mean: s.mean, bias_std_error: s.std_error, rmse, coverage: covered / m, standardized: crate::stats::Summary::of(&z) }
}

/// Simulates logs at each scale, fits them in closed form and summarizes the estimators.
pub fn consistency_experiment(settings: &ConsistencySettings) -> Result<Vec<ConsistencyRow>> {
    let spec = &settings.base.spec;
    let model = spec.tracing.model();
    let truth = (spec.lambda2, spec.tracing.coefficient());
    let mut rows = Vec::new();
    for &n in &settings.scales {
        let nf = n as f64;
        let config = SimulationConfig {
            spec: ModelSpec { n, ..spec.clone() },
            initial_susceptibles: (nf * settings.s0).floor() as u64,
            initial_infectives: (nf * settings.i0).floor() as u64,
            seed: settings.base.seed ^ n.wrapping_mul(0xD1B5_4A32_D192_ED03),
            ..settings.base.clone()
        };
        let psi = config.spec.psi;
        let fits = crate::simulate::map_replicas(&config, settings.replicas, |_, traj| {
            let ev = Evidence::new(&traj, &psi)?;
            let fit = closed_form(&ev, model)?;
            if fit.degenerate.iter().any(|&d| d) {
                return Ok(None);
            }
            let gap = if settings.cross_check_newton {
                let start = [fit.lambda2() * 1.3, fit.lambda3() * 0.7];
                let num = newton(&ev, &MultiplicativeModel(model), model, &start)?;
                let rel = |a: f64, b: f64| ((a - b) / b).abs();
                Some(rel(num.lambda2(), fit.lambda2()).max(rel(num.lambda3(), fit.lambda3())))
            } else {
                None
            };
            Ok(Some((fit, gap)))
        })?;
        let used: Vec<_> = fits.iter().flatten().collect();
        let excluded = settings.replicas - used.len() as u64;
        if used.len() < 2 {
            return Err(Error::Usage(format!("fewer than two usable replicas at n = {n}")));
        }
        let pick = |j: usize| -> Vec<(f64, f64)> { used.iter().map(|(f, _)| (f.theta[j], f.std[j].unwrap_or(f64::NAN))).collect() };
        let k = used.len() as f64;
        rows.push(ConsistencyRow {
            n,
            used: used.len() as u64,
            excluded,
            mean_counts: (
                used.iter().map(|(f, _)| f.counts.0 as f64).sum::<f64>() / k,
                used.iter().map(|(f, _)| f.counts.1 as f64).sum::<f64>() / k,
            ),
            lambda2: estimator_stats(truth.0, &pick(0)),
            lambda3: estimator_stats(truth.1, &pick(1)),
            max_newton_gap: settings.cross_check_newton.then(|| used.iter().filter_map(|(_, g)| *g).fold(0.0, f64::max)),
        });
    }
    Ok(rows)
}
