//! Deterministic large-population limit.
//!
//! The removed density is transported in age, `ρ_t(a) = b(t − a)`, so the
//! whole age structure enters the dynamics through `m_t = ∫ψ(a) b(t − a) da`.
//! `(s, i)` are stepped with Heun's method; at every stage `m` is obtained
//! from the discrete convolution, which is implicit in the newest boundary
//! value and is closed with a scalar Newton solve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::scalar::Scalar;
use crate::weight::WeightFunction;

/// Grid solution of the limit system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitSolution<T> {
    pub spec: ModelSpec<T>,
    pub step: T,
    pub times: Vec<T>,
    pub s: Vec<T>,
    pub i: Vec<T>,
    /// Boundary density `b_t = ρ_t(0) = λ2 i_t + λ3(i_t, m_t)`.
    pub b: Vec<T>,
    /// `m_t = ⟨r_t, ψ⟩`.
    pub m: Vec<T>,
}

impl<T: Scalar> LimitSolution<T> {
    pub fn horizon(&self) -> T {
        *self.times.last().expect("nonempty grid")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn locate(&self, t: T) -> Result<(usize, T)> {
        let horizon = self.horizon();
        if !(t >= T::zero() && t <= horizon) {
            return Err(Error::Domain(format!("time {t} outside the solved range [0, {horizon}]")));
        }
        let x = t / self.step;
        let k = x.floor().to_usize().unwrap_or(0).min(self.len() - 1);
        if k + 1 >= self.len() {
            return Ok((self.len() - 1, T::zero()));
        }
        Ok((k, x - T::from_count(k as u64)))
    }

    fn interp(&self, v: &[T], t: T) -> Result<T> {
        let (k, w) = self.locate(t)?;
        if w == T::zero() {
            return Ok(v[k]);
        }
        Ok(v[k] + w * (v[k + 1] - v[k]))
    }

    /// `(s_t, i_t, m_t)` by linear interpolation.
    pub fn state_at(&self, t: T) -> Result<(T, T, T)> {
        Ok((self.interp(&self.s, t)?, self.interp(&self.i, t)?, self.interp(&self.m, t)?))
    }

    /// `ρ_t(a) = b(t − a)` for `a <= t`, zero for older ages.
    pub fn evaluate_density(&self, t: T, a: T) -> Result<T> {
        self.locate(t)?;
        if a < T::zero() || a.is_nan() {
            return Err(Error::Domain(format!("negative age {a}")));
        }
        if a > t {
            return Ok(T::zero());
        }
        if a == T::zero() {
            if let Ok((k, w)) = self.locate(t) {
                if w == T::zero() {
                    return Ok(self.b[k]);
                }
            }
        }
        self.interp(&self.b, t - a)
    }

    /// `⟨r_{t_j}, f⟩` on the grid, trapezoid in age with `b` piecewise linear.
    pub fn pairing_with(&self, f: impl Fn(T) -> T) -> Vec<T> {
        let h = self.step;
        let half = T::lit(0.5);
        let fk: Vec<T> = (0..self.len()).map(|k| f(T::from_count(k as u64) * h)).collect();
        (0..self.len())
            .map(|j| {
                if j == 0 {
                    return T::zero();
                }
                let mut acc = half * (fk[0] * self.b[j] + fk[j] * self.b[0]);
                for k in 1..j {
                    acc = acc + fk[k] * self.b[j - k];
                }
                acc * h
            })
            .collect()
    }

    /// `∫_0^{t_j} b du` by composite Simpson (trapezoid on a trailing odd panel).
    pub fn cumulative_boundary(&self) -> Vec<T> {
        let h = self.step;
        let mut out = vec![T::zero(); self.len()];
        for j in 1..self.len() {
            out[j] = if j % 2 == 0 {
                out[j - 2] + h / T::lit(3.0) * (self.b[j - 2] + T::lit(4.0) * self.b[j - 1] + self.b[j])
            } else if j == 1 {
                T::lit(0.5) * h * (self.b[0] + self.b[1])
            } else {
                // Simpson 3/8 over the last three panels keeps the odd index fourth order
                out[j - 3]
                    + T::lit(3.0 / 8.0) * h * (self.b[j - 3] + T::lit(3.0) * self.b[j - 2] + T::lit(3.0) * self.b[j - 1] + self.b[j])
            };
        }
        out
    }

    /// `∫ g(t) dt` over the grid by the trapezoid rule, for `g` given per grid index.
    pub fn integrate(&self, g: impl Fn(usize) -> T) -> T {
        let n = self.len();
        if n < 2 {
            return T::zero();
        }
        let half = T::lit(0.5);
        let mut acc = half * (g(0) + g(n - 1));
        for j in 1..n - 1 {
            acc = acc + g(j);
        }
        acc * self.step
    }
}

fn grid_size<T: Scalar>(horizon: T, h: T) -> Result<usize> {
    if !(h > T::zero() && h.is_finite()) {
        return Err(Error::Usage(format!("step must be > 0, got {h}")));
    }
    if !(horizon > T::zero() && horizon.is_finite()) {
        return Err(Error::Usage(format!("horizon must be > 0, got {horizon}")));
    }
    let ratio = horizon / h;
    let n = ratio.round();
    if (ratio - n).abs() > T::lit(1e-6) * n.max(T::one()) || n < T::one() {
        return Err(Error::Usage(format!("horizon {horizon} is not an integer multiple of step {h}")));
    }
    n.to_usize().ok_or_else(|| Error::Usage("grid too large".into()))
}

/// Quadrature weights of `∫_0^{t_j} ψ(a) b(t_j − a) da ≈ w0 b_j + Σ_{k=1}^{j-1} w_k b_{j−k} + e_j b_0`.
struct ConvolutionWeights<T> {
    zero: T,
    interior: Vec<T>,
    end: Vec<T>,
    /// Largest `k` with a nonzero interior weight.
    support: usize,
}

impl<T: Scalar> ConvolutionWeights<T> {
    fn new(psi: &WeightFunction<T>, h: T, n: usize) -> Self {
        let half = T::lit(0.5);
        let at = |k: usize| T::from_count(k as u64) * h;
        match *psi {
            WeightFunction::Indicator { window } => {
                // b piecewise linear, ψ integrated exactly against each hat function
                let left = |k: usize| {
                    let x = (window - at(k - 1)).min(h);
                    if x > T::zero() { x * x / (T::lit(2.0) * h) } else { T::zero() }
                };
                let right = |k: usize| {
                    let y = (window - at(k)).min(h);
                    if y > T::zero() { y - y * y / (T::lit(2.0) * h) } else { T::zero() }
                };
                let interior: Vec<T> = (0..=n).map(|k| if k == 0 { T::zero() } else { left(k) + right(k) }).collect();
                let end: Vec<T> = (0..=n).map(|k| if k == 0 { T::zero() } else { left(k) }).collect();
                let support = (window / h).ceil().to_usize().unwrap_or(n).saturating_add(1).min(n);
                ConvolutionWeights { zero: right(0), interior, end, support }
            }
            _ => {
                let vals: Vec<T> = (0..=n).map(|k| psi.eval_unchecked(at(k))).collect();
                ConvolutionWeights {
                    zero: half * h * vals[0],
                    interior: vals.iter().map(|&v| h * v).collect(),
                    end: vals.iter().map(|&v| half * h * v).collect(),
                    support: n,
                }
            }
        }
    }

    /// Contribution of the known values `b_0..b_{j-1}` to `m_j`.
    fn history(&self, b: &[T], j: usize) -> T {
        if j == 0 {
            return T::zero();
        }
        let mut acc = self.end[j] * b[0];
        for k in 1..j.min(self.support + 1) {
            acc = acc + self.interior[k] * b[j - k];
        }
        acc
    }
}

struct Rhs<'a, T> {
    spec: &'a ModelSpec<T>,
}

impl<T: Scalar> Rhs<'_, T> {
    fn boundary(&self, i: T, m: T) -> T {
        self.spec.lambda2 * i + self.spec.tracing.eval(i, m)
    }

    fn field(&self, s: T, i: T, m: T) -> (T, T) {
        let sp = self.spec;
        let inf = sp.infection.eval(s, i);
        (sp.lambda0 - sp.mu0 * s - inf, inf - (sp.mu1 + sp.lambda2) * i - sp.tracing.eval(i, m))
    }

    /// Solves `m = history + w0 (λ2 i + λ3(i, m))` by Newton's method.
    fn close(&self, history: T, w0: T, i: T) -> T {
        let mut m = history + w0 * self.boundary(i, history);
        for _ in 0..50 {
            let g = m - history - w0 * self.boundary(i, m);
            let (_, dr) = self.spec.tracing.partials(i, m);
            let dm = g / (T::one() - w0 * dr);
            m = m - dm;
            if dm.abs() <= T::epsilon() * (T::one() + m.abs()) {
                break;
            }
        }
        m
    }
}

fn check_sign<T: Scalar>(t: T, h: T, values: [(&'static str, T); 4]) -> Result<()> {
    let floor = -T::lit(10.0) * h * h;
    for (what, v) in values {
        if !(v >= floor) {
            return Err(Error::Instability { time: t.as_f64(), what, value: v.as_f64() });
        }
    }
    Ok(())
}

fn validate_inputs<T: Scalar>(spec: &ModelSpec<T>, s0: T, i0: T) -> Result<()> {
    spec.validate()?;
    if !(s0 >= T::zero() && i0 >= T::zero() && s0.is_finite() && i0.is_finite()) {
        return Err(Error::Usage(format!("initial densities must be finite and >= 0, got ({s0}, {i0})")));
    }
    Ok(())
}

/// Solves the limit system on `[0, horizon]` with step `h` (`horizon/h` integral).
///
/// Second order: Heun in time, trapezoidal convolution (exact hat-function
/// weights for indicator `ψ`, whose jump would otherwise cost an order).
/// The scale `n` of `spec` is ignored.
pub fn solve_limit<T: Scalar>(spec: &ModelSpec<T>, s0: T, i0: T, horizon: T, h: T) -> Result<LimitSolution<T>> {
    validate_inputs(spec, s0, i0)?;
    let n = grid_size(horizon, h)?;
    let weights = ConvolutionWeights::new(&spec.psi, h, n);
    let rhs = Rhs { spec };
    let half = T::lit(0.5);

    let mut s = Vec::with_capacity(n + 1);
    let mut i = Vec::with_capacity(n + 1);
    let mut b = Vec::with_capacity(n + 1);
    let mut m = Vec::with_capacity(n + 1);
    s.push(s0);
    i.push(i0);
    m.push(T::zero());
    b.push(rhs.boundary(i0, T::zero()));

    for j in 0..n {
        let t_next = T::from_count(j as u64 + 1) * h;
        let history = weights.history(&b, j + 1);
        let (ds, di) = rhs.field(s[j], i[j], m[j]);
        let (sp, ip) = (s[j] + h * ds, i[j] + h * di);
        let mp = rhs.close(history, weights.zero, ip);
        let (ds2, di2) = rhs.field(sp, ip, mp);
        let s_new = s[j] + half * h * (ds + ds2);
        let i_new = i[j] + half * h * (di + di2);
        let m_new = rhs.close(history, weights.zero, i_new);
        let b_new = rhs.boundary(i_new, m_new);
        check_sign(t_next, h, [("s", s_new), ("i", i_new), ("b", b_new), ("m", m_new)])?;
        s.push(s_new);
        i.push(i_new);
        m.push(m_new);
        b.push(b_new);
    }
    let times = (0..=n).map(|k| T::from_count(k as u64) * h).collect();
    Ok(LimitSolution { spec: spec.clone(), step: h, times, s, i, b, m })
}

/// Same system for `ψ(a) = e^{-ca}`, where `m` obeys `dm/dt = b − c m` and no convolution is needed.
pub fn solve_limit_exponential_reduction<T: Scalar>(spec: &ModelSpec<T>, s0: T, i0: T, horizon: T, h: T) -> Result<LimitSolution<T>> {
    let c = match spec.psi {
        WeightFunction::Exponential { rate } => rate,
        _ => return Err(Error::Usage("the exponential reduction needs an exponential weight function".into())),
    };
    validate_inputs(spec, s0, i0)?;
    let n = grid_size(horizon, h)?;
    let rhs = Rhs { spec };
    let half = T::lit(0.5);
    let field = |s: T, i: T, m: T| {
        let (ds, di) = rhs.field(s, i, m);
        (ds, di, rhs.boundary(i, m) - c * m)
    };

    let (mut s, mut i, mut m) = (vec![s0], vec![i0], vec![T::zero()]);
    let mut b = vec![rhs.boundary(i0, T::zero())];
    for j in 0..n {
        let (ds, di, dm) = field(s[j], i[j], m[j]);
        let (sp, ip, mp) = (s[j] + h * ds, i[j] + h * di, m[j] + h * dm);
        let (ds2, di2, dm2) = field(sp, ip, mp);
        let s_new = s[j] + half * h * (ds + ds2);
        let i_new = i[j] + half * h * (di + di2);
        let m_new = m[j] + half * h * (dm + dm2);
        let b_new = rhs.boundary(i_new, m_new);
        check_sign(T::from_count(j as u64 + 1) * h, h, [("s", s_new), ("i", i_new), ("b", b_new), ("m", m_new)])?;
        s.push(s_new);
        i.push(i_new);
        m.push(m_new);
        b.push(b_new);
    }
    let times = (0..=n).map(|k| T::from_count(k as u64) * h).collect();
    Ok(LimitSolution { spec: spec.clone(), step: h, times, s, i, b, m })
}
