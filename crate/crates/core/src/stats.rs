//! Small Monte Carlo summaries: moments, normality z-scores, chi-square tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Moments of a sample plus skewness/kurtosis z-scores under normality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Unbiased variance.
    pub variance: f64,
    pub std_error: f64,
    /// Sample skewness over its normal-theory sd `sqrt(6/M)`.
    pub skewness_z: f64,
    /// Excess kurtosis over its normal-theory sd `sqrt(24/M)`.
    pub kurtosis_z: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let m = xs.len();
        let mf = m as f64;
        let mean = xs.iter().sum::<f64>() / mf;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for &x in xs {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let variance = if m > 1 { m2 / (mf - 1.0) } else { 0.0 };
        let (m2, m3, m4) = (m2 / mf, m3 / mf, m4 / mf);
        let (skew, kurt) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0) } else { (0.0, 0.0) };
        Summary {
            count: m,
            mean,
            variance,
            std_error: (variance / mf).sqrt(),
            skewness_z: skew / (6.0 / mf).sqrt(),
            kurtosis_z: kurt / (24.0 / mf).sqrt(),
        }
    }

    /// `(mean - target) / std_error`.
    pub fn z(&self, target: f64) -> f64 {
        (self.mean - target) / self.std_error
    }
}

/// Unbiased sample covariance of the columns of `rows`.
pub fn covariance<const D: usize>(rows: &[[f64; D]]) -> [[f64; D]; D] {
    let m = rows.len() as f64;
    let mut mean = [0.0; D];
    for r in rows {
        for a in 0..D {
            mean[a] += r[a] / m;
        }
    }
    let mut cov = [[0.0; D]; D];
    for r in rows {
        for a in 0..D {
            for b in 0..D {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (m - 1.0);
            }
        }
    }
    cov
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Pooled `(observed, expected)` cells.
    pub cells: Vec<(f64, f64)>,
}

/// Pearson goodness-of-fit test of counts against expected counts.
///
/// Adjacent cells are pooled left to right until each has expected count at
/// least 5 (a short last run is merged into its neighbour).
pub fn chi_square(observed: &[u64], expected: &[f64]) -> Result<ChiSquareTest> {
    if observed.len() != expected.len() {
        return Err(Error::Usage("observed and expected cell counts differ in length".into()));
    }
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut run = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        run.0 += o as f64;
        run.1 += e;
        if run.1 >= 5.0 {
            cells.push(run);
            run = (0.0, 0.0);
        }
    }
    if run.0 > 0.0 || run.1 > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += run.0;
                last.1 += run.1;
            }
            None => cells.push(run),
        }
    }
    if cells.len() < 2 {
        return Err(Error::Usage("chi-square test needs at least two cells with expected count >= 5".into()));
    }
    let statistic = cells.iter().map(|&(o, e)| (o - e) * (o - e) / e).sum::<f64>();
    let dof = cells.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Usage(e.to_string()))?;
    Ok(ChiSquareTest { statistic, dof, p_value: dist.sf(statistic), cells })
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
