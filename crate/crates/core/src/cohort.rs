//! The removed class as a point measure over detection ages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::weight::WeightFunction;

/// Detection times of removed individuals, stored as absolute times.
///
/// Ages are never stored: the age of an individual detected at `d` is `t - d`
/// at time `t`, so aging is implicit and exact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgedCohort<T> {
    detections: Vec<T>,
}

impl<T: Scalar> AgedCohort<T> {
    pub fn new() -> Self {
        Self { detections: Vec::new() }
    }

    /// Builds a cohort from detection times, which must be nondecreasing.
    pub fn from_detections(detections: Vec<T>) -> Result<Self> {
        if detections.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Domain("detection times must be nondecreasing".into()));
        }
        Ok(Self { detections })
    }

    /// Appends a detection at `time`.
    pub fn insert(&mut self, time: T) -> Result<()> {
        if let Some(&last) = self.detections.last() {
            if time < last {
                return Err(Error::Domain(format!("detection at {time} precedes last detection {last}")));
            }
        }
        self.detections.push(time);
        Ok(())
    }

    /// `⟨R, 1⟩`.
    pub fn count(&self) -> u64 {
        self.detections.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn detections(&self) -> &[T] {
        &self.detections
    }

    /// `⟨R_t, ψ⟩ = Σ ψ(t - d_i)`.
    pub fn pairing(&self, psi: &WeightFunction<T>, t: T) -> Result<T> {
        if let Some(&last) = self.detections.last() {
            if last > t {
                return Err(Error::Domain(format!("detection at {last} lies after evaluation time {t}")));
            }
        }
        Ok(self.detections.iter().map(|&d| psi.eval_unchecked(t - d)).sum())
    }
}
