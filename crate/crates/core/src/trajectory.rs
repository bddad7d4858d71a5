//! Simulation configuration, event records and sampled trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EventKind, ModelSpec};
use crate::path::PathIntegrals;
use crate::scalar::Scalar;

/// When to stop a run besides reaching the horizon.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopRule {
    /// Stop as soon as no infective is left.
    pub on_extinction: bool,
    /// Stop after this many accepted events.
    pub max_events: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig<T> {
    pub spec: ModelSpec<T>,
    pub initial_susceptibles: u64,
    pub initial_infectives: u64,
    pub horizon: T,
    pub stop: StopRule,
    pub seed: u64,
    /// Record proposal/rejection counts of the thinning step.
    pub thinning_stats: bool,
}

impl<T: Scalar> SimulationConfig<T> {
    pub fn new(spec: ModelSpec<T>, initial_susceptibles: u64, initial_infectives: u64, horizon: T) -> Self {
        Self {
            spec,
            initial_susceptibles,
            initial_infectives,
            horizon,
            stop: StopRule::default(),
            seed: 0,
            thinning_stats: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.horizon.is_finite() && self.horizon > T::zero()) {
            return Err(Error::InvalidModel(format!("horizon must be finite and > 0, got {}", self.horizon)));
        }
        Ok(())
    }

    /// Time at which a run with these events ended.
    ///
    /// Derived from the stop rule, so an event log plus its configuration is
    /// enough to recover the observation window.
    pub fn terminal_time(&self, events: &[EventRecord<T>]) -> T {
        match events.last() {
            None if self.stop.on_extinction && self.initial_infectives == 0 => T::zero(),
            None => self.horizon,
            Some(last) => {
                let capped = self.stop.max_events.is_some_and(|m| events.len() as u64 >= m);
                if capped || (self.stop.on_extinction && last.i == 0) {
                    last.t
                } else {
                    self.horizon
                }
            }
        }
    }
}

/// One accepted event with the post-event state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord<T> {
    pub k: u64,
    pub t: T,
    pub event: EventKind,
    #[serde(rename = "S")]
    pub s: u64,
    #[serde(rename = "I")]
    pub i: u64,
    #[serde(rename = "R_count")]
    pub r_count: u64,
    /// `⟨R,ψ⟩` just before the event.
    pub r_psi_pre: T,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinningStats {
    /// Candidate jumps landing in the tracing slot of the envelope.
    pub tracing_proposals: u64,
    pub rejections: u64,
}

/// A complete simulated (or ingested) path.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub config: SimulationConfig<T>,
    pub events: Vec<EventRecord<T>>,
    pub terminal_time: T,
    /// Path integrals under the configuration's weight function.
    pub integrals: PathIntegrals<T>,
    pub thinning: Option<ThinningStats>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn spec(&self) -> &ModelSpec<T> {
        &self.config.spec
    }

    /// Counts `(S, I, R)` after the last event.
    pub fn final_counts(&self) -> (u64, u64, u64) {
        self.events
            .last()
            .map(|e| (e.s, e.i, e.r_count))
            .unwrap_or((self.config.initial_susceptibles, self.config.initial_infectives, 0))
    }

    /// Counts `(S, I, R)` in force at time `t` (right-continuous).
    pub fn counts_at(&self, t: T) -> (u64, u64, u64) {
        let idx = self.events.partition_point(|e| e.t <= t);
        if idx == 0 {
            (self.config.initial_susceptibles, self.config.initial_infectives, 0)
        } else {
            let e = &self.events[idx - 1];
            (e.s, e.i, e.r_count)
        }
    }

    pub fn count_of(&self, kind: EventKind) -> u64 {
        self.events.iter().filter(|e| e.event == kind).count() as u64
    }
}
