//! Stochastic SIR epidemics with contact-tracing: simulation, deterministic
//! limit, fluctuations and likelihood inference of detection rates.
//!
//! Numerical routines are generic over [`Scalar`] (`f32` or `f64`). The
//! aliases at the crate root fix the scalar to `f64`, which is what the CLI
//! and file formats use.

pub mod cohort;
pub mod error;
pub mod fluct;
pub mod inference;
pub mod io;
pub mod limit;
pub mod model;
pub mod oracle;
pub mod path;
pub mod quad;
pub mod rates;
pub mod scalar;
pub mod simulate;
pub mod stats;
pub mod trajectory;
pub mod weight;

pub use cohort::AgedCohort;
pub use error::{Error, Result};
pub use limit::{solve_limit, solve_limit_exponential_reduction, LimitSolution};
pub use model::{EpidemicState, EventKind, EventRates, ModelSpec};
pub use path::{path_functional, path_integrals, replay, sample_grid, verify_replay, GridPoint, PathIntegrals};
pub use rates::{InfectionRate, TracingModel, TracingRate};
pub use scalar::Scalar;
pub use simulate::{ensemble, map_replicas, replica_seed, simulate, EnsembleMoments};
pub use trajectory::{EventRecord, SimulationConfig, StopRule, ThinningStats, Trajectory};
pub use weight::WeightFunction;

pub type Spec = ModelSpec<f64>;
pub type Config = SimulationConfig<f64>;
pub type Path = Trajectory<f64>;
pub type Weight = WeightFunction<f64>;
pub type Spec32 = ModelSpec<f32>;
pub type Path32 = Trajectory<f32>;
