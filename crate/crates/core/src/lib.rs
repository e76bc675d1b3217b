//! Deterministic simulation of federated averaging under heterogeneous and
//! unknown client participation, with online estimation of aggregation
//! weights and the baseline aggregators it is compared against.

pub mod config;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod participation;
pub mod rng;
pub mod weighting;

pub use config::ExperimentConfig;
pub use engine::{run_experiment, RoundRecord, RunFailure, RunOutput, Setup, Simulation, Trace};
pub use error::{Error, Result};
pub use metrics::MetricTable;
pub use objective::ObjectiveSpec;
pub use participation::ClientPopulation;
pub use weighting::{Strategy, WeightEstimator};
