//! Trace-driven simulation of a deployment.

pub mod churn;
pub mod engine;
pub mod report;
pub mod trace;
pub mod universe;

pub use churn::{churn_step, ChurnError, ChurnModel, RecordChurn, Upstream};
pub use engine::{churn_batches, run_sim, run_sweep, SimConfig, SimError};
pub use report::{ExposureInputs, Fallback, HourStats, SimReport};
pub use trace::{gen_trace, load_trace, write_trace, GenParams, Trace, TraceError, TraceEvent};
pub use universe::Universe;
