//! Hierarchical semi-parametric duration models (HSDM) for event streams.
//!
//! The crate fits a three-stage model to the durations between events:
//! a nonparametric conditional density of the current log-duration given the
//! previous one, a quadratic intraday trend on the transformed generalized
//! residuals, and an ARFIMA model (optionally with regressors) on the
//! detrended sequence. Predictions on a following day update the trend online.
//!
//! The ACD/FIACD family is included as a benchmark, together with
//! probability-integral-transform diagnostics and a simulator of the
//! generative hierarchy that serves as ground truth for every estimator.

pub mod arfima;
pub mod benchmarks;
pub mod bundle;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod kde;
pub mod model;
pub mod normal;
pub mod optim;
pub mod pipeline;
pub mod prediction;
pub mod rng;
pub mod simulator;
pub mod smoothing;
pub mod spline;
pub mod trend;

pub use arfima::{ArfimaModel, FracDiffOp};
pub use benchmarks::{AcdModel, AcdVariant, BenchmarkKind, ResidualLaw};
pub use bundle::{BundleManifest, FittedModel};
pub use data::{DaySeries, Session, TradeRecord};
pub use diagnostics::{Comparison, RunDiagnostics};
pub use error::{HsdmError, Result};
pub use kde::CondDensityModel;
pub use model::{HsdmModel, HsdmOptions};
pub use prediction::{PredictionRecord, PredictionRun};
pub use simulator::{ScenarioSpec, SimulatedDay};
pub use smoothing::{SmoothedDay, SmoothedSeries};
pub use trend::{OnlineTrendState, TrendParams, TrendUpdate};
