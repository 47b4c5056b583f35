//! Hyperparameter sweeps, best-point selection, zero-shot transfer to a
//! larger shape and the validations around it.

mod experiment;
mod hp;
mod ops;
pub mod primer;
mod sweep;

pub use experiment::{
    DataSpec, Experiment, ExperimentSpec, ModelTemplate, ScalePoint, SweepRecord,
};
pub use hp::{HpPoint, Range, Search};
pub use ops::{
    divergence_frontier, mu_transfer, reverse_transfer, wider_is_better_scan, OracleResult,
    ReplicaOutcome, ReverseReport, TransferChecks, TransferMode, TransferReport, WidthScanReport,
};
pub use primer::{primer_argmin, primer_estimate, BoundedFn, PrimerProblem};
pub use sweep::{
    argmin_index, best_summary, run_parallel, select_best, summarize, sweep, sweep_points,
    HpSummary, Metric,
};
