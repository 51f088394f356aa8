//! Experiment plumbing: scenario files, seeded sampling, studies and reports.

mod report;
mod scenario;
mod study;

pub use report::{export_report, export_trajectory, report_csv, ReportFormat, REPORT_COLUMNS};
pub use scenario::{
    load_scenario, parse_scenario, sample_initial, InitialSpec, KernelSpec, LabelDynamicsSpec, LabelLaw,
    LabelMetricSpec, PositionLaw, RateSpec, Scenario, VelocitySpec, DEFAULT_K,
};
pub use study::{
    convergence_study, fit_slope, loglog_slope, residual_study, run_from, run_scenario, ExactSolution, RunOutcome,
    SlopeFit, StudyKind, StudyOptions, StudyReport, StudyRow, BOOTSTRAP_RESAMPLES, SOLVER_TOL,
};
