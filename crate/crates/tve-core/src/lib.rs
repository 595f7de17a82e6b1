//! Targeted variance estimation for the log causal risk ratio.
//!
//! The crate estimates the log risk ratio `log E[Y|A=1-world] - log E[Y|A=0-world]`
//! identified from observational data `(W, A, Y)` and, around it, four
//! estimators of the variance of its influence function:
//!
//! * `ic` — the empirical variance of the estimated influence function,
//! * `ss` — the non-targeted substitution plug-in,
//! * `iterative` — a plug-in targeted by repeated scalar fluctuations,
//! * `onestep` — a plug-in targeted by integrating a universal least
//!   favorable submodel with small fixed steps.
//!
//! A Monte-Carlo harness replays complete scenarios (simulate, fit, target,
//! estimate, cover) with per-replication RNG streams so results are
//! reproducible on any worker count, plus a positivity-filtered resampling
//! harness for real datasets.

pub mod data;
pub mod eif;
pub mod error;
pub mod learners;
pub mod montecarlo;
pub mod numerics;
pub mod tmle;
pub mod variance;

pub use data::{
    default_trunc_level, load_csv, resample_filtered, simulate, write_csv, Dataset, DgdKind,
    DgdSpec, LoadedCsv, OracleNuisance, ResampleOutcome,
};
pub use eif::{
    clever_covariates, clever_covariates_by_arm, eif_psi, eif_sigma2, moments, sigma2_from_moments,
    sigma2_plugin, EifVectors, MomentSet, PSI_FLOOR,
};
pub use error::{Result, TveError};
pub use learners::{
    fit_logistic, fit_logistic_ridge, fit_nuisances, FormulaSpec, LearnerSpec, NuisanceFit,
    SelectionInfo, TruncationBounds,
};
pub use montecarlo::{
    psi_truth, run_scenario, sigma2_oracle, sigma2_quadrature, summarize, EstimatorRecord,
    EstimatorSummary, RepRecord, ScenarioConfig, ScenarioResult, Sigma2Oracle, SummaryRow,
};
pub use tmle::{tmle_psi, PsiTarget};
pub use variance::{
    compute_report, confidence_interval, var_ic, var_iterative, var_onestep, var_ss,
    EstimatorKind, FlowResult, FlowTrace, IterativeOptions, OneStepOptions, Termination,
    VarianceReport, ALL_ESTIMATORS,
};
