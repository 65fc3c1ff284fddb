//! Monte Carlo checks of the concentration, explosion, gradient and
//! smoothness bounds, each producing a [`BoundReport`].
//!
//! Bounds whose constants are hidden inside `O(·)` are compared against
//! frozen values in [`calibration`].

pub mod calibration;
mod checks;
mod perturb;
mod report;

pub use checks::{
    check_layer_norms, check_spectral_product, estimate_explosion, gradient_bound_ratios, gradient_lower_ratio,
    layer_statistics, perturbation_report, run_trials, semismooth_residual, semismooth_terms, separateness_check,
    ChainOperator, LayerStatistics, MeanEstimate, PerturbationConstants, SemismoothInputs, SemismoothTerms,
};
pub use perturb::{Directions, Perturbation, PerturbationSpec, NORM_SLACK};
pub use report::{
    worst_case, write_reports_csv, write_reports_json, BoundReport, CheckConfig, Direction, Verdict, CSV_HEADER,
};
