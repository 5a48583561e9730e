//! Solvers for the sequentially drilled joint-congruence system and a
//! maximum-likelihood separator for jointly Gaussian independent vector
//! analysis, with the covariance models, performance bounds and separation
//! metrics used to evaluate them.

pub mod core;
pub mod error;
pub mod metrics;
pub mod model;
pub mod solvers;

pub use crate::core::{
    build_augmented_targets, check_existence, default_pd_tol, invert_permutation,
    log_likelihood_core, permute_instance, permute_solution, residual, AugmentedTargetSet,
    ExistenceReport, ProblemDims, ProblemInstance, ResidualReport, SolutionSet,
};
pub use crate::error::{Result, SedjocoError};
pub use crate::metrics::{
    align_solution, icrlb, isr_accumulate, isr_csv, isr_norm, summary_json, CrlbReport, IsrReport,
};
pub use crate::model::experiment2::{build_cov_experiment2, sample_experiment2, Experiment2Params};
pub use crate::model::experiment3::{
    build_cov_experiment3, draw_experiment3_filters, sample_experiment3, Experiment3Params,
};
pub use crate::model::{
    build_target_matrices, dump_datasets, mix, sample_sources_gaussian, separate_ml,
    separate_per_set, DatasetCollection, ScvCovarianceSet, SeparationOutcome,
};
pub use crate::solvers::{
    gradient, hessian, ir_solve, make_initial, newton_solve, per_set_initial,
    standard_sedjoco_solve, ConvergenceTrace, GradientSet, HessianMatrix, InitStrategy,
    SolverOptions,
};
