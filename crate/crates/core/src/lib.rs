//! Linear structural equation models with feedback: stability, total effects,
//! control plans on a treatment variable, instrumental-variable estimation and
//! a Monte Carlo oracle for the closed forms.

pub mod cli;
pub mod control;
pub mod effects;
pub mod estimation;
pub mod linalg;
pub mod model;
pub mod oracle;

pub use control::{
    apply_plan, covariate_compare, optimal_b, plan_is_stable, plan_mean, plan_variance,
    post_plan_stability, ControlError, ControlPlan, CovariateComparison, CovariateOrdering,
    PlanEffect, PlanFile, PlanStability,
};
pub use effects::{
    implied_moments, plan_blocks, total_effects, EffectSummary, EffectsError, MomentSummary,
    RegressionBlocks,
};
pub use estimation::{
    iv_estimate, sample_moments, tsls_estimate, Dataset, EstimationError, IVEstimate,
};
pub use model::{
    check_stability, partition_vertices, validate_model, ModelError, PathDiagram, StabilityReport,
    StructuralModel, ValidationReport, VertexPartition,
};
pub use oracle::{
    draw_equilibrium, iterate_equilibrium, simulate_plan, SimulationConfig, SimulationError,
};
