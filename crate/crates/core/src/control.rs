//! Control plans `set(X = x + a'F + b'W + eps*)`: construction, stability,
//! model surgery, the variance-minimizing covariate gains, and closed-form
//! post-plan mean and variance.
//!
//! Notation follows the partition in [`crate::model::VertexPartition`]:
//! `gamma` is `gamma_fx`, the total effect of `X` on the control variables
//! `F` (response first); all `Sigma` and `B` quantities are pre-plan
//! observational moments.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::effects::{plan_blocks, EffectSummary, EffectsError, MomentSummary, RegressionBlocks};
use crate::linalg::{self, PSD_TOLERANCE};
use crate::model::{
    check_stability, ModelError, PathDiagram, StabilityReport, StructuralModel, VertexPartition,
    STABILITY_TOLERANCE,
};

/// Below this sup-norm `gamma_fx` counts as the zero vector.
const ZERO_EFFECT: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(
        "control plan is unstable: |a'gamma_fx| = {abs_loop_gain} but the plan requires |a'gamma_fx| < 1"
    )]
    UnstablePlan { abs_loop_gain: f64 },
    #[error("total effect gamma_fx is the zero vector; no covariate gains minimize the variance")]
    ZeroTotalEffect,
    #[error("plan dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Effects(#[from] EffectsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("plan file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("plan file: {0}")]
    Io(#[from] std::io::Error),
}

/// `X = x + a'F + b'W + eps*` with `var(eps*) = sigma_eps_star`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPlan {
    pub x: f64,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub sigma_eps_star: f64,
}

impl ControlPlan {
    pub fn new(
        x: f64,
        a: Vec<f64>,
        b: Vec<f64>,
        sigma_eps_star: f64,
    ) -> Result<Self, ControlError> {
        if !x.is_finite() || a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(ControlError::InvalidPlan(
                "non-finite gain or set-point".into(),
            ));
        }
        if !(sigma_eps_star.is_finite() && sigma_eps_star >= 0.0) {
            return Err(ControlError::InvalidPlan(format!(
                "plan disturbance variance must be >= 0, got {sigma_eps_star}"
            )));
        }
        Ok(Self {
            x,
            a: DVector::from_vec(a),
            b: DVector::from_vec(b),
            sigma_eps_star,
        })
    }

    /// `set(X = x)` with one feedback slot for the response.
    pub fn unconditional(x: f64) -> Self {
        Self::new(x, vec![0.0], Vec::new(), 0.0).expect("finite set-point")
    }

    /// A plan is nonrecursive when it feeds back on at least one descendant.
    pub fn is_nonrecursive(&self) -> bool {
        self.a.iter().any(|&v| v != 0.0)
    }

    pub fn is_perfect(&self) -> bool {
        self.sigma_eps_star == 0.0
    }

    pub fn with_b(&self, b: DVector<f64>) -> Self {
        Self { b, ..self.clone() }
    }
}

fn check_dims(effects: &EffectSummary, plan: &ControlPlan) -> Result<(), ControlError> {
    if plan.a.len() != effects.n_f() {
        return Err(ControlError::Dimension(format!(
            "a has {} gains but F has {} variables",
            plan.a.len(),
            effects.n_f()
        )));
    }
    if plan.b.len() != effects.w().len() {
        return Err(ControlError::Dimension(format!(
            "b has {} gains but W has {} variables",
            plan.b.len(),
            effects.w().len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanStability {
    pub stable: bool,
    /// `a'gamma_fx`, the only nonzero eigenvalue of `tau_sx C_xs`.
    pub loop_gain: f64,
    /// `1 - |a'gamma_fx|`.
    pub margin: f64,
}

pub fn plan_is_stable(
    effects: &EffectSummary,
    plan: &ControlPlan,
) -> Result<PlanStability, ControlError> {
    plan_is_stable_with_tolerance(effects, plan, STABILITY_TOLERANCE)
}

pub fn plan_is_stable_with_tolerance(
    effects: &EffectSummary,
    plan: &ControlPlan,
    tolerance: f64,
) -> Result<PlanStability, ControlError> {
    if plan.a.len() != effects.n_f() {
        return Err(ControlError::Dimension(format!(
            "a has {} gains but F has {} variables",
            plan.a.len(),
            effects.n_f()
        )));
    }
    let loop_gain = plan.a.dot(&effects.gamma_fx());
    Ok(PlanStability {
        stable: loop_gain.abs() < 1.0 - tolerance,
        loop_gain,
        margin: 1.0 - loop_gain.abs(),
    })
}

/// `1 / (1 - a'gamma_fx)`.
pub fn feedback_factor(loop_gain: f64) -> f64 {
    1.0 / (1.0 - loop_gain)
}

fn require_stable(effects: &EffectSummary, plan: &ControlPlan) -> Result<f64, ControlError> {
    let s = plan_is_stable(effects, plan)?;
    if !s.stable {
        return Err(ControlError::UnstablePlan {
            abs_loop_gain: s.loop_gain.abs(),
        });
    }
    Ok(s.loop_gain)
}

/// Replaces the structural equation of `X` by the plan. Edges into `X` are
/// rebuilt from the nonzero gains; every other equation is untouched.
pub fn apply_plan(
    model: &StructuralModel,
    partition: &VertexPartition,
    plan: &ControlPlan,
) -> Result<StructuralModel, ControlError> {
    if plan.a.len() != partition.n_f() || plan.b.len() != partition.n_w() {
        return Err(ControlError::Dimension(format!(
            "plan has {} feedback and {} covariate gains, partition has |F| = {} and |W| = {}",
            plan.a.len(),
            plan.b.len(),
            partition.n_f(),
            partition.n_w()
        )));
    }
    let x = partition.treatment();
    let mut coefficients = model.coefficients().clone();
    coefficients.row_mut(x).fill(0.0);
    for (&v, &gain) in partition.f().iter().zip(plan.a.iter()) {
        coefficients[(x, v)] = gain;
    }
    for (&v, &gain) in partition.w().iter().zip(plan.b.iter()) {
        coefficients[(x, v)] = gain;
    }
    let mut edges: Vec<(usize, usize)> = model
        .diagram()
        .edges()
        .iter()
        .copied()
        .filter(|&(_, to)| to != x)
        .collect();
    edges.extend(
        (0..model.len())
            .filter(|&from| from != x && coefficients[(x, from)] != 0.0)
            .map(|from| (from, x)),
    );
    let diagram = PathDiagram::new(model.names().to_vec(), edges)?;
    let mut intercepts = model.intercepts().clone();
    intercepts[x] = plan.x;
    let mut variances = model.disturbance_variances().clone();
    variances[x] = plan.sigma_eps_star;
    Ok(StructuralModel::new(
        diagram,
        coefficients,
        intercepts,
        variances,
    )?)
}

/// Spectral stability of the post-plan system. The loop-gain condition of
/// [`plan_is_stable`] guarantees a unique equilibrium; this additionally
/// checks that the post-plan coefficient matrix is convergent.
pub fn post_plan_stability(
    model: &StructuralModel,
    partition: &VertexPartition,
    plan: &ControlPlan,
) -> Result<StabilityReport, ControlError> {
    Ok(check_stability(
        &apply_plan(model, partition, plan)?,
        partition,
    )?)
}

/// Variance-minimizing covariate gains for a given feedback gain.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalCovariateGains {
    pub b: DVector<f64>,
    /// `gamma b*' + B_fw - gamma B_xw`; zero iff the first-order condition
    /// is solved exactly (always when `|F| = 1`).
    pub residual: DMatrix<f64>,
}

impl OptimalCovariateGains {
    pub fn residual_norm(&self) -> f64 {
        if self.residual.is_empty() {
            0.0
        } else {
            self.residual.amax()
        }
    }
}

/// `b*' = gamma'(gamma B_xw - B_fw) / gamma'gamma`.
pub fn optimal_b(
    effects: &EffectSummary,
    blocks: &RegressionBlocks,
) -> Result<OptimalCovariateGains, ControlError> {
    check_blocks(effects, blocks)?;
    let gamma = effects.gamma_fx();
    let n_w = blocks.w.len();
    if n_w == 0 {
        return Ok(OptimalCovariateGains {
            b: DVector::zeros(0),
            residual: DMatrix::zeros(gamma.len(), 0),
        });
    }
    if gamma.amax() < ZERO_EFFECT {
        return Err(ControlError::ZeroTotalEffect);
    }
    let gg = gamma.dot(&gamma);
    let b = &blocks.b_xw - blocks.b_fw.transpose() * &gamma / gg;
    let residual = &gamma * b.transpose() + &blocks.b_fw - &gamma * blocks.b_xw.transpose();
    Ok(OptimalCovariateGains { b, residual })
}

fn check_blocks(effects: &EffectSummary, blocks: &RegressionBlocks) -> Result<(), ControlError> {
    if blocks.f != effects.f() || blocks.treatment != effects.treatment() {
        return Err(ControlError::Dimension(
            "regression blocks were built for different control variables".into(),
        ));
    }
    if blocks.w != effects.w() {
        return Err(ControlError::Dimension(
            "regression blocks were built for a different covariate set".into(),
        ));
    }
    Ok(())
}

/// `E(Y | set(X = x + a'F + b'W + eps*))`.
pub fn plan_mean(
    moments: &MomentSummary,
    effects: &EffectSummary,
    plan: &ControlPlan,
) -> Result<f64, ControlError> {
    check_dims(effects, plan)?;
    let loop_gain = require_stable(effects, plan)?;
    let gamma = effects.gamma_fx();
    let gamma_yx = effects.gamma_yx();
    let mu_x = moments.mean_of(effects.treatment())?;
    let mu_y = moments.mean_of(effects.response())?;
    let mu_f = moments.means(effects.f())?;
    let mu_w = moments.means(effects.w())?;
    let shift = plan.x - mu_x + plan.b.dot(&mu_w);
    let shifted_f = mu_f + &gamma * shift;
    Ok(gamma_yx * shift + mu_y + gamma_yx * feedback_factor(loop_gain) * plan.a.dot(&shifted_f))
}

/// Post-plan mean and variance of the control variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEffect {
    pub mean_y: f64,
    pub var_f: DMatrix<f64>,
    pub var_y: f64,
    pub stable: bool,
    pub feedback_factor: f64,
}

/// `var(F | set(.)) = D1 M D1'` with `D1 = I + gamma a' / (1 - a'gamma)` and
///
/// ```text
/// M = Sigma_ff + gamma gamma' s* + (gamma - B_fx)(gamma - B_fx)' s_xx - B_fx B_fx' s_xx
///     + R Sigma_ww R' - R0 Sigma_ww R0'
/// R0 = B_fw - gamma B_xw,  R = gamma b' + R0
/// ```
///
/// Only moments over `F ∪ {X} ∪ W` enter, so the result does not depend on
/// how the remaining vertices split into `U` and `Z`.
pub fn plan_variance(
    moments: &MomentSummary,
    effects: &EffectSummary,
    blocks: &RegressionBlocks,
    plan: &ControlPlan,
) -> Result<PlanEffect, ControlError> {
    check_dims(effects, plan)?;
    check_blocks(effects, blocks)?;
    let loop_gain = require_stable(effects, plan)?;
    let mean_y = plan_mean(moments, effects, plan)?;

    let gamma = effects.gamma_fx();
    let n_f = gamma.len();
    let x = effects.treatment();
    let sigma_ff = moments.block(effects.f(), effects.f())?;
    let sigma_xx = moments.var(x)?;
    let sigma_ww = moments.block(effects.w(), effects.w())?;

    let b_fx = &blocks.b_fx;
    let gap = &gamma - b_fx;
    let r0 = &blocks.b_fw - &gamma * blocks.b_xw.transpose();
    let r = &gamma * plan.b.transpose() + &r0;

    let middle = sigma_ff
        + &gamma * gamma.transpose() * plan.sigma_eps_star
        + &gap * gap.transpose() * sigma_xx
        - b_fx * b_fx.transpose() * sigma_xx
        + &r * &sigma_ww * r.transpose()
        - &r0 * &sigma_ww * r0.transpose();

    let factor = feedback_factor(loop_gain);
    let d1 = DMatrix::identity(n_f, n_f) + &gamma * plan.a.transpose() * factor;
    let var_f = linalg::symmetrize(&(&d1 * middle * d1.transpose()));
    Ok(PlanEffect {
        mean_y,
        var_y: var_f[(0, 0)],
        var_f,
        stable: true,
        feedback_factor: factor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateOrdering {
    /// Both sets give the same optimal variance.
    Equivalent,
    /// The first set never gives a larger optimal variance.
    FirstNoWorse,
    SecondNoWorse,
    Incomparable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateComparison {
    /// `Q(W1) - Q(W2)` with `Q(W) = (B_fw - gamma B_xw) Sigma_ww (B_fw - gamma B_xw)'`.
    pub delta: DMatrix<f64>,
    pub ordering: CovariateOrdering,
}

/// Compares two covariate sets for optimal plans with the same feedback gain.
/// `W1` is no worse than `W2` when `Q(W1) - Q(W2)` is positive semidefinite.
pub fn covariate_compare(
    moments: &MomentSummary,
    effects: &EffectSummary,
    w1: &[String],
    w2: &[String],
) -> Result<CovariateComparison, ControlError> {
    let q = |w: &[String]| -> Result<DMatrix<f64>, ControlError> {
        let e = effects.with_covariates(w)?;
        let blocks = plan_blocks(moments, &e)?;
        let gamma = e.gamma_fx();
        let r0 = &blocks.b_fw - &gamma * blocks.b_xw.transpose();
        let sigma_ww = moments.block(w, w)?;
        Ok(&r0 * sigma_ww * r0.transpose())
    };
    let delta = q(w1)? - q(w2)?;
    let first = linalg::min_symmetric_eigenvalue(&delta) >= -PSD_TOLERANCE;
    let second = linalg::min_symmetric_eigenvalue(&(-&delta)) >= -PSD_TOLERANCE;
    let ordering = match (first, second) {
        (true, true) => CovariateOrdering::Equivalent,
        (true, false) => CovariateOrdering::FirstNoWorse,
        (false, true) => CovariateOrdering::SecondNoWorse,
        (false, false) => CovariateOrdering::Incomparable,
    };
    Ok(CovariateComparison { delta, ordering })
}

/// JSON plan file:
/// `{"x": .., "a": {F-name: gain}, "b": {W-name: gain} | "optimal", "sigma_eps_star": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub x: f64,
    #[serde(default)]
    pub a: BTreeMap<String, f64>,
    #[serde(default)]
    pub b: CovariateGains,
    #[serde(default)]
    pub sigma_eps_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateGains {
    Optimal(OptimalKeyword),
    Gains(BTreeMap<String, f64>),
}

impl Default for CovariateGains {
    fn default() -> Self {
        CovariateGains::Gains(BTreeMap::new())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimalKeyword {
    #[serde(rename = "optimal")]
    Optimal,
}

impl PlanFile {
    pub fn from_json_str(s: &str) -> Result<Self, ControlError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ControlError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// The control set `F`: the response first, then the other variables
    /// with a feedback gain, in name order.
    pub fn control_variables(&self, response: &str) -> Vec<String> {
        std::iter::once(response.to_string())
            .chain(self.a.keys().filter(|k| k.as_str() != response).cloned())
            .collect()
    }

    /// Covariates named in the file, or `None` when `b` is `"optimal"`.
    pub fn covariates(&self) -> Option<Vec<String>> {
        match &self.b {
            CovariateGains::Optimal(_) => None,
            CovariateGains::Gains(g) => Some(g.keys().cloned().collect()),
        }
    }

    pub fn is_optimal(&self) -> bool {
        matches!(self.b, CovariateGains::Optimal(_))
    }

    /// Builds the plan with gains ordered like `f` and `w`. With `"optimal"`,
    /// `b` is left at zero for the caller to fill in.
    pub fn to_plan(&self, f: &[String], w: &[String]) -> Result<ControlPlan, ControlError> {
        for name in self.a.keys() {
            if !f.contains(name) {
                return Err(ControlError::InvalidPlan(format!(
                    "feedback gain on {name}, which is not a control variable"
                )));
            }
        }
        let a = f
            .iter()
            .map(|n| self.a.get(n).copied().unwrap_or(0.0))
            .collect();
        let b = match &self.b {
            CovariateGains::Optimal(_) => vec![0.0; w.len()],
            CovariateGains::Gains(g) => {
                for name in g.keys() {
                    if !w.contains(name) {
                        return Err(ControlError::InvalidPlan(format!(
                            "covariate gain on {name}, which is not in W"
                        )));
                    }
                }
                w.iter().map(|n| g.get(n).copied().unwrap_or(0.0)).collect()
            }
        };
        ControlPlan::new(self.x, a, b, self.sigma_eps_star)
    }

    pub fn from_plan(plan: &ControlPlan, f: &[String], w: &[String]) -> Self {
        Self {
            x: plan.x,
            a: f.iter().cloned().zip(plan.a.iter().copied()).collect(),
            b: CovariateGains::Gains(w.iter().cloned().zip(plan.b.iter().copied()).collect()),
            sigma_eps_star: plan.sigma_eps_star,
        }
    }
}
