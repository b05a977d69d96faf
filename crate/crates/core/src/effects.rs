//! Reduced-form total effects, implied population moments and regression
//! coefficient blocks.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, SINGULAR_CONDITION};
use crate::model::{StructuralModel, VertexPartition, STABILITY_TOLERANCE};

#[derive(Debug, Error)]
pub enum EffectsError {
    #[error("I - A_ss is numerically singular (condition > {SINGULAR_CONDITION:e})")]
    SingularSystem,
    #[error("model is not stable: spectral radius of A is {rho}")]
    UnstableModel { rho: f64 },
    #[error("covariance block over {0:?} is singular")]
    SingularBlock(Vec<String>),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("invalid moments: {0}")]
    InvalidMoments(String),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error("covariance file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("covariance file: {0}")]
    Io(#[from] std::io::Error),
}

/// Total effects of the treatment on its descendants.
///
/// `tau_sx = (I - A_ss)^-1 A_sx` over `S` in partition order, so the first
/// `n_f` entries are `gamma_fx` and the first entry is `gamma_yx`. The role
/// names are carried along so later stages can slice moment summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectSummary {
    treatment: String,
    f: Vec<String>,
    u: Vec<String>,
    w: Vec<String>,
    z: Vec<String>,
    tau_sx: DVector<f64>,
    tau_st: Option<DMatrix<f64>>,
}

impl EffectSummary {
    /// Effect summary from externally estimated total effects (e.g. by
    /// instrumental variables). `gamma_fx` is ordered like `f`, whose first
    /// element is the response.
    pub fn from_estimates(
        treatment: impl Into<String>,
        f: Vec<String>,
        gamma_fx: DVector<f64>,
        w: Vec<String>,
        z: Vec<String>,
    ) -> Result<Self, EffectsError> {
        if f.is_empty() || f.len() != gamma_fx.len() {
            return Err(EffectsError::InvalidMoments(format!(
                "need one total effect per control variable (got {} names, {} effects)",
                f.len(),
                gamma_fx.len()
            )));
        }
        Ok(Self {
            treatment: treatment.into(),
            f,
            u: Vec::new(),
            w,
            z,
            tau_sx: gamma_fx,
            tau_st: None,
        })
    }

    pub fn treatment(&self) -> &str {
        &self.treatment
    }

    pub fn response(&self) -> &str {
        &self.f[0]
    }

    pub fn f(&self) -> &[String] {
        &self.f
    }

    pub fn u(&self) -> &[String] {
        &self.u
    }

    pub fn w(&self) -> &[String] {
        &self.w
    }

    pub fn z(&self) -> &[String] {
        &self.z
    }

    pub fn n_f(&self) -> usize {
        self.f.len()
    }

    pub fn tau_sx(&self) -> &DVector<f64> {
        &self.tau_sx
    }

    /// `(I - A_ss)^-1 A_st`, absent for estimate-based summaries.
    pub fn tau_st(&self) -> Option<&DMatrix<f64>> {
        self.tau_st.as_ref()
    }

    pub fn gamma_fx(&self) -> DVector<f64> {
        self.tau_sx.rows(0, self.n_f()).into_owned()
    }

    pub fn gamma_ux(&self) -> DVector<f64> {
        self.tau_sx
            .rows(self.n_f(), self.tau_sx.len() - self.n_f())
            .into_owned()
    }

    pub fn gamma_yx(&self) -> f64 {
        self.tau_sx[0]
    }

    /// Same effects with a different covariate set `W` (which must lie in `T`).
    pub fn with_covariates(&self, w: &[String]) -> Result<Self, EffectsError> {
        let t: Vec<&String> = self.w.iter().chain(&self.z).collect();
        for name in w {
            if !t.contains(&name) {
                return Err(EffectsError::UnknownVariable(format!(
                    "{name} (not a nondescendant of {})",
                    self.treatment
                )));
            }
        }
        let mut out = self.clone();
        out.w = w.to_vec();
        out.z = t.into_iter().filter(|n| !w.contains(n)).cloned().collect();
        Ok(out)
    }
}

pub fn total_effects(
    model: &StructuralModel,
    partition: &VertexPartition,
) -> Result<EffectSummary, EffectsError> {
    let a = model.coefficients();
    let s = partition.s();
    let t = partition.t();
    let x = [partition.treatment()];
    let i_minus_ass = DMatrix::identity(s.len(), s.len()) - linalg::select(a, s, s);
    let a_sx = linalg::select(a, s, &x);
    let a_st = linalg::select(a, s, t);
    let mut rhs = DMatrix::zeros(s.len(), 1 + t.len());
    rhs.column_mut(0).copy_from(&a_sx.column(0));
    rhs.columns_mut(1, t.len()).copy_from(&a_st);
    let solved = linalg::solve_checked(&i_minus_ass, &rhs, SINGULAR_CONDITION)
        .ok_or(EffectsError::SingularSystem)?;
    Ok(EffectSummary {
        treatment: partition.name(partition.treatment()).to_string(),
        f: partition.names_of(partition.f()),
        u: partition.names_of(partition.u()),
        w: partition.names_of(partition.w()),
        z: partition.names_of(partition.z()),
        tau_sx: solved.column(0).into_owned(),
        tau_st: Some(solved.columns(1, t.len()).into_owned()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentSource {
    Implied,
    Sample,
    PostPlan,
}

/// Mean vector and covariance matrix over named variables.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    variables: Vec<String>,
    index: HashMap<String, usize>,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    source: MomentSource,
    n_obs: Option<usize>,
}

impl MomentSummary {
    pub fn new(
        variables: Vec<String>,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        source: MomentSource,
        n_obs: Option<usize>,
    ) -> Result<Self, EffectsError> {
        let p = variables.len();
        if mean.len() != p || covariance.nrows() != p || covariance.ncols() != p {
            return Err(EffectsError::InvalidMoments(format!(
                "{p} variables but mean has {} entries and covariance is {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let index: HashMap<String, usize> = variables
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i))
            .collect();
        if index.len() != p {
            return Err(EffectsError::InvalidMoments(
                "duplicate variable names".into(),
            ));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(EffectsError::InvalidMoments("non-finite entry".into()));
        }
        let scale = covariance.amax().max(1.0);
        if linalg::asymmetry(&covariance) > 1e-12 * scale {
            return Err(EffectsError::InvalidMoments(
                "covariance is not symmetric".into(),
            ));
        }
        if let Some(i) = (0..p).find(|&i| covariance[(i, i)] < 0.0) {
            return Err(EffectsError::InvalidMoments(format!(
                "negative variance for {}",
                variables[i]
            )));
        }
        Ok(Self {
            variables,
            index,
            mean,
            covariance,
            source,
            n_obs,
        })
    }

    /// Reads `{"variables": [..], "matrix": [[..]], "means": [..]?, "n": ..?}`.
    /// Means default to zero. The result is tagged as a sample summary.
    pub fn from_covariance_json(s: &str) -> Result<Self, EffectsError> {
        let file: CovarianceFile = serde_json::from_str(s)?;
        let p = file.variables.len();
        if file.matrix.len() != p || file.matrix.iter().any(|r| r.len() != p) {
            return Err(EffectsError::InvalidMoments(format!(
                "matrix must be {p}x{p}"
            )));
        }
        let cov = DMatrix::from_fn(p, p, |i, j| file.matrix[i][j]);
        let mean = match file.means {
            Some(m) => DVector::from_vec(m),
            None => DVector::zeros(p),
        };
        Self::new(file.variables, mean, cov, MomentSource::Sample, file.n)
    }

    pub fn from_covariance_path(path: impl AsRef<Path>) -> Result<Self, EffectsError> {
        Self::from_covariance_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_covariance_json(&self) -> String {
        let p = self.variables.len();
        let file = CovarianceFile {
            variables: self.variables.clone(),
            matrix: (0..p)
                .map(|i| (0..p).map(|j| self.covariance[(i, j)]).collect())
                .collect(),
            means: Some(self.mean.iter().copied().collect()),
            n: self.n_obs,
        };
        serde_json::to_string_pretty(&file).expect("covariance serializes")
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn source(&self) -> MomentSource {
        self.source
    }

    pub fn n_obs(&self) -> Option<usize> {
        self.n_obs
    }

    pub fn index_of(&self, name: &str) -> Result<usize, EffectsError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| EffectsError::UnknownVariable(name.to_string()))
    }

    fn indices<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>, EffectsError> {
        names.iter().map(|n| self.index_of(n.as_ref())).collect()
    }

    pub fn mean_of(&self, name: &str) -> Result<f64, EffectsError> {
        Ok(self.mean[self.index_of(name)?])
    }

    pub fn means<S: AsRef<str>>(&self, names: &[S]) -> Result<DVector<f64>, EffectsError> {
        Ok(linalg::select_vec(&self.mean, &self.indices(names)?))
    }

    pub fn cov(&self, a: &str, b: &str) -> Result<f64, EffectsError> {
        Ok(self.covariance[(self.index_of(a)?, self.index_of(b)?)])
    }

    pub fn var(&self, a: &str) -> Result<f64, EffectsError> {
        self.cov(a, a)
    }

    /// Covariance block `Sigma_{rows, cols}`.
    pub fn block<S: AsRef<str>, T: AsRef<str>>(
        &self,
        rows: &[S],
        cols: &[T],
    ) -> Result<DMatrix<f64>, EffectsError> {
        Ok(linalg::select(
            &self.covariance,
            &self.indices(rows)?,
            &self.indices(cols)?,
        ))
    }

    /// Marginal summary over a subset of variables, in the given order.
    pub fn restrict<S: AsRef<str>>(&self, names: &[S]) -> Result<Self, EffectsError> {
        let idx = self.indices(names)?;
        Self::new(
            names.iter().map(|n| n.as_ref().to_string()).collect(),
            linalg::select_vec(&self.mean, &idx),
            linalg::select(&self.covariance, &idx, &idx),
            self.source,
            self.n_obs,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CovarianceFile {
    variables: Vec<String>,
    matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    means: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
}

/// Population mean and covariance of the equilibrium
/// `V = (I - A)^-1 (mu + eps)`.
pub fn implied_moments(model: &StructuralModel) -> Result<MomentSummary, EffectsError> {
    let rho = model.spectral_radius()?;
    if rho >= 1.0 - STABILITY_TOLERANCE {
        return Err(EffectsError::UnstableModel { rho });
    }
    let n = model.len();
    let inv = linalg::inverse_checked(
        &(DMatrix::identity(n, n) - model.coefficients()),
        SINGULAR_CONDITION,
    )
    .ok_or(EffectsError::SingularSystem)?;
    let mean = &inv * model.intercepts();
    let cov = &inv * model.disturbance_covariance() * inv.transpose();
    MomentSummary::new(
        model.names().to_vec(),
        mean,
        linalg::symmetrize(&cov),
        MomentSource::Implied,
        None,
    )
}

/// Regression coefficients `B_{rc·z} = Sigma_{rc·z} Sigma_{cc·z}^-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBlock {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub conditioning: Vec<String>,
    pub coefficients: DMatrix<f64>,
}

/// Conditional covariance `Sigma_{ab·z}` by Schur complement.
fn conditional_block<S: AsRef<str>>(
    moments: &MomentSummary,
    a: &[S],
    b: &[S],
    z: &[S],
) -> Result<DMatrix<f64>, EffectsError> {
    let ab = moments.block(a, b)?;
    if z.is_empty() {
        return Ok(ab);
    }
    let zz = moments.block(z, z)?;
    let zb = moments.block(z, b)?;
    let az = moments.block(a, z)?;
    let solved = linalg::solve_checked(&zz, &zb, SINGULAR_CONDITION)
        .ok_or_else(|| EffectsError::SingularBlock(names(z)))?;
    Ok(ab - az * solved)
}

fn names<S: AsRef<str>>(v: &[S]) -> Vec<String> {
    v.iter().map(|s| s.as_ref().to_string()).collect()
}

pub fn regression_blocks<S: AsRef<str>>(
    moments: &MomentSummary,
    rows: &[S],
    cols: &[S],
    conditioning: &[S],
) -> Result<RegressionBlock, EffectsError> {
    let rc = conditional_block(moments, rows, cols, conditioning)?;
    let cc = conditional_block(moments, cols, cols, conditioning)?;
    // B = rc cc^-1  <=>  cc' B' = rc'
    let coefficients = linalg::solve_checked(&cc.transpose(), &rc.transpose(), SINGULAR_CONDITION)
        .ok_or_else(|| EffectsError::SingularBlock(names(cols)))?
        .transpose();
    Ok(RegressionBlock {
        rows: names(rows),
        cols: names(cols),
        conditioning: names(conditioning),
        coefficients,
    })
}

/// The unconditional regression blocks a control plan needs:
/// `B_fx`, `B_fw` and `B_xw` over the roles carried by an [`EffectSummary`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBlocks {
    pub treatment: String,
    pub f: Vec<String>,
    pub w: Vec<String>,
    /// `Sigma_fx / sigma_xx`, length `n_f`.
    pub b_fx: DVector<f64>,
    /// `Sigma_fw Sigma_ww^-1`, `n_f x n_w`.
    pub b_fw: DMatrix<f64>,
    /// `Sigma_xw Sigma_ww^-1`, length `n_w`.
    pub b_xw: DVector<f64>,
}

impl RegressionBlocks {
    /// `beta_yx`, the first entry of `B_fx`.
    pub fn beta_yx(&self) -> f64 {
        self.b_fx[0]
    }
}

pub fn plan_blocks(
    moments: &MomentSummary,
    effects: &EffectSummary,
) -> Result<RegressionBlocks, EffectsError> {
    let x = [effects.treatment().to_string()];
    let f = effects.f().to_vec();
    let w = effects.w().to_vec();
    let b_fx = regression_blocks(moments, &f, &x, &[])?
        .coefficients
        .column(0)
        .into_owned();
    let (b_fw, b_xw) = if w.is_empty() {
        (DMatrix::zeros(f.len(), 0), DVector::zeros(0))
    } else {
        let fw = regression_blocks(moments, &f, &w, &[])?.coefficients;
        let xw = regression_blocks(moments, &x, &w, &[])?
            .coefficients
            .row(0)
            .transpose();
        (fw, xw)
    };
    Ok(RegressionBlocks {
        treatment: x[0].clone(),
        f,
        w,
        b_fx,
        b_fw,
        b_xw,
    })
}
