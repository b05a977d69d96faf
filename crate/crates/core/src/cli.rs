//! Command-line driver and report type.
//!
//! [`run_command`] parses an argument vector, runs one subcommand and returns
//! the exit status together with a [`Report`]. Status 0 is success, 1 a usage
//! error, 2 a failed validation, stability or estimation precondition.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{
    covariate_compare, feedback_factor, optimal_b, plan_is_stable, plan_mean, plan_variance,
    post_plan_stability, ControlError, ControlPlan, CovariateGains, OptimalCovariateGains,
    OptimalKeyword, PlanFile,
};
use crate::effects::{
    implied_moments, plan_blocks, total_effects, EffectSummary, EffectsError, MomentSummary,
};
use crate::estimation::{iv_estimate, sample_moments, tsls_estimate, Dataset, EstimationError};
use crate::model::{
    check_stability, partition_vertices, validate_model, ModelError, StructuralModel,
    VertexPartition,
};
use crate::oracle::{
    draw_equilibrium, simulate_plan, DisturbanceLaw, SimulationConfig, SimulationError,
};

/// Student-faculty contact covariance fixture compiled into the binary.
pub const IVERSON_TABLE1: &str = include_str!("../fixtures/iverson_table1.json");
/// Path-coefficient model over the Iverson skeleton fitted to the covariance fixture.
pub const IVERSON_MODEL: &str = include_str!("../fixtures/iverson_model.json");

/// Published unconditional post-plan variance of the response.
pub const PUBLISHED_UNCONDITIONAL_VAR_Y: f64 = 0.998;
/// Feedback gains shown by `reproduce-iverson`.
pub const IVERSON_FEEDBACK_GAINS: [f64; 3] = [-5.0, -10.0, -20.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum ReportValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
    Count(u64),
    Text(String),
    Flag(bool),
}

impl From<f64> for ReportValue {
    fn from(v: f64) -> Self {
        ReportValue::Scalar(v)
    }
}

impl From<usize> for ReportValue {
    fn from(v: usize) -> Self {
        ReportValue::Count(v as u64)
    }
}

impl From<bool> for ReportValue {
    fn from(v: bool) -> Self {
        ReportValue::Flag(v)
    }
}

impl From<&DVector<f64>> for ReportValue {
    fn from(v: &DVector<f64>) -> Self {
        ReportValue::Vector(v.iter().copied().collect())
    }
}

impl From<&DMatrix<f64>> for ReportValue {
    fn from(m: &DMatrix<f64>) -> Self {
        ReportValue::Matrix(
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect(),
        )
    }
}

impl From<String> for ReportValue {
    fn from(v: String) -> Self {
        ReportValue::Text(v)
    }
}

impl From<&str> for ReportValue {
    fn from(v: &str) -> Self {
        ReportValue::Text(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub name: String,
    pub value: ReportValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub inputs: BTreeMap<String, String>,
    pub results: Vec<ReportEntry>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Report {
    fn new(command: String) -> Self {
        Self {
            command,
            ..Self::default()
        }
    }

    fn push(&mut self, name: &str, value: impl Into<ReportValue>) {
        self.results.push(ReportEntry {
            name: name.to_string(),
            value: value.into(),
            formula: None,
        });
    }

    fn push_formula(&mut self, name: &str, value: impl Into<ReportValue>, formula: &str) {
        self.results.push(ReportEntry {
            name: name.to_string(),
            value: value.into(),
            formula: Some(formula.to_string()),
        });
    }

    fn input(&mut self, key: &str, value: impl ToString) {
        self.inputs.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, name: &str) -> Option<&ReportValue> {
        self.results
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.value)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        match self.get(name)? {
            ReportValue::Scalar(v) => Some(*v),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.4e}")
    } else {
        format!("{v:.4}")
    }
}

impl fmt::Display for ReportValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[f64]| v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(", ");
        match self {
            ReportValue::Scalar(v) => f.write_str(&fmt_num(*v)),
            ReportValue::Vector(v) => write!(f, "[{}]", list(v)),
            ReportValue::Matrix(rows) => {
                let rows: Vec<String> = rows.iter().map(|r| format!("[{}]", list(r))).collect();
                write!(f, "[{}]", rows.join(", "))
            }
            ReportValue::Count(n) => write!(f, "{n}"),
            ReportValue::Text(s) => f.write_str(s),
            ReportValue::Flag(b) => write!(f, "{b}"),
        }
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "command: {}", self.command)?;
        for (k, v) in &self.inputs {
            writeln!(f, "  {k}: {v}")?;
        }
        let width = self.results.iter().map(|e| e.name.len()).max().unwrap_or(0);
        for e in &self.results {
            let mut line = format!("{:width$} = {}", e.name, e.value);
            if let Some(formula) = &e.formula {
                let _ = write!(line, "    [{formula}]");
            }
            writeln!(f, "{line}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Failure of a subcommand, mapped onto the exit-status contract.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl CliError {
    pub fn status(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failed(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

macro_rules! failed_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Failed(e.to_string())
            }
        }
    )*};
}
failed_from!(
    ModelError,
    EffectsError,
    ControlError,
    EstimationError,
    SimulationError,
    std::io::Error,
    serde_json::Error
);

#[derive(Debug, Parser)]
#[command(
    name = "cyclic-sem",
    version,
    about = "Evaluate control plans in linear structural equation models with feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Text report on stdout, or JSON.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,
    /// Also write the JSON report to this path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
struct Roles {
    #[arg(long, default_value = "X")]
    treatment: String,
    #[arg(long, default_value = "Y")]
    response: String,
    /// Additional control variables besides the response (descendants of X).
    #[arg(long = "F", value_delimiter = ',')]
    f: Vec<String>,
    /// Covariates for the plan (nondescendants of X).
    #[arg(long = "W", value_delimiter = ',')]
    w: Vec<String>,
}

#[derive(Debug, Args)]
struct Observed {
    /// Observational data (CSV with header) used for the plan moments.
    #[arg(long, conflicts_with = "cov")]
    data: Option<PathBuf>,
    /// Covariance JSON used for the plan moments.
    #[arg(long)]
    cov: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the structural invariants of a model file.
    Validate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Spectral stability of the partitioned model.
    Stability {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        roles: Roles,
    },
    /// Total effects of the treatment and implied moments.
    Effects {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        roles: Roles,
    },
    /// Evaluate a control plan file.
    PlanEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        roles: Roles,
        #[command(flatten)]
        observed: Observed,
        /// Override the plan's covariate gains: `optimal` or gains on --W.
        #[arg(long, allow_negative_numbers = true)]
        b: Option<String>,
    },
    /// Variance-minimizing covariate gains for given feedback gains.
    PlanOptimize {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        roles: Roles,
        #[command(flatten)]
        observed: Observed,
        /// Feedback gains on F (response first).
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        a: Vec<f64>,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        x: f64,
        #[arg(long = "sigma-eps-star", default_value_t = 0.0)]
        sigma_eps_star: f64,
        /// Write the optimized plan as a plan file.
        #[arg(long)]
        emit_plan: Option<PathBuf>,
    },
    /// Instrumental-variable and two-stage least-squares estimates.
    Estimate {
        #[command(flatten)]
        observed: Observed,
        #[arg(long, default_value = "X")]
        treatment: String,
        #[arg(long, default_value = "Y")]
        response: String,
        #[arg(long, value_delimiter = ',', required = true)]
        instruments: Vec<String>,
    },
    /// Monte Carlo equilibrium draws, optionally under a plan.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        roles: Roles,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Law::Gaussian)]
        law: Law,
        /// Write the draws as CSV (metadata goes to `<path>.meta.json`).
        #[arg(long)]
        csv_out: Option<PathBuf>,
        /// Simulate plans that violate the loop-gain condition.
        #[arg(long)]
        allow_unstable: bool,
    },
    /// Re-run the student-faculty contact example from its covariance table.
    ReproduceIverson {
        /// Covariance table to use instead of the bundled one.
        #[arg(long)]
        cov: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Law {
    Gaussian,
    Uniform,
}

impl From<Law> for DisturbanceLaw {
    fn from(l: Law) -> Self {
        match l {
            Law::Gaussian => DisturbanceLaw::Gaussian,
            Law::Uniform => DisturbanceLaw::Uniform,
        }
    }
}

#[derive(Debug)]
pub struct CommandOutcome {
    pub status: i32,
    pub report: Report,
    pub format: Format,
    /// Help or version text requested by the user.
    pub help: Option<String>,
}

/// Runs one subcommand. `argv[0]` is the program name.
pub fn run_command<I, T>(argv: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let echo = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    let mut report = Report::new(echo);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let help = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            if help {
                return CommandOutcome {
                    status: 0,
                    report,
                    format: Format::Text,
                    help: Some(e.to_string()),
                };
            }
            report.error = Some(e.to_string());
            return CommandOutcome {
                status: 1,
                report,
                format: Format::Text,
                help: None,
            };
        }
    };
    let status = match dispatch(cli.command, &mut report) {
        Ok(()) => 0,
        Err(e) => {
            report.error = Some(e.to_string());
            e.status()
        }
    };
    let status = match &cli.out {
        Some(path) => match std::fs::write(path, report.to_json()) {
            Ok(()) => status,
            Err(e) => {
                report.error = Some(format!("cannot write report to {}: {e}", path.display()));
                2
            }
        },
        None => status,
    };
    CommandOutcome {
        status,
        report,
        format: cli.format,
        help: None,
    }
}

fn dispatch(command: Command, report: &mut Report) -> Result<(), CliError> {
    match command {
        Command::Validate { model } => cmd_validate(&model, report),
        Command::Stability { model, roles } => cmd_stability(&model, &roles, report),
        Command::Effects { model, roles } => cmd_effects(&model, &roles, report),
        Command::PlanEval {
            model,
            plan,
            roles,
            observed,
            b,
        } => {
            let m = load_model(&model, report)?;
            let mut file = PlanFile::from_path(&plan)?;
            report.input("plan", plan.display());
            if let Some(b) = b {
                file.b = parse_b_override(&b, &file, &roles)?;
            }
            let moments = observed_moments(&m, &observed, report)?;
            evaluate_plan(&m, &roles, &file, &moments, report).map(|_| ())
        }
        Command::PlanOptimize {
            model,
            roles,
            observed,
            a,
            x,
            sigma_eps_star,
            emit_plan,
        } => {
            let m = load_model(&model, report)?;
            let moments = observed_moments(&m, &observed, report)?;
            let f = control_variables(&roles);
            if !a.is_empty() && a.len() != f.len() {
                return Err(CliError::Usage(format!(
                    "--a has {} gains but F = {f:?} has {} variables",
                    a.len(),
                    f.len()
                )));
            }
            let gains = if a.is_empty() { vec![0.0; f.len()] } else { a };
            let file = PlanFile {
                x,
                a: f.iter().cloned().zip(gains).collect(),
                b: CovariateGains::Optimal(OptimalKeyword::Optimal),
                sigma_eps_star,
            };
            let evaluated = evaluate_plan(&m, &roles, &file, &moments, report)?;
            if let Some(path) = emit_plan {
                let emitted = PlanFile::from_plan(&evaluated.plan, &evaluated.f, &evaluated.w);
                std::fs::write(&path, serde_json::to_string_pretty(&emitted)?)?;
                report.input("emitted_plan", path.display());
            }
            Ok(())
        }
        Command::Estimate {
            observed,
            treatment,
            response,
            instruments,
        } => cmd_estimate(&observed, &treatment, &response, &instruments, report),
        Command::Simulate {
            model,
            plan,
            roles,
            seed,
            n,
            law,
            csv_out,
            allow_unstable,
        } => {
            let config = SimulationConfig {
                n_draws: n,
                seed,
                law: law.into(),
            };
            cmd_simulate(
                &model,
                plan.as_deref(),
                &roles,
                &config,
                csv_out.as_deref(),
                allow_unstable,
                report,
            )
        }
        Command::ReproduceIverson { cov } => {
            let r = reproduce_iverson_from(cov.as_deref())?;
            let command = std::mem::take(&mut report.command);
            *report = Report { command, ..r };
            Ok(())
        }
    }
}

fn parse_b_override(b: &str, file: &PlanFile, roles: &Roles) -> Result<CovariateGains, CliError> {
    if b.trim() == "optimal" {
        return Ok(CovariateGains::Optimal(OptimalKeyword::Optimal));
    }
    let gains = b
        .split(',')
        .map(|g| g.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("--b: expected `optimal` or numbers: {e}")))?;
    let w = if roles.w.is_empty() {
        file.covariates().unwrap_or_default()
    } else {
        roles.w.clone()
    };
    if w.len() != gains.len() {
        return Err(CliError::Usage(format!(
            "--b has {} gains but W = {w:?} has {} variables",
            gains.len(),
            w.len()
        )));
    }
    Ok(CovariateGains::Gains(w.into_iter().zip(gains).collect()))
}

fn load_model(path: &Path, report: &mut Report) -> Result<StructuralModel, CliError> {
    let model = StructuralModel::from_path(path)?;
    report.input("model", path.display());
    report.input("model_hash", model.content_hash());
    Ok(model)
}

fn require_valid(model: &StructuralModel) -> Result<(), CliError> {
    let v = validate_model(model);
    if v.is_valid() {
        Ok(())
    } else {
        let msgs: Vec<String> = v.violations.iter().map(|v| v.to_string()).collect();
        Err(CliError::Failed(format!(
            "invalid model: {}",
            msgs.join("; ")
        )))
    }
}

fn control_variables(roles: &Roles) -> Vec<String> {
    std::iter::once(roles.response.clone())
        .chain(roles.f.iter().filter(|v| **v != roles.response).cloned())
        .collect()
}

fn partition(
    model: &StructuralModel,
    roles: &Roles,
    f: &[String],
    w: &[String],
) -> Result<VertexPartition, CliError> {
    Ok(partition_vertices(
        model,
        &roles.treatment,
        &roles.response,
        f,
        w,
    )?)
}

fn stable_partition(
    model: &StructuralModel,
    roles: &Roles,
    f: &[String],
    w: &[String],
    report: &mut Report,
) -> Result<VertexPartition, CliError> {
    require_valid(model)?;
    let p = partition(model, roles, f, w)?;
    let s = check_stability(model, &p)?;
    report.push_formula("rho_A_tt", s.rho_a_tt, "spectral radius of A_tt");
    report.push_formula(
        "rho_A_11",
        s.rho_a_11,
        "spectral radius of [[A_ss, A_sx], [A_xs, 0]]",
    );
    report.push_formula("stability_margin", s.margin, "1 - max(rho_A_tt, rho_A_11)");
    report.push("stable", s.stable);
    if !s.stable {
        return Err(CliError::Failed(format!(
            "model is not stable: both A_tt and A_11 must be convergent (rho_A_tt = {:.6}, rho_A_11 = {:.6})",
            s.rho_a_tt, s.rho_a_11
        )));
    }
    if s.margin < 0.05 {
        report.warnings.push(format!(
            "stability margin {:.4} is close to the boundary",
            s.margin
        ));
    }
    Ok(p)
}

fn observed_moments(
    model: &StructuralModel,
    observed: &Observed,
    report: &mut Report,
) -> Result<MomentSummary, CliError> {
    if let Some(path) = &observed.cov {
        report.input("cov", path.display());
        return Ok(MomentSummary::from_covariance_path(path)?);
    }
    if let Some(path) = &observed.data {
        report.input("data", path.display());
        return Ok(sample_moments(&Dataset::from_csv_path(path)?)?);
    }
    report.input("moments", "implied by model");
    Ok(implied_moments(model)?)
}

fn cmd_validate(path: &Path, report: &mut Report) -> Result<(), CliError> {
    let model = load_model(path, report)?;
    let v = validate_model(&model);
    report.push("variables", model.len());
    report.push("edges", model.diagram().edges().len());
    report.push("cyclic", model.diagram().is_cyclic());
    if let Ok(rho) = model.spectral_radius() {
        report.push_formula("rho_A", rho, "max |eigenvalue of A|");
    }
    report.push("valid", v.is_valid());
    for violation in &v.violations {
        report.warnings.push(violation.to_string());
    }
    if v.is_valid() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "model has {} violation(s)",
            v.violations.len()
        )))
    }
}

fn cmd_stability(path: &Path, roles: &Roles, report: &mut Report) -> Result<(), CliError> {
    let model = load_model(path, report)?;
    let f = control_variables(roles);
    stable_partition(&model, roles, &f, &roles.w, report).map(|_| ())
}

fn cmd_effects(path: &Path, roles: &Roles, report: &mut Report) -> Result<(), CliError> {
    let model = load_model(path, report)?;
    let f = control_variables(roles);
    let p = stable_partition(&model, roles, &f, &roles.w, report)?;
    let e = total_effects(&model, &p)?;
    report.push("S", p.names_of(p.s()).join(","));
    report.push("T", p.names_of(p.t()).join(","));
    report.push_formula("tau_sx", e.tau_sx(), "(I - A_ss)^-1 A_sx");
    if let Some(tau_st) = e.tau_st() {
        report.push_formula("tau_st", tau_st, "(I - A_ss)^-1 A_st");
    }
    report.push_formula("gamma_fx", &e.gamma_fx(), "first n_f entries of tau_sx");
    report.push_formula("gamma_yx", e.gamma_yx(), "first entry of tau_sx");
    let m = implied_moments(&model)?;
    report.push_formula("implied_mean", m.mean(), "(I - A)^-1 mu");
    report.push_formula(
        "implied_covariance",
        m.covariance(),
        "(I - A)^-1 Sigma_ee (I - A)^-T",
    );
    report.push("variable_order", model.names().join(","));
    Ok(())
}

struct EvaluatedPlan {
    plan: ControlPlan,
    f: Vec<String>,
    w: Vec<String>,
}

fn evaluate_plan(
    model: &StructuralModel,
    roles: &Roles,
    file: &PlanFile,
    moments: &MomentSummary,
    report: &mut Report,
) -> Result<EvaluatedPlan, CliError> {
    let mut f = file.control_variables(&roles.response);
    for extra in &roles.f {
        if !f.contains(extra) {
            f.push(extra.clone());
        }
    }
    let w = match file.covariates() {
        Some(w) => {
            if !roles.w.is_empty() && roles.w != w {
                return Err(CliError::Usage(
                    "--W conflicts with the covariates named in the plan file".into(),
                ));
            }
            w
        }
        None => roles.w.clone(),
    };
    let p = stable_partition(model, roles, &f, &w, report)?;
    let effects = total_effects(model, &p)?;
    let blocks = plan_blocks(moments, &effects)?;
    let mut plan = file.to_plan(&f, &w)?;
    report.push("F", f.join(","));
    report.push("W", w.join(","));
    report.push_formula(
        "gamma_fx",
        &effects.gamma_fx(),
        "first n_f entries of (I - A_ss)^-1 A_sx",
    );

    let mut optimal: Option<OptimalCovariateGains> = None;
    if file.is_optimal() {
        let opt = optimal_b(&effects, &blocks)?;
        plan = plan.with_b(opt.b.clone());
        optimal = Some(opt);
    }
    report.push("a", &plan.a);
    report.push_formula(
        "b",
        &plan.b,
        if optimal.is_some() {
            "b* = gamma'(gamma B_xw - B_fw) / gamma'gamma"
        } else {
            "given"
        },
    );
    if let Some(opt) = &optimal {
        report.push_formula(
            "first_order_residual",
            &opt.residual,
            "gamma b*' + B_fw - gamma B_xw",
        );
        if opt.residual_norm() > 1e-9 {
            report.warnings.push(format!(
                "optimal covariate gains do not solve the first-order condition exactly (max residual {:.3e}); b* is the projection onto gamma",
                opt.residual_norm()
            ));
        }
    }
    report.push("x", plan.x);
    report.push("sigma_eps_star", plan.sigma_eps_star);
    report.push("nonrecursive", plan.is_nonrecursive());
    report.push("perfect", plan.is_perfect());

    let s = plan_is_stable(&effects, &plan)?;
    report.push_formula("loop_gain", s.loop_gain, "a'gamma_fx");
    report.push_formula("plan_margin", s.margin, "1 - |a'gamma_fx|");
    if !s.stable {
        return Err(ControlError::UnstablePlan {
            abs_loop_gain: s.loop_gain.abs(),
        }
        .into());
    }
    let effect = plan_variance(moments, &effects, &blocks, &plan)?;
    report.push_formula(
        "feedback_factor",
        effect.feedback_factor,
        "1 / (1 - a'gamma_fx)",
    );
    report.push_formula(
        "mean_y",
        effect.mean_y,
        "gamma_yx(x - mu_x + b'mu_w) + mu_y + gamma_yx/(1 - a'gamma_fx) a'(mu_f + gamma_fx(x - mu_x + b'mu_w))",
    );
    report.push_formula(
        "var_y",
        effect.var_y,
        "(1,1) entry of D1 [Sigma_ff + gamma gamma' s* + (gamma - B_fx)(gamma - B_fx)' s_xx - B_fx B_fx' s_xx + R Sigma_ww R' - R0 Sigma_ww R0'] D1'",
    );
    report.push("var_f", &effect.var_f);
    report.push("observational_var_y", moments.var(&roles.response)?);

    let post = post_plan_stability(model, &p, &plan)?;
    report.push_formula(
        "post_plan_rho_A_11",
        post.rho_a_11,
        "spectral radius of [[A_ss, A_sx], [C_xs, 0]]",
    );
    if !post.stable {
        report.warnings.push(format!(
            "post-plan coefficient matrix is not convergent (rho = {:.4}); the equilibrium exists but is not reached by iteration",
            post.rho_a_11
        ));
    }
    Ok(EvaluatedPlan { plan, f, w })
}

fn cmd_estimate(
    observed: &Observed,
    treatment: &str,
    response: &str,
    instruments: &[String],
    report: &mut Report,
) -> Result<(), CliError> {
    let moments = if let Some(path) = &observed.cov {
        report.input("cov", path.display());
        MomentSummary::from_covariance_path(path)?
    } else if let Some(path) = &observed.data {
        report.input("data", path.display());
        sample_moments(&Dataset::from_csv_path(path)?)?
    } else {
        return Err(CliError::Usage("estimate needs --data or --cov".into()));
    };
    for z in instruments {
        let est = iv_estimate(&moments, treatment, response, z)?;
        report.push_formula(
            &format!("gamma_hat_iv[{z}]"),
            est.gamma_hat,
            &format!("sigma_{{{response},{z}}} / sigma_{{{treatment},{z}}}"),
        );
    }
    let est = tsls_estimate(&moments, treatment, response, instruments)?;
    report.push_formula(
        "gamma_hat_tsls",
        est.gamma_hat,
        "(S_xz S_zz^-1 S_zy) / (S_xz S_zz^-1 S_zx)",
    );
    report.push("first_stage_denominator", est.denominator);
    Ok(())
}

fn cmd_simulate(
    path: &Path,
    plan_path: Option<&Path>,
    roles: &Roles,
    config: &SimulationConfig,
    csv_out: Option<&Path>,
    allow_unstable: bool,
    report: &mut Report,
) -> Result<(), CliError> {
    let model = load_model(path, report)?;
    report.input("seed", config.seed);
    report.input("n", config.n_draws);
    let sim = match plan_path {
        None => draw_equilibrium(&model, config)?,
        Some(pp) => {
            report.input("plan", pp.display());
            let file = PlanFile::from_path(pp)?;
            let moments = implied_moments(&model)?;
            let evaluated = evaluate_plan(&model, roles, &file, &moments, report)?;
            let p = partition(&model, roles, &evaluated.f, &evaluated.w)?;
            simulate_plan(&model, &p, &evaluated.plan, config, allow_unstable)?
        }
    };
    if sim.unstable {
        report
            .warnings
            .push("simulated system is not convergent; draws are the algebraic equilibrium".into());
    }
    let emp = sample_moments(&sim.dataset)?;
    report.push("variable_order", emp.variables().join(","));
    report.push("empirical_mean", emp.mean());
    report.push("empirical_variance", &emp.covariance().diagonal());
    report.push("rng", sim.metadata.rng.as_str());
    if let Some(out) = csv_out {
        sim.dataset.write_csv(std::fs::File::create(out)?)?;
        let mut meta = out.as_os_str().to_owned();
        meta.push(".meta.json");
        std::fs::write(&meta, serde_json::to_string_pretty(&sim.metadata)?)?;
        report.input("csv_out", out.display());
    }
    Ok(())
}

/// The worked example on the bundled covariance fixture.
pub fn reproduce_iverson() -> Result<Report, CliError> {
    reproduce_iverson_from(None)
}

fn reproduce_iverson_from(cov: Option<&Path>) -> Result<Report, CliError> {
    let mut report = Report::new("reproduce-iverson".into());
    let moments = match cov {
        None => {
            report.input("cov", "bundled iverson_table1.json");
            MomentSummary::from_covariance_json(IVERSON_TABLE1)?
        }
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Failed(format!(
                    "missing fixture: covariance table {} not found",
                    path.display()
                )));
            }
            report.input("cov", path.display());
            MomentSummary::from_covariance_path(path)?
        }
    };

    let iv = iv_estimate(&moments, "X", "Y", "Z3")?;
    let gamma = iv.gamma_hat;
    report.push_formula("gamma_hat", gamma, "sigma_yz3 / sigma_xz3");
    report.push_formula(
        "gamma_hat_3dp",
        (gamma * 1000.0).round() / 1000.0,
        "gamma_hat rounded to three decimals as published",
    );
    let tsls = tsls_estimate(&moments, "X", "Y", &["Z3"])?;
    report.push_formula(
        "gamma_hat_tsls",
        tsls.gamma_hat,
        "two-stage least squares with Z3",
    );

    let effects = EffectSummary::from_estimates(
        "X",
        vec!["Y".into()],
        DVector::from_vec(vec![gamma]),
        vec![],
        vec!["Z1".into(), "Z2".into(), "Z3".into()],
    )?;
    let blocks = plan_blocks(&moments, &effects)?;

    let unit = ControlPlan::unconditional(1.0);
    let mean_coef = plan_mean(&moments, &effects, &unit)?;
    report.push_formula(
        "unconditional_mean_coefficient",
        mean_coef,
        "E(Y | set(X = x)) = gamma_yx x",
    );
    let base = plan_variance(
        &moments,
        &effects,
        &blocks,
        &ControlPlan::unconditional(0.0),
    )?
    .var_y;
    report.push("observational_var_y", moments.var("Y")?);
    report.push_formula(
        "unconditional_var_y",
        base,
        "sigma_yy + gamma^2 sigma_xx - 2 gamma sigma_xy",
    );
    report.push(
        "published_unconditional_var_y",
        PUBLISHED_UNCONDITIONAL_VAR_Y,
    );
    report.push(
        "discrepancy_note",
        format!(
            "the covariance table gives var(Y | set(X = x)) = {base:.4}; the published value is {PUBLISHED_UNCONDITIONAL_VAR_Y:.3}. \
             The published figure presumably comes from path coefficients of the original cyclic model, which are not \
             available; no choice of gamma near {gamma:.4} reproduces it from the table, so both values are shown."
        ),
    );
    report.warnings.push(format!(
        "unconditional variance {base:.4} differs from the published {PUBLISHED_UNCONDITIONAL_VAR_Y:.3}; see discrepancy_note"
    ));

    report.push_formula(
        "feedback_gain_bound",
        1.0 / gamma,
        "stable iff |gamma_yx a| < 1, i.e. |a| < 1/gamma_yx",
    );
    for a in IVERSON_FEEDBACK_GAINS {
        let plan = ControlPlan::new(1.0, vec![a], vec![], 0.0)?;
        let mean = plan_mean(&moments, &effects, &plan)?;
        let var =
            plan_variance(&moments, &effects, &blocks, &plan.with_b(DVector::zeros(0)))?.var_y;
        let tag = format!("a={a}");
        report.push_formula(
            &format!("mean_coefficient[{tag}]"),
            mean,
            "gamma_yx / (1 - gamma_yx a)",
        );
        report.push_formula(
            &format!("mean_factor[{tag}]"),
            mean / mean_coef,
            "1 / (1 - gamma_yx a)",
        );
        report.push_formula(
            &format!("var_y[{tag}]"),
            var,
            "var(Y | set(X = x)) / (1 - gamma_yx a)^2",
        );
        report.push_formula(
            &format!("var_factor[{tag}]"),
            var / base,
            "1 / (1 - gamma_yx a)^2",
        );
    }
    let half = feedback_factor(-1.0);
    report.push_formula(
        "limit_mean_coefficient",
        gamma * half,
        "gamma_yx / 2 as a -> -1/gamma_yx",
    );
    report.push_formula("limit_mean_factor", half, "1 / (1 - (-1))");
    report.push_formula("limit_var_factor", half * half, "1 / (1 - (-1))^2");
    report.push_formula("limit_var_y", base * half * half, "var(Y | set(X = x)) / 4");
    report.push("published_limit_var_y", PUBLISHED_UNCONDITIONAL_VAR_Y / 4.0);

    let with_z1 = effects.with_covariates(&["Z1".to_string()])?;
    let z1_blocks = plan_blocks(&moments, &with_z1)?;
    let opt = optimal_b(&with_z1, &z1_blocks)?;
    let opt_plan = ControlPlan::new(0.0, vec![0.0], opt.b.iter().copied().collect(), 0.0)?;
    report.push_formula("optimal_b[W=Z1]", opt.b[0], "B_xw - B_yw / gamma_yx");
    report.push_formula(
        "optimal_var_y[W=Z1]",
        plan_variance(&moments, &with_z1, &z1_blocks, &opt_plan)?.var_y,
        "var(Y | set(X = x + b* Z1))",
    );
    let cmp = covariate_compare(&moments, &effects, &["Z1".into()], &["Z2".into()])?;
    report.push_formula(
        "covariate_delta[Z1 vs Z2]",
        cmp.delta[(0, 0)],
        "(B_yz1 - gamma B_xz1)^2 s_z1 - (B_yz2 - gamma B_xz2)^2 s_z2",
    );
    report.push(
        "covariate_ordering[Z1 vs Z2]",
        serde_json::to_value(cmp.ordering)?
            .as_str()
            .unwrap_or_default(),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_json_roundtrip() {
        let mut r = Report::new("demo".into());
        r.input("seed", 7);
        r.push_formula("third", 1.0 / 3.0, "1/3");
        r.push("v", &DVector::from_vec(vec![0.1, 1e-300, -2.5]));
        r.push(
            "m",
            &DMatrix::from_row_slice(1, 2, &[std::f64::consts::PI, 0.7]),
        );
        r.push("flag", true);
        r.push("text", "hello");
        r.warnings.push("careful".into());
        let back = Report::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn text_uses_four_decimals() {
        assert_eq!(fmt_num(1.0 / 3.0), "0.3333");
        assert_eq!(fmt_num(0.0004918), "4.9180e-4");
        assert_eq!(fmt_num(0.0), "0.0000");
    }

    #[test]
    fn usage_error_exit_code() {
        let out = run_command(["cyclic-sem", "no-such-command"]);
        assert_eq!(out.status, 1);
        let out = run_command(["cyclic-sem", "stability"]);
        assert_eq!(out.status, 1);
    }

    #[test]
    fn help_exits_zero() {
        let out = run_command(["cyclic-sem", "--help"]);
        assert_eq!(out.status, 0);
        assert!(out.help.unwrap().contains("reproduce-iverson"));
    }
}
