//! Path diagrams, linear structural equation models over them, the
//! descendant/nondescendant partition around a treatment, and stability
//! analysis.
//!
//! A model is the system `V = mu + A V + eps` where `A[(i, j)]` is the path
//! coefficient of `v_j` on `v_i` and the disturbances are independent with the
//! given variances. Cycles in the diagram are allowed.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{self, LinalgError};

/// Default tolerance subtracted from 1 when deciding convergence.
pub const STABILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("duplicate vertex name `{0}`")]
    DuplicateVertex(String),
    #[error("unknown vertex `{0}`")]
    UnknownVertex(String),
    #[error("edge index ({0}, {1}) out of range")]
    EdgeOutOfRange(usize, usize),
    #[error("edge {0} -> {0} is a self-loop")]
    SelfLoopEdge(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("variable `{0}` has no disturbance variance")]
    MissingVariance(String),
    #[error("response `{response}` is not a descendant of treatment `{treatment}`")]
    ResponseNotDescendant { treatment: String, response: String },
    #[error("control set mismatch: {0}")]
    ControlSetMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("model file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
}

/// A directed graph over named variables. Cycles are allowed; self-loops and
/// repeated edges are not.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDiagram {
    vertices: Vec<String>,
    edges: Vec<(usize, usize)>,
}

impl PathDiagram {
    pub fn new(vertices: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        for v in &vertices {
            if !seen.insert(v.as_str()) {
                return Err(ModelError::DuplicateVertex(v.clone()));
            }
        }
        let mut edge_set = BTreeSet::new();
        for &(from, to) in &edges {
            if from >= vertices.len() || to >= vertices.len() {
                return Err(ModelError::EdgeOutOfRange(from, to));
            }
            if from == to {
                return Err(ModelError::SelfLoopEdge(vertices[from].clone()));
            }
            if !edge_set.insert((from, to)) {
                return Err(ModelError::DuplicateEdge(
                    vertices[from].clone(),
                    vertices[to].clone(),
                ));
            }
        }
        Ok(Self {
            vertices,
            edges: edge_set.into_iter().collect(),
        })
    }

    pub fn vertices(&self) -> &[String] {
        &self.vertices
    }

    /// `(source, target)` pairs.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.vertices.iter().position(|v| v == name)
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn parents(&self, v: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, to)| to == v)
            .map(|&(from, _)| from)
            .collect()
    }

    /// Vertices reachable from `v` by a directed path of length at least one.
    /// `v` itself is excluded even when it lies on a cycle.
    pub fn descendants(&self, v: usize) -> BTreeSet<usize> {
        let mut adjacency = vec![Vec::new(); self.len()];
        for &(from, to) in &self.edges {
            adjacency[from].push(to);
        }
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([v]);
        while let Some(cur) = queue.pop_front() {
            for &next in &adjacency[cur] {
                if !seen[next] {
                    seen[next] = true;
                    queue.push_back(next);
                }
            }
        }
        (0..self.len()).filter(|&i| seen[i] && i != v).collect()
    }

    pub fn is_cyclic(&self) -> bool {
        let mut adjacency = vec![Vec::new(); self.len()];
        for &(from, to) in &self.edges {
            adjacency[from].push(to);
        }
        (0..self.len()).any(|v| reaches(&adjacency, v, v))
    }
}

fn reaches(adjacency: &[Vec<usize>], start: usize, target: usize) -> bool {
    let mut seen = vec![false; adjacency.len()];
    let mut stack: Vec<usize> = adjacency[start].clone();
    while let Some(cur) = stack.pop() {
        if cur == target {
            return true;
        }
        if !seen[cur] {
            seen[cur] = true;
            stack.extend(adjacency[cur].iter().copied());
        }
    }
    false
}

/// A linear structural equation model over a path diagram.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralModel {
    diagram: PathDiagram,
    coefficients: DMatrix<f64>,
    intercepts: DVector<f64>,
    disturbance_variances: DVector<f64>,
}

impl StructuralModel {
    /// Assembles a model. Only shapes are checked here; structural invariants
    /// are reported by [`validate_model`].
    pub fn new(
        diagram: PathDiagram,
        coefficients: DMatrix<f64>,
        intercepts: DVector<f64>,
        disturbance_variances: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let n = diagram.len();
        if coefficients.nrows() != n || coefficients.ncols() != n {
            return Err(ModelError::Dimension(format!(
                "coefficient matrix is {}x{}, expected {n}x{n}",
                coefficients.nrows(),
                coefficients.ncols()
            )));
        }
        if intercepts.len() != n || disturbance_variances.len() != n {
            return Err(ModelError::Dimension(format!(
                "expected {n} intercepts and disturbance variances"
            )));
        }
        Ok(Self {
            diagram,
            coefficients,
            intercepts,
            disturbance_variances,
        })
    }

    /// Builds the diagram from the nonzero off-diagonal support of
    /// `coefficients`.
    pub fn from_coefficients(
        names: Vec<String>,
        coefficients: DMatrix<f64>,
        intercepts: DVector<f64>,
        disturbance_variances: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let n = names.len();
        if coefficients.nrows() != n || coefficients.ncols() != n {
            return Err(ModelError::Dimension(format!(
                "coefficient matrix is {}x{}, expected {n}x{n}",
                coefficients.nrows(),
                coefficients.ncols()
            )));
        }
        let mut edges = Vec::new();
        for from in 0..n {
            for to in 0..n {
                if from != to && coefficients[(to, from)] != 0.0 {
                    edges.push((from, to));
                }
            }
        }
        let diagram = PathDiagram::new(names, edges)?;
        Self::new(diagram, coefficients, intercepts, disturbance_variances)
    }

    pub fn diagram(&self) -> &PathDiagram {
        &self.diagram
    }

    pub fn names(&self) -> &[String] {
        self.diagram.vertices()
    }

    pub fn len(&self) -> usize {
        self.diagram.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diagram.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, ModelError> {
        self.diagram
            .index_of(name)
            .ok_or_else(|| ModelError::UnknownVertex(name.to_string()))
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    /// Path coefficient of `from` in the equation of `to`.
    pub fn coefficient(&self, from: usize, to: usize) -> f64 {
        self.coefficients[(to, from)]
    }

    pub fn intercepts(&self) -> &DVector<f64> {
        &self.intercepts
    }

    pub fn disturbance_variances(&self) -> &DVector<f64> {
        &self.disturbance_variances
    }

    /// Disturbance covariance, diagonal by construction.
    pub fn disturbance_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.disturbance_variances)
    }

    pub fn spectral_radius(&self) -> Result<f64, LinalgError> {
        linalg::spectral_radius(&self.coefficients)
    }

    pub fn from_json_str(s: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.into_model()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_file(&self) -> ModelFile {
        let names = self.names();
        let n = self.len();
        let mut edges = Vec::new();
        for to in 0..n {
            for from in 0..n {
                let c = self.coefficients[(to, from)];
                if c != 0.0 || self.diagram.has_edge(from, to) {
                    edges.push(EdgeSpec {
                        from: names[from].clone(),
                        to: names[to].clone(),
                        coeff: c,
                    });
                }
            }
        }
        ModelFile {
            variables: names.to_vec(),
            edges,
            intercepts: names
                .iter()
                .cloned()
                .zip(self.intercepts.iter().copied())
                .collect(),
            disturbance_variances: names
                .iter()
                .cloned()
                .zip(self.disturbance_variances.iter().copied())
                .collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }

    /// SHA-256 of the canonical JSON encoding, as lowercase hex.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.to_file()).expect("model serializes");
        Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// JSON model file:
/// `{"variables": [..], "edges": [{"from", "to", "coeff"}], "intercepts": {..}, "disturbance_variances": {..}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub variables: Vec<String>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
    #[serde(default)]
    pub intercepts: BTreeMap<String, f64>,
    pub disturbance_variances: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    pub coeff: f64,
}

impl ModelFile {
    /// Self-loop edges are kept in the coefficient matrix (so validation can
    /// flag them) but left out of the diagram.
    pub fn into_model(self) -> Result<StructuralModel, ModelError> {
        let n = self.variables.len();
        let index: HashMap<&str, usize> = self
            .variables
            .iter()
            .enumerate()
            .map(|(i, v)| (v.as_str(), i))
            .collect();
        if index.len() != n {
            let mut seen = BTreeSet::new();
            let dup = self
                .variables
                .iter()
                .find(|v| !seen.insert(v.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::DuplicateVertex(dup));
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::UnknownVertex(name.to_string()))
        };
        let mut coefficients = DMatrix::zeros(n, n);
        let mut edges = Vec::new();
        let mut seen_edges = BTreeSet::new();
        for e in &self.edges {
            let (from, to) = (lookup(&e.from)?, lookup(&e.to)?);
            if !seen_edges.insert((from, to)) {
                return Err(ModelError::DuplicateEdge(e.from.clone(), e.to.clone()));
            }
            coefficients[(to, from)] = e.coeff;
            if from != to {
                edges.push((from, to));
            }
        }
        let mut intercepts = DVector::zeros(n);
        for (name, value) in &self.intercepts {
            intercepts[lookup(name)?] = *value;
        }
        let mut variances = DVector::from_element(n, f64::NAN);
        for (name, value) in &self.disturbance_variances {
            variances[lookup(name)?] = *value;
        }
        if let Some(i) = variances.iter().position(|v| v.is_nan()) {
            return Err(ModelError::MissingVariance(self.variables[i].clone()));
        }
        let diagram = PathDiagram::new(self.variables, edges)?;
        StructuralModel::new(diagram, coefficients, intercepts, variances)
    }
}

/// A structural invariant that a model (or a declared role assignment) breaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    SelfLoop {
        vertex: String,
    },
    MissingEdge {
        from: String,
        to: String,
    },
    ZeroCoefficientOnEdge {
        from: String,
        to: String,
    },
    NegativeVariance {
        vertex: String,
        value: f64,
    },
    NonFinite {
        what: String,
    },
    TBlockNotZero {
        nondescendant: String,
        parent: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SelfLoop { vertex } => write!(f, "self-loop at vertex {vertex}"),
            Violation::MissingEdge { from, to } => write!(
                f,
                "coefficient of {from} on {to} is nonzero but the diagram has no edge {from} -> {to}"
            ),
            Violation::ZeroCoefficientOnEdge { from, to } => {
                write!(f, "edge {from} -> {to} has a zero path coefficient")
            }
            Violation::NegativeVariance { vertex, value } => {
                write!(f, "disturbance variance of {vertex} is negative ({value})")
            }
            Violation::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Violation::TBlockNotZero {
                nondescendant,
                parent,
            } => write!(
                f,
                "T-block not zero: declared nondescendant {nondescendant} depends on {parent}"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_model(model: &StructuralModel) -> ValidationReport {
    let names = model.names();
    let a = model.coefficients();
    let mut violations = Vec::new();
    for i in 0..model.len() {
        if a[(i, i)] != 0.0 {
            violations.push(Violation::SelfLoop {
                vertex: names[i].clone(),
            });
        }
    }
    for to in 0..model.len() {
        for from in 0..model.len() {
            if from == to {
                continue;
            }
            let on_edge = model.diagram().has_edge(from, to);
            let c = a[(to, from)];
            if c != 0.0 && !on_edge {
                violations.push(Violation::MissingEdge {
                    from: names[from].clone(),
                    to: names[to].clone(),
                });
            } else if c == 0.0 && on_edge {
                violations.push(Violation::ZeroCoefficientOnEdge {
                    from: names[from].clone(),
                    to: names[to].clone(),
                });
            }
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        violations.push(Violation::NonFinite {
            what: "path coefficients".into(),
        });
    }
    if model.intercepts().iter().any(|v| !v.is_finite()) {
        violations.push(Violation::NonFinite {
            what: "intercepts".into(),
        });
    }
    for (i, &v) in model.disturbance_variances().iter().enumerate() {
        if !v.is_finite() {
            violations.push(Violation::NonFinite {
                what: format!("disturbance variance of {}", names[i]),
            });
        } else if v < 0.0 {
            violations.push(Violation::NegativeVariance {
                vertex: names[i].clone(),
                value: v,
            });
        }
    }
    ValidationReport { violations }
}

/// Checks a caller-declared set of nondescendants of `treatment`: each must
/// have zero coefficients on the treatment and on every true descendant.
pub fn validate_declared_nondescendants<S: AsRef<str>>(
    model: &StructuralModel,
    treatment: &str,
    declared: &[S],
) -> Result<ValidationReport, ModelError> {
    let x = model.index_of(treatment)?;
    let descendants = model.diagram().descendants(x);
    let names = model.names();
    let mut violations = Vec::new();
    for name in declared {
        let t = model.index_of(name.as_ref())?;
        for parent in std::iter::once(x).chain(descendants.iter().copied()) {
            if parent != t && model.coefficient(parent, t) != 0.0 {
                violations.push(Violation::TBlockNotZero {
                    nondescendant: names[t].clone(),
                    parent: names[parent].clone(),
                });
            }
        }
    }
    Ok(ValidationReport { violations })
}

/// The split of the vertices around a treatment `X`: descendants `S = F ∪ U`
/// with the response first in `F`, and nondescendants `T = W ∪ Z`.
///
/// Block order is `S` (F then U), `X`, `T` (W then Z). `F` and `W` keep the
/// caller's order (with the response moved to the front of `F`); `U` and `Z`
/// are sorted by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertexPartition {
    names: Vec<String>,
    treatment: usize,
    s: Vec<usize>,
    t: Vec<usize>,
    n_f: usize,
    n_w: usize,
}

impl VertexPartition {
    pub fn treatment(&self) -> usize {
        self.treatment
    }

    pub fn response(&self) -> usize {
        self.s[0]
    }

    pub fn s(&self) -> &[usize] {
        &self.s
    }

    pub fn f(&self) -> &[usize] {
        &self.s[..self.n_f]
    }

    pub fn u(&self) -> &[usize] {
        &self.s[self.n_f..]
    }

    pub fn t(&self) -> &[usize] {
        &self.t
    }

    pub fn w(&self) -> &[usize] {
        &self.t[..self.n_w]
    }

    pub fn z(&self) -> &[usize] {
        &self.t[self.n_w..]
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    /// Model indices in block order `S, X, T`.
    pub fn block_order(&self) -> Vec<usize> {
        let mut out = self.s.clone();
        out.push(self.treatment);
        out.extend(&self.t);
        out
    }

    /// Indices of the block `S ∪ {X}`.
    pub fn descendant_block(&self) -> Vec<usize> {
        let mut out = self.s.clone();
        out.push(self.treatment);
        out
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names_of(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.names[i].clone()).collect()
    }
}

pub fn partition_vertices<S: AsRef<str>>(
    model: &StructuralModel,
    treatment: &str,
    response: &str,
    f: &[S],
    w: &[S],
) -> Result<VertexPartition, ModelError> {
    let x = model.index_of(treatment)?;
    let y = model.index_of(response)?;
    if x == y {
        return Err(ModelError::ControlSetMismatch(
            "response and treatment are the same vertex".into(),
        ));
    }
    let descendants = model.diagram().descendants(x);
    if !descendants.contains(&y) {
        return Err(ModelError::ResponseNotDescendant {
            treatment: treatment.to_string(),
            response: response.to_string(),
        });
    }

    let mut f_idx = vec![y];
    for name in f {
        let v = model.index_of(name.as_ref())?;
        if v == y {
            continue;
        }
        if !descendants.contains(&v) {
            return Err(ModelError::ControlSetMismatch(format!(
                "{} is in F but is not a descendant of {treatment}",
                name.as_ref()
            )));
        }
        if f_idx.contains(&v) {
            return Err(ModelError::ControlSetMismatch(format!(
                "{} listed twice in F",
                name.as_ref()
            )));
        }
        f_idx.push(v);
    }

    let mut w_idx = Vec::new();
    for name in w {
        let v = model.index_of(name.as_ref())?;
        if v == x || descendants.contains(&v) {
            return Err(ModelError::ControlSetMismatch(format!(
                "{} is in W but is not a nondescendant of {treatment}",
                name.as_ref()
            )));
        }
        if w_idx.contains(&v) {
            return Err(ModelError::ControlSetMismatch(format!(
                "{} listed twice in W",
                name.as_ref()
            )));
        }
        w_idx.push(v);
    }

    let names = model.names();
    let by_name = |idx: &mut Vec<usize>| idx.sort_by(|&a, &b| names[a].cmp(&names[b]));
    let mut u_idx: Vec<usize> = descendants
        .iter()
        .copied()
        .filter(|v| !f_idx.contains(v))
        .collect();
    by_name(&mut u_idx);
    let mut z_idx: Vec<usize> = (0..model.len())
        .filter(|v| *v != x && !descendants.contains(v) && !w_idx.contains(v))
        .collect();
    by_name(&mut z_idx);

    let (n_f, n_w) = (f_idx.len(), w_idx.len());
    let mut s = f_idx;
    s.extend(u_idx);
    let mut t = w_idx;
    t.extend(z_idx);
    Ok(VertexPartition {
        names: names.to_vec(),
        treatment: x,
        s,
        t,
        n_f,
        n_w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Spectral radius of the nondescendant block `A_tt`.
    pub rho_a_tt: f64,
    /// Spectral radius of the block over `S ∪ {X}`.
    pub rho_a_11: f64,
    pub stable: bool,
    /// `1 - max(rho_a_tt, rho_a_11)`.
    pub margin: f64,
}

pub fn check_stability(
    model: &StructuralModel,
    partition: &VertexPartition,
) -> Result<StabilityReport, ModelError> {
    check_stability_with_tolerance(model, partition, STABILITY_TOLERANCE)
}

/// The characteristic polynomial of `A` factors over the `T` block and the
/// `S ∪ {X}` block because nondescendants never load on descendants, so `A`
/// converges iff both diagonal blocks do.
pub fn check_stability_with_tolerance(
    model: &StructuralModel,
    partition: &VertexPartition,
    tolerance: f64,
) -> Result<StabilityReport, ModelError> {
    let a = model.coefficients();
    let t = partition.t();
    let block = partition.descendant_block();
    let rho_a_tt = linalg::spectral_radius(&linalg::select(a, t, t))?;
    let rho_a_11 = linalg::spectral_radius(&linalg::select(a, &block, &block))?;
    let worst = rho_a_tt.max(rho_a_11);
    Ok(StabilityReport {
        rho_a_tt,
        rho_a_11,
        stable: worst < 1.0 - tolerance,
        margin: 1.0 - worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn two_cycle(c_yx: f64, c_xy: f64) -> StructuralModel {
        // order: X, Y
        let a = DMatrix::from_row_slice(2, 2, &[0.0, c_xy, c_yx, 0.0]);
        StructuralModel::from_coefficients(
            names(&["X", "Y"]),
            a,
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn diagram_rejects_self_loops_and_duplicates() {
        assert!(matches!(
            PathDiagram::new(names(&["a", "b"]), vec![(0, 0)]),
            Err(ModelError::SelfLoopEdge(_))
        ));
        assert!(matches!(
            PathDiagram::new(names(&["a", "b"]), vec![(0, 1), (0, 1)]),
            Err(ModelError::DuplicateEdge(..))
        ));
        assert!(matches!(
            PathDiagram::new(names(&["a", "a"]), vec![]),
            Err(ModelError::DuplicateVertex(_))
        ));
    }

    #[test]
    fn valid_model_has_empty_report() {
        let m = two_cycle(0.5, 0.5);
        assert!(validate_model(&m).is_valid());
        let report = validate_declared_nondescendants(&m, "X", &[] as &[&str]).unwrap();
        assert!(report.is_valid());
    }

    #[test]
    fn diagonal_coefficient_is_a_self_loop() {
        let m = two_cycle(0.5, 0.5);
        let mut a = m.coefficients().clone();
        a[(1, 1)] = 0.2;
        let bad = StructuralModel::new(
            m.diagram().clone(),
            a,
            m.intercepts().clone(),
            m.disturbance_variances().clone(),
        )
        .unwrap();
        let report = validate_model(&bad);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].to_string(), "self-loop at vertex Y");
    }

    #[test]
    fn declared_nondescendant_loading_on_treatment_is_flagged() {
        // X -> Y, X -> Z; declaring Z a nondescendant is wrong.
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.4, 0.0, 0.0, 0.3, 0.0, 0.0]);
        let m = StructuralModel::from_coefficients(
            names(&["X", "Y", "Z"]),
            a,
            DVector::zeros(3),
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        let report = validate_declared_nondescendants(&m, "X", &["Z"]).unwrap();
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0]
            .to_string()
            .starts_with("T-block not zero"));
    }

    #[test]
    fn support_mismatch_and_negative_variance() {
        let diagram = PathDiagram::new(names(&["X", "Y"]), vec![(0, 1)]).unwrap();
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 1)] = 0.3; // Y -> X has no diagram edge; X -> Y has no coefficient
        let m = StructuralModel::new(
            diagram,
            a,
            DVector::zeros(2),
            DVector::from_vec(vec![1.0, -0.5]),
        )
        .unwrap();
        let v = validate_model(&m).violations;
        assert!(v.contains(&Violation::MissingEdge {
            from: "Y".into(),
            to: "X".into()
        }));
        assert!(v.contains(&Violation::ZeroCoefficientOnEdge {
            from: "X".into(),
            to: "Y".into()
        }));
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::NegativeVariance { .. })));
    }

    #[test]
    fn single_edge_partition() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.7, 0.0]);
        let m = StructuralModel::from_coefficients(
            names(&["X", "Y"]),
            a,
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let p = partition_vertices(&m, "X", "Y", &["Y"], &[]).unwrap();
        assert_eq!(p.s(), &[1]);
        assert!(p.u().is_empty());
        assert!(p.t().is_empty());
        assert_eq!(p.block_order(), vec![1, 0]);
    }

    #[test]
    fn partition_errors() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.7, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let m = StructuralModel::from_coefficients(
            names(&["X", "Y", "Z"]),
            a,
            DVector::zeros(3),
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        assert!(matches!(
            partition_vertices(&m, "X", "Z", &[] as &[&str], &[]),
            Err(ModelError::ResponseNotDescendant { .. })
        ));
        assert!(matches!(
            partition_vertices(&m, "X", "Y", &["Z"], &[]),
            Err(ModelError::ControlSetMismatch(_))
        ));
        assert!(matches!(
            partition_vertices(&m, "X", "Y", &[] as &[&str], &["Y"]),
            Err(ModelError::ControlSetMismatch(_))
        ));
        assert!(matches!(
            partition_vertices(&m, "X", "Y", &[] as &[&str], &["Q"]),
            Err(ModelError::UnknownVertex(_))
        ));
    }

    #[test]
    fn two_cycle_stability() {
        let m = two_cycle(0.5, 0.5);
        let p = partition_vertices(&m, "X", "Y", &[] as &[&str], &[]).unwrap();
        let r = check_stability(&m, &p).unwrap();
        assert!((r.rho_a_11 - 0.5).abs() < 1e-12);
        assert_eq!(r.rho_a_tt, 0.0);
        assert!(r.stable);
        assert!((r.margin - 0.5).abs() < 1e-12);

        let m = two_cycle(1.5, 0.8);
        let p = partition_vertices(&m, "X", "Y", &[] as &[&str], &[]).unwrap();
        let r = check_stability(&m, &p).unwrap();
        assert!((r.rho_a_11 - 1.2f64.sqrt()).abs() < 1e-12);
        assert!(!r.stable);
        assert!(r.margin < 0.0);
    }

    #[test]
    fn json_roundtrip_and_unknown_keys() {
        let text = r#"{
            "variables": ["X", "Y"],
            "edges": [{"from": "X", "to": "Y", "coeff": 0.4}, {"from": "Y", "to": "X", "coeff": -0.2}],
            "intercepts": {"Y": 1.5},
            "disturbance_variances": {"X": 1.0, "Y": 2.0}
        }"#;
        let m = StructuralModel::from_json_str(text).unwrap();
        assert_eq!(m.coefficient(0, 1), 0.4);
        assert_eq!(m.coefficient(1, 0), -0.2);
        assert_eq!(m.intercepts()[0], 0.0);
        assert_eq!(m.intercepts()[1], 1.5);
        let back = StructuralModel::from_json_str(&m.to_json_string()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());

        let extra = text.replacen("\"variables\"", "\"colour\": 1, \"variables\"", 1);
        assert!(StructuralModel::from_json_str(&extra).is_err());
        let missing = r#"{"variables": ["X"], "disturbance_variances": {}}"#;
        assert!(matches!(
            StructuralModel::from_json_str(missing),
            Err(ModelError::MissingVariance(_))
        ));
    }

    #[test]
    fn json_self_loop_surfaces_as_violation() {
        let text = r#"{
            "variables": ["X", "Y"],
            "edges": [{"from": "X", "to": "Y", "coeff": 0.4}, {"from": "Y", "to": "Y", "coeff": 0.2}],
            "disturbance_variances": {"X": 1.0, "Y": 2.0}
        }"#;
        let m = StructuralModel::from_json_str(text).unwrap();
        let report = validate_model(&m);
        assert_eq!(
            report.violations,
            vec![Violation::SelfLoop { vertex: "Y".into() }]
        );
    }
}
