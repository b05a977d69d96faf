//! Small dense linear-algebra helpers shared by the model, effect and control
//! code. Everything here works on `nalgebra` dynamic matrices; the models this
//! crate targets have at most a few dozen variables.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use thiserror::Error;

/// Condition number above which a linear system is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Threshold on the minimum eigenvalue used by positive-semidefinite tests.
pub const PSD_TOLERANCE: f64 = 1e-9;

const SCHUR_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix entry ({row}, {col}) is not finite")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

fn check_square_finite(m: &DMatrix<f64>) -> Result<(), LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    for col in 0..m.ncols() {
        for row in 0..m.nrows() {
            if !m[(row, col)].is_finite() {
                return Err(LinalgError::NonFiniteEntry { row, col });
            }
        }
    }
    Ok(())
}

/// Groups indices into strongly connected components of the support graph of
/// `m` (edge `j -> i` whenever `m[(i, j)] != 0`). Eigenvalues of `m` are the
/// union of the eigenvalues of the diagonal blocks indexed by these components.
fn support_components(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut graph = DiGraph::<(), ()>::with_capacity(n, n);
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)] != 0.0 {
                graph.add_edge(nodes[j], nodes[i], ());
            }
        }
    }
    tarjan_scc(&graph)
        .into_iter()
        .map(|comp| {
            let mut idx: Vec<usize> = comp.into_iter().map(|n| n.index()).collect();
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// All eigenvalues of a square real matrix, with multiplicity.
///
/// The matrix is first split along the strongly connected components of its
/// nonzero pattern. Acyclic parts then contribute their diagonal entries
/// exactly instead of going through an iterative solver, which matters for
/// nilpotent blocks where a dense solver only resolves zero to about
/// `sqrt(eps)`.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>, LinalgError> {
    check_square_finite(m)?;
    let mut out = Vec::with_capacity(m.nrows());
    for comp in support_components(m) {
        if comp.len() == 1 {
            out.push(Complex::new(m[(comp[0], comp[0])], 0.0));
            continue;
        }
        let block = m.select_rows(&comp).select_columns(&comp);
        out.extend(block_eigenvalues(block)?);
    }
    Ok(out)
}

/// Relative complex shifts tried when the real iteration stalls.
const RETRY_SHIFTS: [(f64, f64); 3] = [(0.0, 0.37), (0.21, 0.53), (-0.3, 0.41)];

fn block_eigenvalues(block: DMatrix<f64>) -> Result<Vec<Complex<f64>>, LinalgError> {
    let finite = |ev: &[Complex<f64>]| ev.iter().all(|z| z.re.is_finite() && z.im.is_finite());
    if let Some(schur) = Schur::try_new(block.clone(), f64::EPSILON, SCHUR_MAX_ITER) {
        let ev: Vec<_> = schur.complex_eigenvalues().iter().copied().collect();
        if finite(&ev) {
            return Ok(ev);
        }
    }
    // The real double-shift iteration can stall when conjugate pairs share
    // their imaginary part (e.g. +-a +-bi). A complex shift breaks the tie;
    // it is subtracted again afterwards.
    let n = block.nrows();
    let scale = block.amax().max(f64::MIN_POSITIVE);
    let complex = block.map(|v| Complex::new(v, 0.0));
    for (re, im) in RETRY_SHIFTS {
        let shift = Complex::new(re * scale, im * scale);
        let shifted = &complex + DMatrix::identity(n, n) * shift;
        if let Some(ev) = Schur::try_new(shifted, f64::EPSILON, SCHUR_MAX_ITER)
            .and_then(|schur| schur.eigenvalues())
        {
            let ev: Vec<_> = ev.iter().map(|z| z - shift).collect();
            if finite(&ev) {
                return Ok(ev);
            }
        }
    }
    Err(LinalgError::NoConvergence)
}

/// Largest eigenvalue modulus of a square real matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// 2-norm condition number from the singular values; infinite when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    if m.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `m * x = rhs` by LU with partial pivoting, or returns `None` when the
/// condition estimate of `m` exceeds `max_condition`.
pub fn solve_checked(
    m: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    max_condition: f64,
) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, rhs.ncols()));
    }
    if condition_number(m) > max_condition {
        return None;
    }
    m.clone().lu().solve(rhs)
}

pub fn inverse_checked(m: &DMatrix<f64>, max_condition: f64) -> Option<DMatrix<f64>> {
    solve_checked(m, &DMatrix::identity(m.nrows(), m.nrows()), max_condition)
}

/// Smallest eigenvalue of the symmetric part of `m` (0 for an empty matrix).
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let sym = symmetrize(m);
    sym.symmetric_eigenvalues().min()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub(crate) fn select_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn stalled_real_iteration_falls_back() {
        let block = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0,
                -0.4372268983218907,
                0.0,
                0.27220180176057734, //
                0.7474818316113222,
                0.0,
                -0.49543942711450395,
                0.0, //
                0.0,
                -0.7037668191872213,
                0.0,
                -0.7298388775386383, //
                0.0,
                0.0,
                0.6529583927745892,
                0.0,
            ],
        );
        assert!(Schur::try_new(block.clone(), f64::EPSILON, SCHUR_MAX_ITER).is_none());
        let ev = eigenvalues(&block).unwrap();
        assert_eq!(ev.len(), 4);
        for z in ev {
            assert!((z.norm() - 0.706572949).abs() < 1e-8, "{z}");
        }
        let block = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0,
                0.7180950901609542,
                0.0,
                0.0, //
                0.7456621676813668,
                0.0,
                0.4220977603602368,
                0.0, //
                0.0,
                0.0,
                0.0,
                0.9676645125412053, //
                -0.5041956561306769,
                0.0,
                0.8485891504367895,
                0.0,
            ],
        );
        let mut ev = eigenvalues(&block).unwrap();
        ev.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
        assert_eq!(ev.len(), 4);
        for z in &ev {
            assert!((z.re.abs() - 0.8499517847230755).abs() < 1e-10, "{z}");
            assert!((z.im.abs() - 0.21003585952395643).abs() < 1e-10, "{z}");
        }
        // Conjugate pairs come back as pairs.
        assert!((ev[0] - ev[1].conj()).norm() < 1e-10);
    }

    #[test]
    fn non_finite_schur_output_falls_back() {
        // Real Schur returns NaN here instead of reporting failure.
        let block = DMatrix::from_row_slice(
            5,
            5,
            &[
                0.0,
                -0.3849982154043095,
                -0.34573994845293854,
                0.0,
                0.16793228913802408, //
                0.355782146240678,
                0.0,
                0.0,
                -0.41072533508958164,
                0.0, //
                -0.22587655579462823,
                0.0,
                0.0,
                -0.3409643578261936,
                0.2823217560064695, //
                0.4374775902369336,
                0.0,
                0.0,
                0.0,
                0.0, //
                -0.20866475888622357,
                0.0,
                0.0,
                0.0,
                0.0,
            ],
        );
        let ev = eigenvalues(&block).unwrap();
        assert_eq!(ev.len(), 5);
        let rho = spectral_radius(&block).unwrap();
        assert!((rho - 0.5533991750226587).abs() < 1e-9, "{rho}");
        let sum: Complex<f64> = ev.iter().sum();
        assert!(sum.norm() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_zero_radius() {
        let m = DMatrix::<f64>::zeros(5, 5);
        assert_eq!(spectral_radius(&m).unwrap(), 0.0);
    }

    #[test]
    fn two_cycle_radius_is_geometric_mean() {
        for &(c1, c2) in &[(0.5f64, 0.5f64), (1.5, 0.8), (-0.3, 0.7), (2.0, -0.125)] {
            let m = DMatrix::from_row_slice(2, 2, &[0.0, c1, c2, 0.0]);
            assert_abs_diff_eq!(
                spectral_radius(&m).unwrap(),
                (c1 * c2).abs().sqrt(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn strictly_triangular_is_exactly_nilpotent() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.0, 0.0, 0.0, //
                0.7, 0.0, 0.0, 0.0, //
                -2.0, 0.3, 0.0, 0.0, //
                1.0, 5.0, 0.9, 0.0,
            ],
        );
        assert_eq!(spectral_radius(&m).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_entry_is_rejected() {
        let mut m = DMatrix::<f64>::zeros(3, 3);
        m[(1, 2)] = f64::NAN;
        assert_eq!(
            spectral_radius(&m),
            Err(LinalgError::NonFiniteEntry { row: 1, col: 2 })
        );
        let r = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            spectral_radius(&r),
            Err(LinalgError::NotSquare { .. })
        ));
    }

    #[test]
    fn solve_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(solve_checked(&m, &DMatrix::identity(2, 2), SINGULAR_CONDITION).is_none());
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let inv = inverse_checked(&ok, SINGULAR_CONDITION).unwrap();
        assert_abs_diff_eq!(
            (ok * inv - DMatrix::identity(2, 2)).norm(),
            0.0,
            epsilon = 1e-14
        );
    }
}
