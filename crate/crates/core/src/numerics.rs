//! Dense linear-algebra kernel used by the equilibrium solver, the implicit
//! gradients and the cost-matrix projections.
//!
//! Everything here is a thin layer over `nalgebra` decompositions with the
//! truncation rules the rest of the crate relies on.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not symmetric: ||S - S^T||_F = {asymmetry:e} exceeds {allowed:e}")]
    NotSymmetric { asymmetry: f64, allowed: f64 },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Truncation settings for SVD- and eigenvalue-based routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToleranceConfig {
    /// Relative singular-value cutoff. `None` selects `max(rows, cols) * f64::EPSILON`.
    pub rcond: Option<f64>,
    /// Allowed relative asymmetry for symmetric eigendecompositions.
    pub eig_tol: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            rcond: None,
            eig_tol: 1e-10,
        }
    }
}

impl ToleranceConfig {
    pub fn with_rcond(rcond: f64) -> Self {
        Self {
            rcond: Some(rcond),
            ..Self::default()
        }
    }

    /// Absolute singular-value cutoff for a `rows x cols` matrix with largest
    /// singular value `sigma_max`.
    pub fn cutoff(&self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        let rcond = self
            .rcond
            .unwrap_or(rows.max(cols) as f64 * f64::EPSILON);
        rcond * sigma_max
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors stored column-wise, matching `values`.
    pub vectors: DMatrix<f64>,
}

impl SymmetricEigen {
    /// Rebuilds `Q diag(f(values)) Q^T`.
    pub fn recompose_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[j]);
        }
        scaled * self.vectors.transpose()
    }
}

pub fn frobenius_asymmetry(s: &DMatrix<f64>) -> f64 {
    (s - s.transpose()).norm()
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn eig_sym(s: &DMatrix<f64>, tol: &ToleranceConfig) -> Result<SymmetricEigen, NumericsError> {
    if !s.is_square() {
        return Err(NumericsError::NotSquare {
            rows: s.nrows(),
            cols: s.ncols(),
        });
    }
    let asymmetry = frobenius_asymmetry(s);
    let allowed = tol.eig_tol * s.norm();
    if asymmetry > allowed {
        return Err(NumericsError::NotSymmetric { asymmetry, allowed });
    }
    // Symmetrize exactly so round-off asymmetry does not leak into Q.
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(s: &DMatrix<f64>, tol: &ToleranceConfig) -> Result<f64, NumericsError> {
    let eig = eig_sym(s, tol)?;
    Ok(eig.values.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Singular values in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    if a.is_empty() {
        return DVector::zeros(0);
    }
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    DVector::from_vec(sv)
}

/// 2-norm condition number `sigma_max / sigma_min`; infinite for singular input.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = singular_values(a);
    match (sv.iter().next(), sv.iter().next_back()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

pub fn numerical_rank(a: &DMatrix<f64>, tol: &ToleranceConfig) -> usize {
    let sv = singular_values(a);
    let Some(&smax) = sv.iter().next() else {
        return 0;
    };
    if smax == 0.0 {
        return 0;
    }
    let cutoff = tol.cutoff(a.nrows(), a.ncols(), smax);
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Moore-Penrose pseudoinverse via SVD, zeroing singular values below the
/// configured cutoff.
pub fn pseudoinverse(a: &DMatrix<f64>, tol: &ToleranceConfig) -> DMatrix<f64> {
    let (rows, cols) = a.shape();
    if a.is_empty() {
        return DMatrix::zeros(cols, rows);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(cols, rows);
    }
    let cutoff = tol.cutoff(rows, cols, smax);
    // A^+ = V diag(1/s) U^T over the retained singular triplets.
    let mut v_scaled = v_t.transpose();
    for (k, mut col) in v_scaled.column_iter_mut().enumerate() {
        let s = svd.singular_values[k];
        col *= if s > cutoff { 1.0 / s } else { 0.0 };
    }
    v_scaled * u.transpose()
}

/// Computes `A^+ rhs` without forming the pseudoinverse.
pub fn pinv_solve(a: &DMatrix<f64>, rhs: &DVector<f64>, tol: &ToleranceConfig) -> DVector<f64> {
    let (rows, cols) = a.shape();
    assert_eq!(rows, rhs.len(), "right-hand side length must match row count");
    if a.is_empty() {
        return DVector::zeros(cols);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DVector::zeros(cols);
    }
    let cutoff = tol.cutoff(rows, cols, smax);
    let mut coeffs = u.transpose() * rhs;
    for (k, c) in coeffs.iter_mut().enumerate() {
        let s = svd.singular_values[k];
        *c = if s > cutoff { *c / s } else { 0.0 };
    }
    v_t.transpose() * coeffs
}

/// Normal equations `(A^T A + mu I) z = A^T rhs` prepared once and solved for
/// several damping values, as a Levenberg-Marquardt inner loop needs.
#[derive(Debug, Clone)]
pub struct DampedNormalEquations {
    gram: DMatrix<f64>,
    projected_rhs: DVector<f64>,
}

impl DampedNormalEquations {
    pub fn new(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Self {
        assert_eq!(a.nrows(), rhs.len(), "right-hand side length must match row count");
        // An explicit transpose goes through the blocked gemm kernel, which is
        // several times faster than `tr_mul` at a few hundred rows.
        let a_t = a.transpose();
        Self {
            gram: &a_t * a,
            projected_rhs: a_t * rhs,
        }
    }

    /// Returns `None` when the damped system cannot be factorized.
    pub fn solve(&self, damping: f64) -> Option<DVector<f64>> {
        let mut system = self.gram.clone();
        for i in 0..system.nrows() {
            system[(i, i)] += damping;
        }
        if let Some(chol) = system.clone().cholesky() {
            let z = chol.solve(&self.projected_rhs);
            if z.iter().all(|v| v.is_finite()) {
                return Some(z);
            }
        }
        let z = system.lu().solve(&self.projected_rhs)?;
        z.iter().all(|v| v.is_finite()).then_some(z)
    }
}

/// Minimizes `||A z - rhs||^2 + damping ||z||^2`.
///
/// With `damping == 0` this returns the minimum-norm least-squares solution.
pub fn lstsq(a: &DMatrix<f64>, rhs: &DVector<f64>, damping: f64) -> DVector<f64> {
    assert!(damping >= 0.0, "damping must be nonnegative");
    if damping == 0.0 {
        return pinv_solve(a, rhs, &ToleranceConfig::default());
    }
    match DampedNormalEquations::new(a, rhs).solve(damping) {
        Some(z) => z,
        // Tikhonov filter factors s / (s^2 + mu) from the SVD.
        None => {
            let svd = a.clone().svd(true, true);
            let u = svd.u.as_ref().expect("left singular vectors requested");
            let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
            let mut coeffs = u.transpose() * rhs;
            for (k, c) in coeffs.iter_mut().enumerate() {
                let s = svd.singular_values[k];
                *c *= s / (s * s + damping);
            }
            v_t.transpose() * coeffs
        }
    }
}

/// Solves the square system `A z = rhs` by partial-pivot LU.
pub fn lu_solve(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn pseudoinverse_of_identity_and_zero() {
        let tol = ToleranceConfig::default();
        let eye = DMatrix::<f64>::identity(4, 4);
        assert!((pseudoinverse(&eye, &tol) - &eye).norm() < 1e-14);
        let zero = DMatrix::<f64>::zeros(3, 5);
        let pz = pseudoinverse(&zero, &tol);
        assert_eq!(pz.shape(), (5, 3));
        assert_eq!(pz.norm(), 0.0);
    }

    #[test]
    fn moore_penrose_identities_on_random_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tol = ToleranceConfig::default();
        for &(r, c) in &[(8, 5), (5, 8), (12, 12), (40, 25)] {
            let a = random_matrix(&mut rng, r, c);
            let p = pseudoinverse(&a, &tol);
            assert!(rel(&(&a * &p * &a), &a) <= 1e-10);
            assert!(rel(&(&p * &a * &p), &p) <= 1e-8);
            let ap = &a * &p;
            let pa = &p * &a;
            assert!(rel(&ap.transpose(), &ap) <= 1e-8);
            assert!(rel(&pa.transpose(), &pa) <= 1e-8);
        }
    }

    #[test]
    fn pseudoinverse_truncates_rank_deficient_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let left = random_matrix(&mut rng, 6, 2);
        let right = random_matrix(&mut rng, 2, 6);
        let a = left * right;
        let tol = ToleranceConfig::default();
        assert_eq!(numerical_rank(&a, &tol), 2);
        let p = pseudoinverse(&a, &tol);
        assert!(rel(&(&a * &p * &a), &a) <= 1e-10);
        assert!(rel(&(&p * &a * &p), &p) <= 1e-8);
    }

    #[test]
    fn pinv_solve_matches_materialized_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 9, 6);
        let rhs = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
        let tol = ToleranceConfig::default();
        let direct = pinv_solve(&a, &rhs, &tol);
        let via = pseudoinverse(&a, &tol) * &rhs;
        assert!((direct - via).norm() <= 1e-12);
    }

    #[test]
    fn lstsq_identity_cases() {
        let eye = DMatrix::<f64>::identity(3, 3);
        let rhs = DVector::from_vec(vec![1.0, -2.0, 4.0]);
        assert!((lstsq(&eye, &rhs, 0.0) - &rhs).norm() < 1e-14);
        assert!((lstsq(&eye, &rhs, 1.0) - &rhs / 2.0).norm() < 1e-14);
    }

    #[test]
    fn lstsq_undamped_agrees_with_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 10, 4);
        let rhs = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let z = lstsq(&a, &rhs, 0.0);
        let via = pseudoinverse(&a, &ToleranceConfig::default()) * &rhs;
        assert!((z - via).norm() <= 1e-9);
    }

    #[test]
    fn lstsq_damped_satisfies_regularized_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 7, 7);
        let rhs = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let mu = 0.3;
        let z = lstsq(&a, &rhs, mu);
        let lhs = a.tr_mul(&a) * &z + &z * mu;
        assert!((lhs - a.tr_mul(&rhs)).norm() <= 1e-12);
    }

    #[test]
    fn eig_sym_sorts_ascending() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let eig = eig_sym(&s, &ToleranceConfig::default()).unwrap();
        assert_eq!(eig.values.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn eig_sym_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 10, 10);
        let s = &a + a.transpose();
        let eig = eig_sym(&s, &ToleranceConfig::default()).unwrap();
        let rebuilt = eig.recompose_with(|l| l);
        assert!(rel(&rebuilt, &s) <= 1e-9);
        let qtq = eig.vectors.tr_mul(&eig.vectors);
        assert!((qtq - DMatrix::identity(10, 10)).abs().max() <= 1e-10);
        assert!(eig.values.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eig_sym_matches_closed_form_two_by_two() {
        // [[a, b], [b, c]] has eigenvalues (a+c)/2 -+ sqrt(((a-c)/2)^2 + b^2).
        let (a, b, c) = (2.0, 0.7, -1.5);
        let s = DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
        let eig = eig_sym(&s, &ToleranceConfig::default()).unwrap();
        let mid = (a + c) / 2.0;
        let rad = (((a - c) / 2.0) * ((a - c) / 2.0) + b * b).sqrt();
        assert!((eig.values[0] - (mid - rad)).abs() <= 1e-10);
        assert!((eig.values[1] - (mid + rad)).abs() <= 1e-10);
    }

    #[test]
    fn eig_sym_matches_characteristic_roots_three_by_three() {
        // Tridiagonal [[2,-1,0],[-1,2,-1],[0,-1,2]]: eigenvalues 2 - sqrt2, 2, 2 + sqrt2.
        let s = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let eig = eig_sym(&s, &ToleranceConfig::default()).unwrap();
        let r2 = 2f64.sqrt();
        for (got, want) in eig.values.iter().zip([2.0 - r2, 2.0, 2.0 + r2]) {
            assert!((got - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn eig_sym_rejects_asymmetric() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(
            eig_sym(&s, &ToleranceConfig::default()),
            Err(NumericsError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn numerical_rank_basic_cases() {
        let tol = ToleranceConfig::default();
        assert_eq!(numerical_rank(&DMatrix::<f64>::identity(3, 3), &tol), 3);
        assert_eq!(numerical_rank(&DMatrix::<f64>::zeros(4, 2), &tol), 0);
    }

    #[test]
    fn condition_number_of_singular_is_infinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(condition_number(&a) > 1e15);
        assert!((condition_number(&DMatrix::<f64>::identity(3, 3)) - 1.0).abs() < 1e-12);
    }
}
