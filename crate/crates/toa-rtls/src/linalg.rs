//! Dense numerical kernel: rank-aware Moore-Penrose pseudoinverse, SPD
//! solves, and orthogonal-complement projectors.
//!
//! Everything downstream (the recursive synchronization engine, the robust
//! localizer) funnels its rank decisions through [`mp_pinv`] so that the
//! singular-value cutoff is controlled in exactly one place. Matrices are
//! `nalgebra` heap-allocated `f64` matrices; the kernel validates that no
//! NaN/Inf enters or leaves any operation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense dynamically sized `f64` matrix used throughout the crate.
pub type Matrix = DMatrix<f64>;
/// Dense dynamically sized `f64` column vector used throughout the crate.
pub type Vector = DVector<f64>;

/// Returns an error if any entry of `m` is NaN or infinite.
pub(crate) fn ensure_finite(name: &str, m: &Matrix) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} contains a non-finite entry")))
    }
}

pub(crate) fn ensure_finite_vec(name: &str, v: &Vector) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} contains a non-finite entry")))
    }
}

/// Thin SVD of a tall matrix (`rows >= cols`) by one-sided Jacobi rotations.
///
/// Returns `(u, sigma, v)` with `a = u * diag(sigma) * v^T`, `u` of the same
/// shape as `a` with orthonormal nonzero columns, `v` square orthogonal, and
/// `sigma` nonnegative. Chosen over the general-purpose SVD of the backing
/// library because the block matrices here routinely carry repeated singular
/// values (centering matrices have flat spectra), which that implementation
/// resolves poorly; cyclic Jacobi is insensitive to clustering and converges
/// to working precision on every input. Cost is O(rows * cols^2) per sweep
/// with a handful of sweeps, fine at the matrix sizes this crate touches.
fn jacobi_svd_tall(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, cols) = a.shape();
    debug_assert!(rows >= cols);
    let mut u = a.clone();
    let mut v = Matrix::identity(cols, cols);
    // sweep until every column pair is orthogonal to working precision
    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in (p + 1)..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    let x = u[(i, p)];
                    let y = u[(i, q)];
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let x = u[(i, p)];
                    let y = u[(i, q)];
                    u[(i, p)] = c * x - s * y;
                    u[(i, q)] = s * x + c * y;
                }
                for i in 0..cols {
                    let x = v[(i, p)];
                    let y = v[(i, q)];
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = vec![0.0; cols];
    for j in 0..cols {
        let norm = u.column(j).norm();
        sigma[j] = norm;
        if norm > 0.0 {
            for i in 0..rows {
                u[(i, j)] /= norm;
            }
        }
    }
    (u, sigma, v)
}

/// Eigendecomposition of a symmetric matrix by two-sided cyclic Jacobi
/// rotations: `a = v * diag(eigs) * v^T` with `v` orthogonal. Entries more
/// asymmetric than rounding noise are the caller's bug; the routine works
/// on the symmetrized half-sum. Same rationale as the Jacobi SVD above:
/// immune to clustered spectra and simple enough to trust.
pub(crate) fn sym_eig(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut w = (a + a.transpose()) * 0.5;
    let mut v = Matrix::identity(n, n);
    let scale = w.amax().max(1.0);
    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = w[(p, q)];
                if apq.abs() <= 1e-15 * scale {
                    continue;
                }
                rotated = true;
                let zeta = (w[(q, q)] - w[(p, p)]) / (2.0 * apq);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // W <- J^T W J applied to rows and columns p, q
                for i in 0..n {
                    let x = w[(i, p)];
                    let y = w[(i, q)];
                    w[(i, p)] = c * x - s * y;
                    w[(i, q)] = s * x + c * y;
                }
                for i in 0..n {
                    let x = w[(p, i)];
                    let y = w[(q, i)];
                    w[(p, i)] = c * x - s * y;
                    w[(q, i)] = s * x + c * y;
                }
                for i in 0..n {
                    let x = v[(i, p)];
                    let y = v[(i, q)];
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let eigs = (0..n).map(|i| w[(i, i)]).collect();
    (eigs, v)
}

/// Moore-Penrose pseudoinverse of `a` via SVD.
///
/// Singular values at or below `rank_tol * sigma_max` are treated as zero,
/// where `sigma_max` is the largest singular value. `rank_tol = 0.0` selects
/// the default relative tolerance `max(rows, cols) * f64::EPSILON`. The
/// all-zero matrix pseudo-inverts to the all-zero matrix of transposed shape.
pub fn mp_pinv(a: &Matrix, rank_tol: f64) -> Result<Matrix> {
    ensure_finite("mp_pinv input", a)?;
    if !(rank_tol >= 0.0) {
        return Err(Error::invalid("rank_tol must be nonnegative"));
    }
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("mp_pinv input must be nonempty"));
    }
    // Jacobi operates on tall matrices; pinv(A) = pinv(A^T)^T covers the rest
    let transposed = rows < cols;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (u, sigma, v) = jacobi_svd_tall(&work);
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let rel = if rank_tol == 0.0 {
        rows.max(cols) as f64 * f64::EPSILON
    } else {
        rank_tol
    };
    let cutoff = rel * sigma_max;
    // A+ = V * diag(1/sigma over retained values) * U^T
    let mut scaled_ut = u.transpose();
    for (i, mut row) in scaled_ut.row_iter_mut().enumerate() {
        let s = sigma[i];
        row.scale_mut(if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 });
    }
    let pinv_work = v * scaled_ut;
    let pinv = if transposed { pinv_work.transpose() } else { pinv_work };
    ensure_finite("mp_pinv output", &pinv)?;
    Ok(pinv)
}

/// Solves `a * x = b` for symmetric positive definite `a` via Cholesky.
///
/// `a` must be square and symmetric to within `1e-10` relative; the factor
/// failing to exist maps to [`Error::Singular`]. No inverse is formed.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure_finite("spd_solve lhs", a)?;
    ensure_finite("spd_solve rhs", b)?;
    if !a.is_square() {
        return Err(Error::invalid("spd_solve lhs must be square"));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::invalid("spd_solve rhs row count mismatch"));
    }
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::invalid(format!(
            "spd_solve lhs not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("Cholesky factorization failed".into()))?;
    Ok(chol.solve(b))
}

/// Orthogonal projector onto the complement of the column space of `c`,
/// `P = I - C C+`, with the rank decision delegated to [`mp_pinv`].
///
/// The result is symmetrized so that `P = P^T` holds to working precision;
/// idempotence follows from the Penrose identities.
pub fn complement_projector(c: &Matrix, rank_tol: f64) -> Result<Matrix> {
    let pinv = mp_pinv(c, rank_tol)?;
    let mut p = Matrix::identity(c.nrows(), c.nrows()) - c * pinv;
    // c * pinv is symmetric in exact arithmetic; pin that down
    p = (&p + p.transpose()) * 0.5;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Independent oracle: check the four Penrose conditions for a candidate
    /// pseudoinverse `x` of `a`.
    fn assert_penrose(a: &Matrix, x: &Matrix, tol: f64) {
        let axa = a * x * a;
        let xax = x * a * x;
        let ax = a * x;
        let xa = x * a;
        assert!((&axa - a).amax() < tol, "A X A != A, err {}", (&axa - a).amax());
        assert!((&xax - x).amax() < tol, "X A X != X, err {}", (&xax - x).amax());
        assert!(
            (&ax - ax.transpose()).amax() < tol,
            "A X not symmetric, err {}",
            (&ax - ax.transpose()).amax()
        );
        assert!(
            (&xa - xa.transpose()).amax() < tol,
            "X A not symmetric, err {}",
            (&xa - xa.transpose()).amax()
        );
    }

    #[test]
    fn sym_eig_reconstructs_and_is_orthogonal() {
        // known spectrum: [[2,1],[1,2]] has eigenvalues 1 and 3
        let a = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (eigs, v) = sym_eig(&a);
        let mut sorted = eigs.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_abs_diff_eq!(sorted[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sorted[1], 3.0, epsilon = 1e-12);

        // random symmetric: reconstruction + orthogonality at working precision
        let n = 7;
        let raw = Matrix::from_fn(n, n, |i, j| ((3 * i + 5 * j + i * j) as f64).sin());
        let s = (&raw + raw.transpose()) * 0.5;
        let (eigs, v2) = sym_eig(&s);
        let lam = Matrix::from_diagonal(&Vector::from_vec(eigs));
        let recon = &v2 * lam * v2.transpose();
        assert!((&recon - &s).amax() < 1e-13, "reconstruction err {}", (&recon - &s).amax());
        let vtv = v2.transpose() * &v2;
        assert!((vtv - Matrix::identity(n, n)).amax() < 1e-13);
        let _ = v;
    }

    #[test]
    fn pinv_identity_is_identity() {
        let a = Matrix::identity(4, 4);
        let x = mp_pinv(&a, 0.0).unwrap();
        assert_abs_diff_eq!(x, a, epsilon = 1e-14);
    }

    #[test]
    fn pinv_zero_matrix_is_zero_transpose() {
        let a = Matrix::zeros(3, 2);
        let x = mp_pinv(&a, 0.0).unwrap();
        assert_eq!(x.shape(), (2, 3));
        assert_eq!(x.amax(), 0.0);
    }

    #[test]
    fn pinv_rank_one_two_by_two() {
        // pinv([[1,1],[1,1]]) = [[0.25,0.25],[0.25,0.25]], worked by hand
        // from the rank-1 SVD (sigma = 2, u = v = [1,1]/sqrt(2)).
        let a = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let x = mp_pinv(&a, 0.0).unwrap();
        let expect = Matrix::from_element(2, 2, 0.25);
        assert_abs_diff_eq!(x, expect, epsilon = 1e-12);
        assert_penrose(&a, &x, 1e-12);
    }

    #[test]
    fn pinv_tall_full_rank_matches_normal_equations() {
        let a = Matrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let x = mp_pinv(&a, 0.0).unwrap();
        // full column rank: A+ = (A^T A)^-1 A^T
        let gram = a.transpose() * &a;
        let expect = gram.try_inverse().unwrap() * a.transpose();
        assert_abs_diff_eq!(x, expect, epsilon = 1e-12);
        assert_penrose(&a, &x, 1e-12);
    }

    #[test]
    fn pinv_respects_explicit_rank_tolerance() {
        // singular values 1 and 1e-6; a cutoff above 1e-6 truncates to rank 1
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 1e-6]));
        let full = mp_pinv(&a, 0.0).unwrap();
        assert_abs_diff_eq!(full[(1, 1)], 1e6, epsilon = 1e-4);
        let truncated = mp_pinv(&a, 1e-4).unwrap();
        assert_eq!(truncated[(1, 1)], 0.0);
        assert_abs_diff_eq!(truncated[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn pinv_rejects_non_finite() {
        let mut a = Matrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(mp_pinv(&a, 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pinv_of_centered_row_pair() {
        // the reduced row matrix for a 2-anchor selection out of 3; its
        // pseudoinverse recovers the min-norm preimage
        let a = Matrix::from_row_slice(2, 3, &[0.5, 0.0, -0.5, -0.5, 0.0, 0.5]);
        let x = mp_pinv(&a, 0.0).unwrap();
        assert_penrose(&a, &x, 1e-12);
    }

    #[test]
    fn spd_solve_identity_returns_rhs() {
        let a = Matrix::identity(3, 3);
        let b = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = spd_solve(&a, &b).unwrap();
        assert_abs_diff_eq!(x, b, epsilon = 1e-14);
    }

    #[test]
    fn spd_solve_known_two_by_two() {
        // [[2,1],[1,2]] x = [3;3] has solution [1;1]
        let a = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let b = Matrix::from_row_slice(2, 1, &[3.0, 3.0]);
        let x = spd_solve(&a, &b).unwrap();
        assert_abs_diff_eq!(x, Matrix::from_element(2, 1, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn spd_solve_random_spd_residual_small() {
        // deterministic pseudo-random SPD system, residual check
        let n = 8;
        let raw = Matrix::from_fn(n, n, |i, j| ((i * 31 + j * 17 + 7) % 13) as f64 / 13.0 - 0.4);
        let a = &raw * raw.transpose() + Matrix::identity(n, n) * 0.5;
        let b = Matrix::from_fn(n, 1, |i, _| (i as f64 * 0.7).sin());
        let x = spd_solve(&a, &b).unwrap();
        assert!((&a * &x - &b).amax() < 1e-10);
    }

    #[test]
    fn spd_solve_rejects_asymmetric_and_indefinite() {
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let b = Matrix::identity(2, 2);
        assert!(matches!(spd_solve(&asym, &b), Err(Error::InvalidInput(_))));

        let indef = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(spd_solve(&indef, &b), Err(Error::Singular(_))));
    }

    #[test]
    fn projector_of_ones_column() {
        // C = [1;1]: P = I - C C+ = [[0.5,-0.5],[-0.5,0.5]]
        let c = Matrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let p = complement_projector(&c, 0.0).unwrap();
        let expect = Matrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert_abs_diff_eq!(p, expect, epsilon = 1e-12);
    }

    #[test]
    fn projector_annihilates_column_space_and_is_idempotent() {
        let c = Matrix::from_row_slice(4, 2, &[1.0, 0.5, 2.0, -1.0, 0.0, 3.0, 1.0, 1.0]);
        let p = complement_projector(&c, 0.0).unwrap();
        assert!((&p * &c).amax() < 1e-12, "P C != 0");
        assert!((&p * &p - &p).amax() < 1e-9, "P not idempotent");
        assert!((&p - p.transpose()).amax() < 1e-12, "P not symmetric");
    }

    #[test]
    fn projector_of_full_rank_square_is_zero() {
        let c = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let p = complement_projector(&c, 0.0).unwrap();
        assert!(p.amax() < 1e-12);
    }
}
