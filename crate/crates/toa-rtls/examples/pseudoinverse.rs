//! Rank-aware pseudoinverse and projector building blocks.
//!
//! The clock estimator never sees full-rank normal equations: each frame
//! only touches the anchors some agent selected, so the accumulated
//! coefficient matrix is rank-deficient until every anchor has appeared,
//! and stays structurally singular in the gauge direction. This example
//! shows the two primitives that make that workable: the Moore-Penrose
//! pseudoinverse (minimum-norm least squares) and the orthogonal
//! projector onto a matrix's null space.

use toa_rtls::linalg::{complement_projector, mp_pinv, Matrix, Vector};

fn main() -> toa_rtls::Result<()> {
    // A 5x4 system whose last column is a linear combination of the first
    // two, so rank = 3 < 4: ordinary normal equations would be singular.
    #[rustfmt::skip]
    let a = Matrix::from_row_slice(5, 4, &[
        1.0, 0.0, 2.0,  1.0,
        0.0, 1.0, 1.0, -1.0,
        1.0, 1.0, 0.0,  0.0,
        2.0, 1.0, 1.0,  1.0,
        0.0, 2.0, 3.0, -2.0,
    ]);
    let pinv = mp_pinv(&a, 1e-12)?;

    // the four defining identities, each should vanish to machine precision
    let p1 = (&a * &pinv * &a - &a).abs().max();
    let p2 = (&pinv * &a * &pinv - &pinv).abs().max();
    let p3 = (&a * &pinv - (&a * &pinv).transpose()).abs().max();
    let p4 = (&pinv * &a - (&pinv * &a).transpose()).abs().max();
    println!("defining identities of the pseudoinverse (max residuals):");
    println!("  A X A = A      {p1:.3e}");
    println!("  X A X = X      {p2:.3e}");
    println!("  (A X)' = A X   {p3:.3e}");
    println!("  (X A)' = X A   {p4:.3e}");

    // Minimum-norm property: among all least-squares solutions of Ax = b
    // (a whole affine family here, because rank < 4), X b is the shortest.
    let b = Vector::from_vec(vec![1.0, 2.0, 0.5, -1.0, 0.3]);
    let x = &pinv * &b;
    // every other solution differs by a null-space step; take one and
    // compare. complement_projector(M) projects onto the complement of
    // col(M), so passing A' yields the projector onto null(A).
    let null_proj = complement_projector(&a.transpose(), 1e-12)?;
    let shift = &null_proj * Vector::from_vec(vec![0.4, -0.2, 0.1, 0.3]);
    let x_other = &x + &shift;
    let res = (&a * &x - &b).norm();
    let res_other = (&a * &x_other - &b).norm();
    println!("\nminimum-norm least squares with a 1-dimensional solution family:");
    println!("  residual  min-norm {res:.6}   shifted {res_other:.6}  (equal)");
    println!("  norm      min-norm {:.6}   shifted {:.6}  (min-norm smaller)", x.norm(), x_other.norm());

    // The projector onto null(C) is what the recursive update uses to keep
    // the estimate supported on covered anchors: it is symmetric,
    // idempotent, and annihilates C.
    let c = Matrix::from_row_slice(2, 4, &[1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 0.0, 0.0]);
    let pi = complement_projector(&c.transpose(), 1e-12)?;
    println!("\nnull-space projector of a 2x4 constraint matrix:");
    println!("  symmetry   {:.3e}", (&pi - &pi.transpose()).abs().max());
    println!("  idempotent {:.3e}", (&pi * &pi - &pi).abs().max());
    println!("  C pi = 0   {:.3e}", (&c * &pi).abs().max());
    Ok(())
}
