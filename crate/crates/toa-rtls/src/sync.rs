//! Joint anchor clock-offset estimation by blockwise recursive least squares
//! with rank-deficient update blocks.
//!
//! Per time instance, every agent contributes a centered row block
//! `A_n = B(|S_n|) F(S_n)` and data `y_n = A_n (r_n - d(p_n))`; stacking over
//! agents gives the block `(A_t, y_t)`. The rows always sum to zero, so the
//! stacked system never has full column rank and the recursion must track the
//! minimum-norm least-squares solution rather than a unique one. The state
//! carries the offset estimate `delta_hat`, a null-space tracker `Q` and a
//! weighting matrix `R`; with forgetting factor `lambda`, block `u` enters
//! the underlying stacked problem scaled by `lambda^-u`.
//!
//! Two transitions are provided. [`brmp_update_full`] is always valid.
//! [`brmp_update_reduced`] applies when every agent keeps more than half the
//! anchors and all touched anchors are already covered by earlier blocks;
//! the new rows then lie inside the tracked row space, `A_t Q_{t-1}`
//! vanishes, and the pseudoinverse drops out of the update entirely.
//!
//! [`direct_lls_solve`] is the non-recursive reference: it stacks every
//! scaled block and solves once through the pseudoinverse. It is the
//! definition of correctness for the recursion and grows with the horizon,
//! so it is only suitable for short streams and benchmarks.
//!
//! Numerical safeguards, both enforcing exact-arithmetic invariants:
//! `R` is symmetrized and re-projected onto the centered subspace of the
//! covered anchors after every update (the `1/lambda^2` growth otherwise
//! amplifies rounding dust in directions the data never excites, e.g. the
//! all-ones direction, until it swamps the state on long horizons), and
//! offset entries outside the covered set are pinned to exact zero, which
//! is where the minimum-norm solution has them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite_vec, mp_pinv, spd_solve, Matrix, Vector};
use crate::model::{distance_vector, reduced_row_matrix, validate_subset, NetworkGeometry, ToaFrame};

/// State of the recursive offset estimator after `t` absorbed blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyncState {
    /// Number of anchors `M`.
    pub m: usize,
    /// Forgetting factor in `(0, 1]`.
    pub lambda: f64,
    /// Number of blocks absorbed so far.
    pub t: usize,
    /// Current minimum-norm offset estimate, ns.
    pub delta_hat: Vector,
    /// Null-space tracker `Q_t`; starts at the identity and loses the row
    /// space of every absorbed block.
    pub q_mat: Matrix,
    /// Weighting matrix `R_t`; symmetric positive semidefinite.
    pub r_mat: Matrix,
    /// Sorted union of all anchor subsets seen so far. Maintained by the
    /// caller that orchestrates updates (see `engine`); the update functions
    /// copy it through untouched.
    pub covered_set: Vec<usize>,
}

/// One stacked measurement block: `a_block` is `M_t x M` with `M_t` the sum
/// of the per-agent subset sizes, `y_block` the matching data vector, and
/// `row_sets` the per-agent subsets in stacking order.
#[derive(Debug, Clone)]
pub struct MeasurementBlock {
    pub a_block: Matrix,
    pub y_block: Vector,
    pub row_sets: Vec<Vec<usize>>,
}

/// Fresh state: zero offsets, `Q_0 = I`, `R_0 = 0`, nothing covered.
pub fn init_sync(m: usize, lambda: f64) -> Result<SyncState> {
    if m < 2 {
        return Err(Error::invalid("at least two anchors required"));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid("forgetting factor must lie in (0, 1]"));
    }
    Ok(SyncState {
        m,
        lambda,
        t: 0,
        delta_hat: Vector::zeros(m),
        q_mat: Matrix::identity(m, m),
        r_mat: Matrix::zeros(m, m),
        covered_set: Vec::new(),
    })
}

/// Builds the stacked block for one frame from the per-agent anchor
/// selections and position estimates: row block `A_n = B(|S_n|) F(S_n)`,
/// data `y_n = A_n (r_n - d(p_n))`.
pub fn assemble_block(
    frame: &ToaFrame,
    selections: &[Vec<usize>],
    positions: &[Vector],
    geom: &NetworkGeometry,
) -> Result<MeasurementBlock> {
    let m = geom.num_anchors();
    let n = frame.measurements.len();
    if selections.len() != n || positions.len() != n {
        return Err(Error::invalid("per-agent selection/position count mismatch"));
    }
    let mut total_rows = 0;
    for s in selections {
        validate_subset(s, m)?;
        total_rows += s.len();
    }
    let mut a_block = Matrix::zeros(total_rows, m);
    let mut y_block = Vector::zeros(total_rows);
    let mut row = 0;
    for idx in 0..n {
        let r = &frame.measurements[idx];
        if r.len() != m {
            return Err(Error::invalid("measurement vector length mismatch"));
        }
        ensure_finite_vec("measurements", r)?;
        let d = distance_vector(&positions[idx], geom)?;
        let a_n = reduced_row_matrix(&selections[idx], m)?;
        let y_n = &a_n * (r - d);
        let k = selections[idx].len();
        a_block.view_mut((row, 0), (k, m)).copy_from(&a_n);
        y_block.rows_mut(row, k).copy_from(&y_n);
        row += k;
    }
    Ok(MeasurementBlock { a_block, y_block, row_sets: selections.to_vec() })
}

/// True when the cheap reduced transition applies: every selection keeps
/// strictly more than half the anchors, and every touched anchor is already
/// in the state's covered set.
pub fn reduced_update_condition(selections: &[Vec<usize>], state: &SyncState) -> bool {
    if selections.is_empty() {
        return false;
    }
    let mut covered = vec![false; state.m];
    for &i in &state.covered_set {
        covered[i] = true;
    }
    selections.iter().all(|s| {
        2 * s.len() > state.m && s.iter().all(|&i| i < state.m && covered[i])
    })
}

/// Sorted union of the state's covered set with every row set of a block.
pub(crate) fn support_union(covered: &[usize], row_sets: &[Vec<usize>], m: usize) -> Vec<usize> {
    let mut inside = vec![false; m];
    for &i in covered {
        inside[i] = true;
    }
    for s in row_sets {
        for &i in s {
            inside[i] = true;
        }
    }
    (0..m).filter(|&i| inside[i]).collect()
}

/// Projector onto centered vectors supported on `support`: zero outside the
/// support block, identity-minus-mean inside it.
fn support_centering(support: &[usize], m: usize) -> Matrix {
    let k = support.len();
    let mut p = Matrix::zeros(m, m);
    if k == 0 {
        return p;
    }
    let inv = 1.0 / k as f64;
    for &i in support {
        for &j in support {
            p[(i, j)] = if i == j { 1.0 - inv } else { -inv };
        }
    }
    p
}

/// Largest eigenvalue the discount accumulator `R` may reach before its
/// spectrum is clipped; beyond this, a starved direction carries no usable
/// information and only endangers the gain solve's conditioning.
const SPECTRAL_CAP: f64 = 1e8;

/// Shared tail of both transitions: state advance plus enforcement of the
/// exact-arithmetic invariants (R symmetric, R supported on the centered
/// covered subspace, delta supported on the covered set).
fn finish_update(
    state: &SyncState,
    block: &MeasurementBlock,
    g: &Matrix,
    a: &Matrix,
    step_t: usize,
) -> Result<SyncState> {
    let lambda2 = state.lambda * state.lambda;
    let innovation = &block.y_block - a * &state.delta_hat;
    let mut delta = &state.delta_hat + g * innovation;
    let q_new = &state.q_mat - g * (a * &state.q_mat);
    let ig_a = Matrix::identity(state.m, state.m) - g * a;
    let mut r_new = (&ig_a * &state.r_mat * ig_a.transpose() + g * g.transpose()) / lambda2;

    let support = support_union(&state.covered_set, &block.row_sets, state.m);
    let mut in_support = vec![false; state.m];
    for &i in &support {
        in_support[i] = true;
    }
    // min-norm solution has exact zeros outside the covered support
    for i in 0..state.m {
        if !in_support[i] {
            delta[i] = 0.0;
        }
    }
    r_new = (&r_new + r_new.transpose()) * 0.5;
    let pi = support_centering(&support, state.m);
    r_new = &pi * r_new * &pi;
    r_new = (&r_new + r_new.transpose()) * 0.5;

    // Windup protection. An anchor direction that goes unexcited (kept out
    // of every selection) for many steps has its variance grow by 1/lambda^2
    // per step — correct for discounted least squares, but after enough
    // starvation the scale swamps f64 and the gain solve turns indefinite.
    // Capping the spectrum treats a starved direction as "almost unknown",
    // which is all the unbounded value expresses anyway. The cap never
    // activates under regular excitation (growth is contracted every time a
    // direction is measured), so equivalence with the direct solver is
    // untouched in those regimes; negative dust is clipped to keep R
    // positive semidefinite.
    let m_f = state.m as f64;
    if r_new.amax() * m_f > SPECTRAL_CAP {
        let (eigs, v) = crate::linalg::sym_eig(&r_new);
        let clipped =
            Vector::from_vec(eigs.into_iter().map(|e| e.clamp(0.0, SPECTRAL_CAP)).collect());
        r_new = &v * Matrix::from_diagonal(&clipped) * v.transpose();
        r_new = &pi * r_new * &pi;
        r_new = (&r_new + r_new.transpose()) * 0.5;
    }

    ensure_finite_vec("updated offsets", &delta).map_err(|_| Error::Numerical {
        t: step_t,
        msg: "offset update produced non-finite values".into(),
    })?;
    Ok(SyncState {
        m: state.m,
        lambda: state.lambda,
        t: step_t,
        delta_hat: delta,
        q_mat: q_new,
        r_mat: r_new,
        covered_set: state.covered_set.clone(),
    })
}

/// General recursive transition, valid for any block.
///
/// `rank_tol` is forwarded to the pseudoinverse of `C_t = A_t Q_{t-1}`
/// (`0.0` selects the default cutoff). The covered set is copied through
/// unchanged; the caller decides how coverage grows.
pub fn brmp_update_full(
    state: &SyncState,
    block: &MeasurementBlock,
    rank_tol: f64,
) -> Result<SyncState> {
    let step_t = state.t + 1;
    let a = &block.a_block;
    let rows = a.nrows();
    if a.ncols() != state.m {
        return Err(Error::invalid("block column count mismatch"));
    }
    if block.y_block.len() != rows {
        return Err(Error::invalid("block data length mismatch"));
    }

    let c = a * &state.q_mat;
    // When every row already lies in the tracked row space, C is pure
    // rounding noise at the scale of the product that formed it. A cutoff
    // relative to sigma_max(C) cannot detect that (the largest singular
    // value is itself noise), so floor the decision at the matmul noise
    // level and treat such a C as exactly zero; the update then coincides
    // with the reduced transition, as it should. The extra factor absorbs
    // rounding that accumulates inside Q over many transitions; genuine new
    // directions enter C at unit-ish scale, far above this floor.
    let noise_floor = 1024.0 * state.m as f64 * f64::EPSILON * a.amax() * state.q_mat.amax();
    let (c_pinv, proj) = if c.amax() <= noise_floor {
        (Matrix::zeros(state.m, rows), Matrix::identity(rows, rows))
    } else {
        let c_pinv = mp_pinv(&c, rank_tol)?;
        // complement projector built from the same pseudoinverse so the
        // rank decision is made exactly once
        let mut proj = Matrix::identity(rows, rows) - &c * &c_pinv;
        proj = (&proj + proj.transpose()) * 0.5;
        (c_pinv, proj)
    };

    let ar = a * &state.r_mat; // A R, also gives (R A^T)^T
    let t_mat = &ar * a.transpose(); // A R A^T
    let mut s_mat = Matrix::identity(rows, rows) + &proj * &t_mat * &proj;
    s_mat = (&s_mat + s_mat.transpose()) * 0.5;
    let k_proj = spd_solve(&s_mat, &proj).map_err(|e| Error::Numerical {
        t: step_t,
        msg: format!("gain solve failed: {e}"),
    })?; // K (I - C C+)
    let v = (ar.transpose() - &c_pinv * &t_mat) * k_proj; // (I - C+ A) R A^T K (I - C C+)
    let g = &c_pinv + v;
    finish_update(state, block, &g, a, step_t)
}

/// Reduced transition for blocks whose rows stay inside the tracked row
/// space ([`reduced_update_condition`]): `C_t` vanishes, so the gain needs one SPD
/// solve and no pseudoinverse.
///
/// Calling this when the condition does not hold silently computes the wrong
/// estimate; the caller owns the branch decision.
pub fn brmp_update_reduced(state: &SyncState, block: &MeasurementBlock) -> Result<SyncState> {
    let step_t = state.t + 1;
    let a = &block.a_block;
    let rows = a.nrows();
    if a.ncols() != state.m {
        return Err(Error::invalid("block column count mismatch"));
    }
    if block.y_block.len() != rows {
        return Err(Error::invalid("block data length mismatch"));
    }
    let ar = a * &state.r_mat;
    let mut s_mat = Matrix::identity(rows, rows) + &ar * a.transpose();
    s_mat = (&s_mat + s_mat.transpose()) * 0.5;
    // G = R A^T K with K = S^-1; solve for G^T = K (A R) in one factorization
    let g_t = spd_solve(&s_mat, &ar).map_err(|e| Error::Numerical {
        t: step_t,
        msg: format!("gain solve failed: {e}"),
    })?;
    let g = g_t.transpose();
    finish_update(state, block, &g, a, step_t)
}

/// Reference solver: stacks every block `u = 1..=t` scaled by `lambda^-u`
/// and returns the minimum-norm least-squares offset estimate through one
/// pseudoinverse. Memory and time grow with the horizon.
pub fn direct_lls_solve(blocks: &[MeasurementBlock], lambda: f64, rank_tol: f64) -> Result<Vector> {
    if blocks.is_empty() {
        return Err(Error::invalid("no blocks to solve"));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid("forgetting factor must lie in (0, 1]"));
    }
    let m = blocks[0].a_block.ncols();
    let total: usize = blocks.iter().map(|b| b.a_block.nrows()).sum();
    let mut stacked = Matrix::zeros(total, m);
    let mut rhs = Vector::zeros(total);
    let mut row = 0;
    let mut scale = 1.0;
    for block in blocks {
        scale /= lambda;
        if !scale.is_finite() || scale > 1e280 {
            return Err(Error::Range(format!(
                "forgetting weight lambda^-u overflows at u={} (lambda={lambda})",
                row_block_index(blocks, block)
            )));
        }
        if block.a_block.ncols() != m {
            return Err(Error::invalid("inconsistent block widths"));
        }
        let k = block.a_block.nrows();
        stacked.view_mut((row, 0), (k, m)).copy_from(&(&block.a_block * scale));
        rhs.rows_mut(row, k).copy_from(&(&block.y_block * scale));
        row += k;
    }
    let pinv = mp_pinv(&stacked, rank_tol)?;
    Ok(pinv * rhs)
}

fn row_block_index(blocks: &[MeasurementBlock], target: &MeasurementBlock) -> usize {
    blocks
        .iter()
        .position(|b| std::ptr::eq(b, target))
        .map(|i| i + 1)
        .unwrap_or(0)
}
