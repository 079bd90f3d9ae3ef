//! Robust single-agent localization from clock-corrected ToA measurements.
//!
//! For a trial LoS subset `S`, the position cost is the centered prediction
//! error
//!
//! ```text
//! f(p) = | B(|S|) F(S) (r - d(p) - delta_hat) |^2
//! ```
//!
//! where centering removes the unknown common send time. The solver
//! alternates two steps, starting from the full anchor set: minimize `f`
//! over `p` by a BFGS quasi-Newton iteration with Armijo backtracking, then
//! re-select the `ceil(alpha M)` anchors with the smallest full-network
//! residual magnitudes. NLoS delays are large and positive, so their
//! residuals stand out and the trimming converges to a LoS-only subset in a
//! few rounds; iteration stops at a selection fixpoint or after `k_max`
//! rounds.
//!
//! Gradient of the cost, with `J` the Jacobian of the ToA distances
//! (`row m = (p - q_m)^T / (c |q_m - p|)`):
//!
//! ```text
//! grad f(p) = -2 J^T A(S)^T A(S) (r - d(p) - delta_hat)
//! ```
//!
//! verified against central finite differences in the test batteries.

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite_vec, Vector};
use crate::model::{distance_vector, validate_subset, NetworkGeometry};

/// Agents closer than this to an anchor make the distance gradient
/// ill-defined; gradient evaluation refuses them.
const ANCHOR_EXCLUSION_M: f64 = 1e-9;

/// Armijo sufficient-decrease constant.
const ARMIJO_C1: f64 = 1e-4;
/// Backtracking shrink factor.
const BACKTRACK: f64 = 0.5;
/// Step length below which the line search gives up.
const MIN_STEP: f64 = 1e-20;

/// Relative objective-decrease threshold below which an accepted step counts
/// as stagnant. Two consecutive stagnant steps mean the iterate sits at the
/// floating-point floor of the objective — the gradient is pure roundoff
/// noise there and may never reach `grad_tol` — so the solve is declared
/// converged instead of spinning until the iteration cap.
const STAGNATION_RTOL: f64 = 1e-12;

/// How the iterative localizer seeds its position estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Use the previous time instance's estimate when one exists
    /// (tracking); fall back to the anchor centroid otherwise.
    PreviousEstimate,
    /// Always start from the anchor centroid.
    AnchorCentroid,
}

/// Tuning for the robust localizer.
#[derive(Debug, Clone)]
pub struct LocalizationConfig {
    /// Fraction of anchors kept per selection round; `ceil(alpha * M)`
    /// anchors survive. Must exceed 1/2 so selections keep a majority.
    pub alpha: f64,
    /// Maximum selection rounds.
    pub k_max: usize,
    /// Maximum quasi-Newton iterations per position solve.
    pub k_ne: usize,
    /// Gradient norm below which a position solve is converged.
    pub grad_tol: f64,
    pub init_strategy: InitStrategy,
    /// Height (z) for the centroid fallback in 3-D scenes, where starting
    /// on the anchor plane would sit on a reflection-symmetry ridge.
    pub init_height: Option<f64>,
    /// When set in a 3-D scene, the agent height is treated as known: the
    /// solver pins z to this value and optimizes x/y against the 3-D
    /// ranges. With all anchors mounted in one horizontal plane, a free z
    /// is ambiguous up to reflection through that plane and only weakly
    /// determined by noise-level data; deployments that know the tag
    /// height should say so. Ignored in 2-D.
    pub fixed_height: Option<f64>,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            alpha: 0.88,
            k_max: 20,
            k_ne: 50,
            grad_tol: 1e-9,
            init_strategy: InitStrategy::PreviousEstimate,
            init_height: None,
            fixed_height: None,
        }
    }
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.5 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha must lie in (0.5, 1]"));
        }
        if self.k_max == 0 || self.k_ne == 0 {
            return Err(Error::invalid("iteration limits must be positive"));
        }
        if !(self.grad_tol >= 0.0 && self.grad_tol.is_finite()) {
            return Err(Error::invalid("grad_tol must be nonnegative"));
        }
        Ok(())
    }
}

/// Output of one robust localization.
#[derive(Debug, Clone)]
pub struct LocalizationResult {
    /// Final position estimate, meters.
    pub position: Vector,
    /// Final sorted anchor selection (estimated LoS set).
    pub selected_set: Vec<usize>,
    /// Selection rounds executed.
    pub outer_iters: usize,
    /// True when the selection reached a fixpoint before `k_max`.
    pub converged_by_set: bool,
    /// Cost of the returned position on the returned selection.
    pub final_objective: f64,
    /// Convergence status of the last position solve.
    pub solver_converged: bool,
}

/// Output of a single subset-fixed position solve.
#[derive(Debug, Clone)]
pub struct PositionSolve {
    pub position: Vector,
    /// True when the gradient tolerance was met or the objective stopped
    /// decreasing at floating-point resolution (as opposed to running out
    /// of iterations or the line search stalling).
    pub converged: bool,
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost;
    /// non-increasing by construction of the line search.
    pub f_trace: Vec<f64>,
}

/// Number of anchors kept per selection round.
pub fn keep_count(m: usize, alpha: f64) -> usize {
    (alpha * m as f64).ceil() as usize
}

fn check_measurement_inputs(
    r: &Vector,
    delta_hat: &Vector,
    geom: &NetworkGeometry,
) -> Result<()> {
    let m = geom.num_anchors();
    if r.len() != m || delta_hat.len() != m {
        return Err(Error::invalid("measurement/offset length must equal anchor count"));
    }
    ensure_finite_vec("measurements", r)?;
    ensure_finite_vec("offset estimate", delta_hat)?;
    Ok(())
}

/// Centered prediction errors on the subset `s` at position `p`:
/// `u - mean(u)` with `u_i = r[s_i] - d_{s_i}(p) - delta_hat[s_i]`.
fn centered_errors(
    p: &Vector,
    s: &[usize],
    r: &Vector,
    delta_hat: &Vector,
    geom: &NetworkGeometry,
) -> Result<Vec<f64>> {
    let d = distance_vector(p, geom)?;
    let mut u: Vec<f64> = s.iter().map(|&i| r[i] - d[i] - delta_hat[i]).collect();
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    for x in u.iter_mut() {
        *x -= mean;
    }
    Ok(u)
}

/// Position cost `f(p)` on subset `s`. Total: defined for every finite `p`.
pub fn objective(
    p: &Vector,
    s: &[usize],
    r: &Vector,
    delta_hat: &Vector,
    geom: &NetworkGeometry,
) -> Result<f64> {
    check_measurement_inputs(r, delta_hat, geom)?;
    validate_subset(s, geom.num_anchors())?;
    let c = centered_errors(p, s, r, delta_hat, geom)?;
    Ok(c.iter().map(|x| x * x).sum())
}

/// Position cost and its analytic gradient.
///
/// Fails with [`Error::Singular`] when `p` lies within `1e-9` m of an anchor
/// in `s`, where the distance direction is undefined.
pub fn objective_and_gradient(
    p: &Vector,
    s: &[usize],
    r: &Vector,
    delta_hat: &Vector,
    geom: &NetworkGeometry,
) -> Result<(f64, Vector)> {
    check_measurement_inputs(r, delta_hat, geom)?;
    validate_subset(s, geom.num_anchors())?;
    let c = centered_errors(p, s, r, delta_hat, geom)?;
    let f = c.iter().map(|x| x * x).sum();
    // grad = -2 sum_i c_i * J_{s_i},  J_m = (p - q_m) / (c |q_m - p|);
    // the centering projector is idempotent, so scattering the centered
    // errors back through F^T already accounts for A^T A
    let mut grad = Vector::zeros(geom.dim);
    for (idx, &anchor) in s.iter().enumerate() {
        let diff = p - &geom.anchors[anchor];
        let dist = diff.norm();
        if dist < ANCHOR_EXCLUSION_M {
            return Err(Error::Singular(format!(
                "position within {ANCHOR_EXCLUSION_M} m of anchor {anchor}"
            )));
        }
        grad += diff * (-2.0 * c[idx] / (geom.c * dist));
    }
    Ok((f, grad))
}

/// Minimizes the subset cost by BFGS with Armijo backtracking.
///
/// Returns the best iterate found; `converged` reports whether the gradient
/// tolerance was met. A stalled line search returns the best iterate with
/// `converged = false` rather than failing. The subset must leave the
/// problem overdetermined (`|s| >= dim + 2`: dim unknowns, one centered
/// direction lost, one for redundancy).
///
/// Iterates are confined to a ball of four constellation radii around the
/// anchor centroid, with single steps capped at one diameter; warm starts
/// outside the ball are pulled to its boundary. Positions of interest live
/// inside the deployment region by the problem's nature, and the centered
/// cost flattens far away from it — the gradient decays toward zero along
/// every distant ray — so an unconstrained search can report convergence on
/// that plateau. Heavily biased measurements push the unconstrained
/// minimizer there in practice.
pub fn solve_position(
    r: &Vector,
    s: &[usize],
    delta_hat: &Vector,
    p_init: &Vector,
    geom: &NetworkGeometry,
    cfg: &LocalizationConfig,
) -> Result<PositionSolve> {
    cfg.validate()?;
    check_measurement_inputs(r, delta_hat, geom)?;
    validate_subset(s, geom.num_anchors())?;
    let fixed_z = if geom.dim == 3 { cfg.fixed_height } else { None };
    let opt_dim = if fixed_z.is_some() { 2 } else { geom.dim };
    if s.len() < opt_dim + 2 {
        return Err(Error::invalid(format!(
            "subset of {} anchors cannot determine a position with {} free coordinates",
            s.len(),
            opt_dim
        )));
    }
    if p_init.len() != geom.dim {
        return Err(Error::invalid("initial position dimension mismatch"));
    }
    ensure_finite_vec("initial position", p_init)?;

    let dim = geom.dim;
    let centroid = geom.anchor_centroid();
    let radius = constellation_radius(geom);
    let max_step = 2.0 * radius;
    let r_max = 4.0 * radius;

    let eye = nalgebra::DMatrix::<f64>::identity(dim, dim);
    let mut h = eye.clone();
    // until the first curvature pair is absorbed, H carries no scale
    // information and the raw gradient step can overshoot a narrow basin
    // by orders of magnitude; cap those blind steps to a modest fraction
    // of the constellation size
    let mut have_curvature = false;
    let blind_step = 0.25 * radius;
    let mut p = p_init.clone();
    let off = &p - &centroid;
    let off_norm = off.norm();
    if off_norm > r_max {
        p = &centroid + off * (r_max / off_norm);
    }
    if let Some(z) = fixed_z {
        p[2] = z;
    }
    // with z pinned, zeroing its gradient component keeps every BFGS
    // quantity (direction, curvature pairs) inside the x/y subspace
    let mask = |g: &mut Vector| {
        if fixed_z.is_some() {
            g[2] = 0.0;
        }
    };
    let (mut f, mut g) = objective_and_gradient(&p, s, r, delta_hat, geom)?;
    mask(&mut g);
    let mut trace = vec![f];
    let mut best = (f, p.clone());
    let mut converged = g.norm() <= cfg.grad_tol;
    let mut iters = 0;
    let mut stagnant = 0u32;

    while !converged && iters < cfg.k_ne {
        iters += 1;
        let mut dir = -(&h * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            // curvature information went stale; fall back to steepest descent
            h = eye.clone();
            have_curvature = false;
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let cap = if have_curvature { max_step } else { blind_step.min(max_step) };
        let dir_norm = dir.norm();
        if dir_norm > cap {
            dir *= cap / dir_norm;
            slope = dir.dot(&g);
        }
        // backtracking line search on the total objective, restricted to
        // the confinement ball
        let mut step = 1.0;
        let cand = loop {
            let trial = &p + &dir * step;
            let f_trial = objective(&trial, s, r, delta_hat, geom)?;
            if f_trial <= f + ARMIJO_C1 * step * slope
                && (&trial - &centroid).norm() <= r_max
            {
                break Some((trial, f_trial));
            }
            step *= BACKTRACK;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some((p_new, f_new)) = cand else {
            // stalled: report the best point seen, flagged non-converged
            return Ok(PositionSolve {
                position: best.1,
                converged: false,
                iterations: iters,
                f_trace: trace,
            });
        };
        let (_, mut g_new) = objective_and_gradient(&p_new, s, r, delta_hat, geom)?;
        mask(&mut g_new);
        let s_vec = &p_new - &p;
        let y_vec = &g_new - &g;
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-12 * s_vec.norm() * y_vec.norm() {
            if !have_curvature {
                // seed the inverse Hessian with the first curvature pair's
                // scale so subsequent quasi-Newton steps are well-sized
                let yy = y_vec.dot(&y_vec);
                if yy > 0.0 {
                    h = &eye * (sy / yy);
                }
                have_curvature = true;
            }
            // standard BFGS update of the inverse Hessian approximation
            let rho = 1.0 / sy;
            let hy = &h * &y_vec;
            let yhy = y_vec.dot(&hy);
            h += (&s_vec * s_vec.transpose()) * (rho * (1.0 + rho * yhy))
                - (&hy * s_vec.transpose() + &s_vec * hy.transpose()) * rho;
        }
        if f - f_new <= STAGNATION_RTOL * f_new.abs() {
            stagnant += 1;
        } else {
            stagnant = 0;
        }
        p = p_new;
        f = f_new;
        g = g_new;
        trace.push(f);
        if f < best.0 {
            best = (f, p.clone());
        }
        converged = g.norm() <= cfg.grad_tol || stagnant >= 2;
    }
    Ok(PositionSolve { position: best.1, converged, iterations: iters, f_trace: trace })
}

/// Full-network centered residuals at a position estimate:
/// `e = B(M) (r - d(p) - delta_hat)`. Sums to zero by construction.
pub fn residual_vector(
    r: &Vector,
    p_hat: &Vector,
    delta_hat: &Vector,
    geom: &NetworkGeometry,
) -> Result<Vector> {
    check_measurement_inputs(r, delta_hat, geom)?;
    let m = geom.num_anchors();
    let full: Vec<usize> = (0..m).collect();
    let c = centered_errors(p_hat, &full, r, delta_hat, geom)?;
    Ok(Vector::from_vec(c))
}

/// Cost at the position a solve returned; the trace is non-increasing, so
/// its last entry belongs to the best iterate.
fn final_cost(sol: &PositionSolve) -> f64 {
    *sol.f_trace.last().expect("trace holds at least the initial cost")
}

/// Keeps the `ceil(alpha M)` indices with the smallest residual magnitudes,
/// ties broken toward the smaller index; returned sorted ascending.
pub fn select_los_set(e: &Vector, alpha: f64) -> Result<Vec<usize>> {
    if !(alpha > 0.5 && alpha <= 1.0) {
        return Err(Error::invalid("alpha must lie in (0.5, 1]"));
    }
    ensure_finite_vec("residuals", e)?;
    let m = e.len();
    if m == 0 {
        return Err(Error::invalid("empty residual vector"));
    }
    let keep = keep_count(m, alpha).min(m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| {
        e[i].abs()
            .partial_cmp(&e[j].abs())
            .expect("residuals are finite")
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Selection policy for the outer loop; the residual rule is the estimator,
/// the forced rule serves reference baselines that pin the subset.
#[derive(Debug, Clone, Copy)]
pub(crate) enum SelectionRule<'a> {
    SmallestResiduals,
    Forced(&'a [usize]),
}

pub(crate) fn localize_with_rule(
    r: &Vector,
    delta_hat: &Vector,
    geom: &NetworkGeometry,
    cfg: &LocalizationConfig,
    p_init: &Vector,
    rule: SelectionRule<'_>,
) -> Result<LocalizationResult> {
    cfg.validate()?;
    check_measurement_inputs(r, delta_hat, geom)?;
    let m = geom.num_anchors();
    let opt_dim = if geom.dim == 3 && cfg.fixed_height.is_some() { 2 } else { geom.dim };
    if keep_count(m, cfg.alpha) < opt_dim + 2 {
        return Err(Error::invalid(format!(
            "keeping ceil(alpha*M) = {} of {m} anchors cannot determine a position with {} free coordinates",
            keep_count(m, cfg.alpha),
            opt_dim
        )));
    }
    if let SelectionRule::Forced(f) = rule {
        validate_subset(f, m)?;
        if f.len() < opt_dim + 2 {
            return Err(Error::invalid("forced selection too small for the dimension"));
        }
    }

    let mut s_prev: Vec<usize> = (0..m).collect();
    let mut p = p_init.clone();
    let mut outer = 0;
    let mut by_set = false;
    let mut solver_ok = false;
    while outer < cfg.k_max {
        outer += 1;
        let mut sol = solve_position(r, &s_prev, delta_hat, &p, geom, cfg)?;
        // a warm start can sit in the wrong attraction basin — after a
        // selection change, or because the centered objective flattens far
        // from the anchors and grows spurious minima there — so also solve
        // from the cold start and keep whichever lands lower
        let fallback = centroid_init(geom, cfg);
        if fallback != p {
            let retry = solve_position(r, &s_prev, delta_hat, &fallback, geom, cfg)?;
            if final_cost(&retry) < final_cost(&sol) {
                sol = retry;
            }
        }
        p = sol.position;
        solver_ok = sol.converged;
        let e = residual_vector(r, &p, delta_hat, geom)?;
        let s_new = match rule {
            SelectionRule::SmallestResiduals => select_los_set(&e, cfg.alpha)?,
            SelectionRule::Forced(f) => f.to_vec(),
        };
        if s_new == s_prev {
            by_set = true;
            break;
        }
        s_prev = s_new;
    }
    let final_objective = objective(&p, &s_prev, r, delta_hat, geom)?;
    Ok(LocalizationResult {
        position: p,
        selected_set: s_prev,
        outer_iters: outer,
        converged_by_set: by_set,
        final_objective,
        solver_converged: solver_ok,
    })
}

/// Iterative robust localization: alternate position solves with
/// smallest-residual re-selection until the selection stops changing or
/// `k_max` rounds have run.
pub fn rlsr_localize(
    r: &Vector,
    delta_hat: &Vector,
    geom: &NetworkGeometry,
    cfg: &LocalizationConfig,
    p_init: &Vector,
) -> Result<LocalizationResult> {
    localize_with_rule(r, delta_hat, geom, cfg, p_init, SelectionRule::SmallestResiduals)
}

/// Largest anchor distance from the centroid, floored at 1 m so derived
/// scales stay positive for degenerate constellations.
pub(crate) fn constellation_radius(geom: &NetworkGeometry) -> f64 {
    let centroid = geom.anchor_centroid();
    geom.anchors
        .iter()
        .map(|q| (q - &centroid).norm())
        .fold(0.0_f64, f64::max)
        .max(1.0)
}

/// Moves a starting point off any anchor it (nearly) coincides with, since
/// the distance gradient is undefined there. Grid constellations with an
/// odd side put an anchor exactly at the centroid, so the centroid seed
/// hits this systematically. The nudge direction has irrational component
/// ratios to avoid re-landing on structured layouts; the magnitude doubles
/// until clear.
pub(crate) fn off_anchor(mut p: Vector, geom: &NetworkGeometry) -> Vector {
    const CLEARANCE_M: f64 = 1e-6;
    let near = |p: &Vector| {
        geom.anchors
            .iter()
            .any(|q| (p - q).norm() < CLEARANCE_M)
    };
    if !near(&p) {
        return p;
    }
    let mut dir = Vector::from_fn(geom.dim, |k, _| ((k + 1) as f64).sin());
    dir /= dir.norm();
    let mut mag = 0.01 * constellation_radius(geom);
    for _ in 0..40 {
        let cand = &p + &dir * mag;
        if !near(&cand) {
            p = cand;
            break;
        }
        mag *= 2.0;
    }
    p
}

/// Centroid-based starting point honoring the configured fallback height,
/// nudged off any coincident anchor.
pub(crate) fn centroid_init(geom: &NetworkGeometry, cfg: &LocalizationConfig) -> Vector {
    let mut p = geom.anchor_centroid();
    if geom.dim == 3 {
        if let Some(h) = cfg.init_height {
            p[2] = h;
        }
    }
    off_anchor(p, geom)
}
