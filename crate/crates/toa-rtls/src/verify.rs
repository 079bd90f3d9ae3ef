//! Self-verification batteries.
//!
//! Each battery cross-checks one load-bearing property of the estimator
//! against an independent oracle on seeded random inputs:
//!
//! 1. `recursive_vs_direct` — the blockwise recursive offset estimate
//!    equals a from-scratch weighted least-squares solve over the full
//!    block history.
//! 2. `reduced_consistency` — whenever the reduced-update condition
//!    holds, the rank-update term `A·Q` vanishes and the reduced and full
//!    recursions produce the same state.
//! 3. `projector_algebra` — the pseudoinverse satisfies its four defining
//!    conditions (and involution) on random matrices of every rank.
//! 4. `gradient_check` — the analytic localization gradient matches
//!    central finite differences.
//! 5. `subset_recovery` — the robust selection loop returns the
//!    exhaustive-search optimal anchor subset on small noiseless
//!    single-outlier instances with a well-separated optimum.
//!
//! The batteries are shared by the `verify` CLI subcommand and the
//! acceptance test suite; both report per-battery case counts, failure
//! counts, worst observed errors, and the seeds of failing cases.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::EngineState;
use crate::linalg::{mp_pinv, Matrix, Vector};
use crate::localize::{
    centroid_init, objective, objective_and_gradient, rlsr_localize, solve_position,
    LocalizationConfig,
};
use crate::model::{NetworkGeometry, ToaFrame, SPEED_OF_LIGHT_M_PER_NS};
use crate::sync::{
    assemble_block, brmp_update_full, brmp_update_reduced, direct_lls_solve, init_sync,
    reduced_update_condition, support_union, MeasurementBlock,
};

/// Outcome of one battery run.
#[derive(Debug, Clone)]
pub struct BatteryReport {
    pub name: &'static str,
    /// Checked cases (for `reduced_consistency`: steps where the reduced
    /// condition held; for `subset_recovery`: qualifying instances).
    pub cases: usize,
    pub failures: usize,
    /// Worst observed error, in the battery's own metric (norm error,
    /// elementwise error, relative error, or mismatch fraction).
    pub max_err: f64,
    pub pass: bool,
    /// Seeds of the failing cases, for replay.
    pub failing_seeds: Vec<u64>,
}

impl BatteryReport {
    /// One-line human-readable summary.
    pub fn summary_line(&self) -> String {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        let mut line = format!(
            "{:22} {}  cases={:4}  failures={:3}  max_err={:.3e}",
            self.name, verdict, self.cases, self.failures, self.max_err
        );
        if !self.failing_seeds.is_empty() {
            line.push_str(&format!("  failing_seeds={:?}", self.failing_seeds));
        }
        line
    }
}

/// Runs every battery in order; all must pass for the artifact to be
/// considered healthy.
pub fn run_all_batteries() -> Vec<BatteryReport> {
    vec![
        battery_recursive_vs_direct(),
        battery_reduced_consistency(),
        battery_projector_algebra(),
        battery_gradient_check(),
        battery_subset_recovery(),
    ]
}

// ---------------------------------------------------------------------------
// shared random-case generation for the recursion batteries

pub(crate) struct SyncCase {
    pub geom: NetworkGeometry,
    pub lambda: f64,
    /// Per step: frame, per-agent selections, per-agent positions.
    pub steps: Vec<(ToaFrame, Vec<Vec<usize>>, Vec<Vector>)>,
}

/// Random recursion workload: a small anchor set, a few agents, and a
/// stream of frames whose per-agent selections each keep strictly more
/// than half the anchors. Once enough anchors have been touched, later
/// selections are drawn from inside the touched set with probability 0.6
/// so both the reduced and the full update branch get exercised.
pub(crate) fn random_sync_case(seed: u64) -> SyncCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(4..=10usize);
    let n = rng.gen_range(1..=3usize);
    let t_steps = rng.gen_range(3..=20usize);
    let lambda = *[1.0, 0.9, 0.8].choose(&mut rng).unwrap();
    let anchors: Vec<Vector> = (0..m)
        .map(|_| {
            Vector::from_vec(vec![
                rng.gen_range(0.0..30.0),
                rng.gen_range(0.0..30.0),
                rng.gen_range(2.0..6.0),
            ])
        })
        .collect();
    let geom = NetworkGeometry::new(3, anchors, SPEED_OF_LIGHT_M_PER_NS)
        .expect("random geometry is valid");

    // mirror of the pipeline's covered-set bookkeeping (union only when
    // the reduced condition fails)
    let mut covered = vec![false; m];
    let mut steps = Vec::with_capacity(t_steps);
    for t in 1..=t_steps {
        let mut selections = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut measurements = Vec::with_capacity(n);
        for _ in 0..n {
            let covered_list: Vec<usize> = (0..m).filter(|&i| covered[i]).collect();
            let pool = if covered_list.len() > m / 2 && rng.gen_bool(0.6) {
                covered_list
            } else {
                (0..m).collect()
            };
            let k = rng.gen_range(m / 2 + 1..=pool.len());
            let mut shuffled = pool;
            shuffled.shuffle(&mut rng);
            let mut s = shuffled[..k].to_vec();
            s.sort_unstable();
            selections.push(s);
            positions.push(Vector::from_vec(vec![
                rng.gen_range(0.0..30.0),
                rng.gen_range(0.0..30.0),
                rng.gen_range(0.5..3.0),
            ]));
            measurements.push(Vector::from_fn(m, |_, _| rng.gen_range(0.0..200.0)));
        }
        let holds = selections
            .iter()
            .all(|s| 2 * s.len() > m && s.iter().all(|&i| covered[i]));
        if !holds {
            for s in &selections {
                for &i in s {
                    covered[i] = true;
                }
            }
        }
        steps.push((ToaFrame { t, measurements, truth: None }, selections, positions));
    }
    SyncCase { geom, lambda, steps }
}

const SYNC_CASES: usize = 220;
const SYNC_SEED_BASE: u64 = 0x5EED_0001;

/// Recursive estimate vs a from-scratch weighted least-squares solve over
/// the whole block history; the two must agree to 1e-7 relative.
pub fn battery_recursive_vs_direct() -> BatteryReport {
    let mut failures = 0;
    let mut max_err = 0.0_f64;
    let mut failing_seeds = Vec::new();
    for i in 0..SYNC_CASES {
        let seed = SYNC_SEED_BASE + i as u64;
        match recursive_vs_direct_error(seed) {
            Ok((err, tol)) => {
                max_err = max_err.max(err);
                if err > tol {
                    failures += 1;
                    failing_seeds.push(seed);
                }
            }
            Err(_) => {
                failures += 1;
                failing_seeds.push(seed);
            }
        }
    }
    BatteryReport {
        name: "recursive_vs_direct",
        cases: SYNC_CASES,
        failures,
        max_err,
        pass: failures == 0,
        failing_seeds,
    }
}

/// Runs one random workload both ways; returns (error norm, tolerance).
pub(crate) fn recursive_vs_direct_error(seed: u64) -> crate::error::Result<(f64, f64)> {
    let case = random_sync_case(seed);
    let mut engine = EngineState::new(
        case.geom.clone(),
        LocalizationConfig::default(),
        case.lambda,
        0.0,
    )?;
    let mut blocks: Vec<MeasurementBlock> = Vec::with_capacity(case.steps.len());
    for (frame, selections, positions) in &case.steps {
        let block = assemble_block(frame, selections, positions, &case.geom)?;
        engine.apply_block(&block, frame.t)?;
        blocks.push(block);
    }
    let direct = direct_lls_solve(&blocks, case.lambda, 0.0)?;
    let err = (&engine.sync_state().delta_hat - &direct).norm();
    let tol = 1e-7 * (1.0 + direct.norm());
    Ok((err, tol))
}

/// Wherever the reduced-update condition holds: the rank-update term
/// `A·Q` must vanish and the reduced and full updates must agree
/// elementwise (1e-9).
pub fn battery_reduced_consistency() -> BatteryReport {
    let mut cases = 0;
    let mut failures = 0;
    let mut max_err = 0.0_f64;
    let mut failing_seeds = Vec::new();
    for i in 0..SYNC_CASES {
        let seed = SYNC_SEED_BASE + i as u64;
        let case = random_sync_case(seed);
        let m = case.geom.num_anchors();
        let mut state = match init_sync(m, case.lambda) {
            Ok(s) => s,
            Err(_) => continue,
        };
        for (frame, selections, positions) in &case.steps {
            let block = match assemble_block(frame, selections, positions, &case.geom) {
                Ok(b) => b,
                Err(_) => break,
            };
            if reduced_update_condition(&block.row_sets, &state) {
                cases += 1;
                let step_err = (|| -> crate::error::Result<f64> {
                    let c_max = (&block.a_block * &state.q_mat).amax();
                    let full = brmp_update_full(&state, &block, 0.0)?;
                    let reduced = brmp_update_reduced(&state, &block)?;
                    let d_err = (&full.delta_hat - &reduced.delta_hat).amax();
                    let r_err = (&full.r_mat - &reduced.r_mat).amax();
                    let q_err = (&full.q_mat - &reduced.q_mat).amax();
                    Ok(c_max.max(d_err).max(r_err).max(q_err))
                })();
                match step_err {
                    Ok(err) => {
                        max_err = max_err.max(err);
                        if err > 1e-9 {
                            failures += 1;
                            failing_seeds.push(seed);
                        }
                    }
                    Err(_) => {
                        failures += 1;
                        failing_seeds.push(seed);
                    }
                }
                state = match brmp_update_reduced(&state, &block) {
                    Ok(s) => s,
                    Err(_) => break,
                };
            } else {
                state = match brmp_update_full(&state, &block, 0.0) {
                    Ok(s) => s,
                    Err(_) => break,
                };
                state.covered_set = support_union(&state.covered_set, &block.row_sets, m);
            }
            state.t = frame.t;
        }
    }
    failing_seeds.dedup();
    BatteryReport {
        name: "reduced_consistency",
        cases,
        failures,
        max_err,
        pass: failures == 0 && cases > 0,
        failing_seeds,
    }
}

/// The four defining conditions of the pseudoinverse, plus involution, on
/// random matrices of every rank (1e-8 relative).
pub fn battery_projector_algebra() -> BatteryReport {
    let cases = 200;
    let mut failures = 0;
    let mut max_err = 0.0_f64;
    let mut failing_seeds = Vec::new();
    for i in 0..cases {
        let seed = 0x5EED_3000 + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.gen_range(1..=10usize);
        let cols = rng.gen_range(1..=10usize);
        let rank = rng.gen_range(0..=rows.min(cols));
        let a = if rank == 0 {
            Matrix::zeros(rows, cols)
        } else {
            let u = Matrix::from_fn(rows, rank, |_, _| rng.gen_range(-1.0..1.0));
            let v = Matrix::from_fn(rank, cols, |_, _| rng.gen_range(-1.0..1.0));
            u * v
        };
        let err = (|| -> crate::error::Result<f64> {
            let x = mp_pinv(&a, 0.0)?;
            let a_scale = 1.0_f64.max(a.amax());
            let x_scale = 1.0_f64.max(x.amax());
            let e1 = (&a * &x * &a - &a).amax() / a_scale;
            let e2 = (&x * &a * &x - &x).amax() / x_scale;
            let ax = &a * &x;
            let e3 = (&ax - ax.transpose()).amax() / 1.0_f64.max(ax.amax());
            let xa = &x * &a;
            let e4 = (&xa - xa.transpose()).amax() / 1.0_f64.max(xa.amax());
            let e5 = (mp_pinv(&x, 0.0)? - &a).amax() / a_scale;
            Ok(e1.max(e2).max(e3).max(e4).max(e5))
        })();
        match err {
            Ok(e) => {
                max_err = max_err.max(e);
                if e > 1e-8 {
                    failures += 1;
                    failing_seeds.push(seed);
                }
            }
            Err(_) => {
                failures += 1;
                failing_seeds.push(seed);
            }
        }
    }
    BatteryReport {
        name: "projector_algebra",
        cases,
        failures,
        max_err,
        pass: failures == 0,
        failing_seeds,
    }
}

/// Analytic localization gradient vs central finite differences
/// (h = 1e-6, 1e-5 relative) on 100 random configurations.
pub fn battery_gradient_check() -> BatteryReport {
    let cases = 100;
    let mut failures = 0;
    let mut max_err = 0.0_f64;
    let mut failing_seeds = Vec::new();
    for i in 0..cases {
        let seed = 0x5EED_4000 + i as u64;
        match gradient_fd_error(seed) {
            Ok(rel) => {
                max_err = max_err.max(rel);
                if rel > 1e-5 {
                    failures += 1;
                    failing_seeds.push(seed);
                }
            }
            Err(_) => {
                failures += 1;
                failing_seeds.push(seed);
            }
        }
    }
    BatteryReport {
        name: "gradient_check",
        cases,
        failures,
        max_err,
        pass: failures == 0,
        failing_seeds,
    }
}

/// One random configuration's relative gradient error vs central
/// differences.
pub(crate) fn gradient_fd_error(seed: u64) -> crate::error::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = *[2usize, 3].choose(&mut rng).unwrap();
    let m = rng.gen_range(5..=10usize);
    let anchors: Vec<Vector> = (0..m)
        .map(|_| Vector::from_fn(dim, |_, _| rng.gen_range(0.0..25.0)))
        .collect();
    let geom = NetworkGeometry::new(dim, anchors, SPEED_OF_LIGHT_M_PER_NS)?;
    let k = rng.gen_range((dim + 2).min(m)..=m);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut rng);
    let mut s = idx[..k].to_vec();
    s.sort_unstable();
    let r = Vector::from_fn(m, |_, _| rng.gen_range(0.0..300.0));
    let delta_hat = Vector::from_fn(m, |_, _| rng.gen_range(-10.0..10.0));
    // keep the evaluation point away from anchors so the finite-difference
    // stencil stays in the smooth region
    let p = loop {
        let cand = Vector::from_fn(dim, |_, _| rng.gen_range(-5.0..30.0));
        let clear = geom.anchors.iter().all(|q| (q - &cand).norm() > 0.5);
        if clear {
            break cand;
        }
    };
    let (_, g) = objective_and_gradient(&p, &s, &r, &delta_hat, &geom)?;
    let h = 1e-6;
    let mut g_fd = Vector::zeros(dim);
    for j in 0..dim {
        let mut hi = p.clone();
        hi[j] += h;
        let mut lo = p.clone();
        lo[j] -= h;
        let f_hi = objective(&hi, &s, &r, &delta_hat, &geom)?;
        let f_lo = objective(&lo, &s, &r, &delta_hat, &geom)?;
        g_fd[j] = (f_hi - f_lo) / (2.0 * h);
    }
    Ok((&g - &g_fd).norm() / 1.0_f64.max(g_fd.norm()))
}

/// On small noiseless single-outlier instances whose exhaustive-search
/// optimum is unique and separated by at least 10x in objective, the
/// robust selection loop must return that optimal subset in at least 95%
/// of cases.
pub fn battery_subset_recovery() -> BatteryReport {
    let target = 100;
    let mut cases = 0;
    let mut failures = 0;
    let mut failing_seeds = Vec::new();
    let mut attempt: u64 = 0;
    while cases < target && attempt < 1000 {
        let seed = 0x5EED_5000 + attempt;
        attempt += 1;
        match subset_recovery_case(seed) {
            Some(matched) => {
                cases += 1;
                if !matched {
                    failures += 1;
                    failing_seeds.push(seed);
                }
            }
            None => continue,
        }
    }
    let mismatch_frac = failures as f64 / cases.max(1) as f64;
    BatteryReport {
        name: "subset_recovery",
        cases,
        failures,
        max_err: mismatch_frac,
        // the loop is a heuristic; the contract is >= 95% agreement with
        // the exhaustive oracle on qualifying instances
        pass: cases == target && 20 * (cases - failures) >= 19 * cases,
        failing_seeds,
    }
}

/// Builds one instance; `None` when it does not qualify (oracle solver
/// failure, or optimum not uniquely and decisively separated).
///
/// Instances model the loop's intended operating envelope rather than
/// arbitrary point clouds: anchors surveyed on a jittered ring around
/// the service area, the agent inside the constellation core. The
/// trimming loop's minimization target only penalizes range
/// *differences*, so its cost saturates far from the constellation;
/// with a strongly off-center agent plus a large bias, the far-field
/// plateau can undercut every interior fit and the full-set solve
/// escapes outward, locking selection onto a wrong subset. That is a
/// real statistical limitation of the published loop — the desk-scale
/// experiment measures it — while this battery isolates implementation
/// correctness on instances where the loop's contract holds.
fn subset_recovery_case(seed: u64) -> Option<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(5..=8usize);
    let ring_radius = rng.gen_range(8.0..12.0);
    let anchors: Vec<Vector> = (0..m)
        .map(|i| {
            let angle = (i as f64 / m as f64) * std::f64::consts::TAU
                + rng.gen_range(-0.15..0.15);
            let rad = ring_radius * rng.gen_range(0.85..1.15);
            Vector::from_vec(vec![10.0 + rad * angle.cos(), 10.0 + rad * angle.sin()])
        })
        .collect();
    let geom = NetworkGeometry::new(2, anchors, SPEED_OF_LIGHT_M_PER_NS).ok()?;
    let p_true = loop {
        let cand = Vector::from_fn(2, |_, _| rng.gen_range(3.0..17.0));
        if (&cand - Vector::from_vec(vec![10.0, 10.0])).norm() <= 0.45 * ring_radius
            && geom.anchors.iter().all(|q| (q - &cand).norm() > 1.0)
        {
            break cand;
        }
    };
    let outlier = rng.gen_range(0..m);
    let bias = rng.gen_range(15.0..40.0);
    let tau = rng.gen_range(0.0..100.0);
    let r = Vector::from_fn(m, |i, _| {
        let d = (&geom.anchors[i] - &p_true).norm() / geom.c;
        d + tau + if i == outlier { bias } else { 0.0 }
    });
    let delta_hat = Vector::zeros(m);
    // keep exactly m-1 anchors so one index is trimmed per round
    let alpha = (m as f64 - 1.0) / m as f64;
    let cfg = LocalizationConfig { alpha, ..LocalizationConfig::default() };
    let start = centroid_init(&geom, &cfg);

    // exhaustive oracle over all leave-one-out subsets, each solved from
    // both the centroid and the true position, keeping the better
    let mut scored: Vec<(f64, Vec<usize>)> = Vec::with_capacity(m);
    for drop in 0..m {
        let s: Vec<usize> = (0..m).filter(|&i| i != drop).collect();
        let mut best = f64::INFINITY;
        for init in [&start, &p_true] {
            let sol = solve_position(&r, &s, &delta_hat, init, &geom, &cfg).ok()?;
            let f = objective(&sol.position, &s, &r, &delta_hat, &geom).ok()?;
            best = best.min(f);
        }
        scored.push((best, s));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let (f_best, s_best) = &scored[0];
    let f_second = scored[1].0;
    // "well separated": a 10x objective ratio, plus an absolute floor —
    // with a noiseless best fit (f ~ 1e-28) the ratio alone is vacuous
    if !(f_best * 10.0 <= f_second && f_second >= 1.0) {
        return None;
    }
    let result = rlsr_localize(&r, &delta_hat, &geom, &cfg, &start).ok()?;
    Some(&result.selected_set == s_best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recursion_batteries_pass_and_exercise_both_branches() {
        let rep = battery_recursive_vs_direct();
        assert!(rep.pass, "{}", rep.summary_line());
        assert_eq!(rep.cases, SYNC_CASES);
        let rep = battery_reduced_consistency();
        assert!(rep.pass, "{}", rep.summary_line());
        assert!(rep.cases >= 50, "reduced branch under-exercised: {}", rep.cases);
    }

    #[test]
    fn algebra_and_gradient_batteries_pass() {
        let rep = battery_projector_algebra();
        assert!(rep.pass, "{}", rep.summary_line());
        let rep = battery_gradient_check();
        assert!(rep.pass, "{}", rep.summary_line());
        assert_eq!(rep.cases, 100);
    }

    #[test]
    fn subset_recovery_battery_passes() {
        let rep = battery_subset_recovery();
        assert!(rep.pass, "{}", rep.summary_line());
        assert_eq!(rep.cases, 100);
    }

    // A deliberately mismatched discount factor between the recursive and
    // direct paths must trip the equivalence check: this proves the
    // battery can detect a faulty recursion, not just bless a healthy one.
    #[test]
    fn equivalence_battery_detects_injected_fault() {
        let case = (0..20)
            .map(|i| random_sync_case(SYNC_SEED_BASE + i))
            .find(|c| c.lambda < 1.0)
            .expect("some early seed draws a discounting factor");
        let mut engine = EngineState::new(
            case.geom.clone(),
            LocalizationConfig::default(),
            case.lambda,
            0.0,
        )
        .unwrap();
        let mut blocks = Vec::new();
        for (frame, selections, positions) in &case.steps {
            let block = assemble_block(frame, selections, positions, &case.geom).unwrap();
            engine.apply_block(&block, frame.t).unwrap();
            blocks.push(block);
        }
        let direct_wrong = direct_lls_solve(&blocks, 1.0, 0.0).unwrap();
        let err = (&engine.sync_state().delta_hat - &direct_wrong).norm();
        let tol = 1e-7 * (1.0 + direct_wrong.norm());
        assert!(err > tol, "fault not detected: err {err} <= tol {tol}");
    }

    #[test]
    fn report_line_mentions_failing_seeds_only_when_present() {
        let clean = BatteryReport {
            name: "demo",
            cases: 3,
            failures: 0,
            max_err: 1e-12,
            pass: true,
            failing_seeds: vec![],
        };
        assert!(clean.summary_line().contains("PASS"));
        assert!(!clean.summary_line().contains("failing_seeds"));
        let broken = BatteryReport { failures: 1, pass: false, failing_seeds: vec![7], ..clean };
        assert!(broken.summary_line().contains("FAIL"));
        assert!(broken.summary_line().contains("failing_seeds=[7]"));
    }
}
