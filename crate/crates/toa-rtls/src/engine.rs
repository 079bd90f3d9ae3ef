//! Per-frame orchestration: joint localization and clock tracking.
//!
//! Each measurement frame flows through three stages:
//!
//! 1. **Localize** every agent against the current clock-offset estimate,
//!    warm-started from its previous position when tracking is enabled.
//! 2. **Assemble** the centered measurement block from the estimated LoS
//!    selections and positions.
//! 3. **Update** the recursive least-squares clock state, choosing the
//!    cheap reduced form whenever every selection holds an anchor majority
//!    and introduces no anchor the filter has not seen; otherwise the full
//!    rank-aware form runs and the covered-anchor set grows.
//!
//! [`EngineState::step`] runs all three; the stages are also exposed
//! individually so callers can measure or replace one of them.

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::localize::{
    centroid_init, localize_with_rule, off_anchor, InitStrategy, LocalizationConfig,
    LocalizationResult, SelectionRule,
};
use crate::model::{NetworkGeometry, ToaFrame};
use crate::sync::{
    assemble_block, brmp_update_full, brmp_update_reduced, init_sync, support_union,
    reduced_update_condition, MeasurementBlock, SyncState,
};

/// What one engine step did, for diagnostics and branch accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSummary {
    /// Frame index the block came from.
    pub t: usize,
    /// True when the reduced (inversion-light) update ran.
    pub used_reduced: bool,
    /// Anchors the filter has covered after this step.
    pub covered_anchors: usize,
    /// Rows in the assembled measurement block.
    pub block_rows: usize,
}

/// Joint localization + clock-sync pipeline state.
#[derive(Debug, Clone)]
pub struct EngineState {
    geom: NetworkGeometry,
    loc_cfg: LocalizationConfig,
    rank_tol: f64,
    sync: SyncState,
    prev_positions: Vec<Option<Vector>>,
    growth_steps: usize,
}

impl EngineState {
    /// `lambda` is the forgetting factor of the clock tracker; `rank_tol`
    /// is the relative rank cutoff for its pseudoinverses (0.0 selects the
    /// default).
    pub fn new(
        geom: NetworkGeometry,
        loc_cfg: LocalizationConfig,
        lambda: f64,
        rank_tol: f64,
    ) -> Result<Self> {
        loc_cfg.validate()?;
        if !(rank_tol >= 0.0 && rank_tol.is_finite()) {
            return Err(Error::invalid("rank_tol must be nonnegative and finite"));
        }
        let sync = init_sync(geom.num_anchors(), lambda)?;
        Ok(EngineState {
            geom,
            loc_cfg,
            rank_tol,
            sync,
            prev_positions: Vec::new(),
            growth_steps: 0,
        })
    }

    pub fn geometry(&self) -> &NetworkGeometry {
        &self.geom
    }

    /// Current clock tracker state (offset estimate, covered set, ...).
    pub fn sync_state(&self) -> &SyncState {
        &self.sync
    }

    /// How many steps have strictly grown the covered-anchor set. The set
    /// only ever grows by union, so this can never exceed the anchor count.
    pub fn covered_growth_steps(&self) -> usize {
        self.growth_steps
    }

    fn init_for_agent(&self, n: usize) -> Vector {
        if self.loc_cfg.init_strategy == InitStrategy::PreviousEstimate {
            if let Some(Some(p)) = self.prev_positions.get(n) {
                return off_anchor(p.clone(), &self.geom);
            }
        }
        centroid_init(&self.geom, &self.loc_cfg)
    }

    /// Stage 1: localize every agent in the frame against the current
    /// clock-offset estimate. `forced` pins each agent's anchor selection
    /// (reference baselines); `None` uses residual-based re-selection.
    pub fn localize_frame(
        &mut self,
        frame: &ToaFrame,
        forced: Option<&[Vec<usize>]>,
    ) -> Result<Vec<LocalizationResult>> {
        let n_agents = frame.measurements.len();
        if n_agents == 0 {
            return Err(Error::invalid("frame holds no agents"));
        }
        if let Some(f) = forced {
            if f.len() != n_agents {
                return Err(Error::invalid("one forced selection required per agent"));
            }
        }
        if self.prev_positions.len() != n_agents {
            self.prev_positions.resize(n_agents, None);
        }
        let delta_hat = self.sync.delta_hat.clone();
        let mut out = Vec::with_capacity(n_agents);
        for (n, r) in frame.measurements.iter().enumerate() {
            let p_init = self.init_for_agent(n);
            let rule = match forced {
                Some(f) => SelectionRule::Forced(&f[n]),
                None => SelectionRule::SmallestResiduals,
            };
            let res = localize_with_rule(r, &delta_hat, &self.geom, &self.loc_cfg, &p_init, rule)?;
            self.prev_positions[n] = Some(res.position.clone());
            out.push(res);
        }
        Ok(out)
    }

    /// Stage 2: centered measurement block from localization outputs.
    pub fn build_block(
        &self,
        frame: &ToaFrame,
        results: &[LocalizationResult],
    ) -> Result<MeasurementBlock> {
        let selections: Vec<Vec<usize>> =
            results.iter().map(|r| r.selected_set.clone()).collect();
        let positions: Vec<Vector> = results.iter().map(|r| r.position.clone()).collect();
        assemble_block(frame, &selections, &positions, &self.geom)
    }

    /// Stage 3: recursive clock update, branch choice, covered-set upkeep.
    pub fn apply_block(&mut self, block: &MeasurementBlock, t: usize) -> Result<StepSummary> {
        let use_reduced = reduced_update_condition(&block.row_sets, &self.sync);
        self.sync = if use_reduced {
            brmp_update_reduced(&self.sync, block)?
        } else {
            brmp_update_full(&self.sync, block, self.rank_tol)?
        };
        if !use_reduced {
            let before = self.sync.covered_set.len();
            let union = support_union(&self.sync.covered_set, &block.row_sets, self.sync.m);
            if union.len() > before {
                self.growth_steps += 1;
            }
            self.sync.covered_set = union;
        }
        self.sync.t = t;
        Ok(StepSummary {
            t,
            used_reduced: use_reduced,
            covered_anchors: self.sync.covered_set.len(),
            block_rows: block.a_block.nrows(),
        })
    }

    /// One full pipeline step over a frame.
    pub fn step(
        &mut self,
        frame: &ToaFrame,
        forced: Option<&[Vec<usize>]>,
    ) -> Result<(Vec<LocalizationResult>, StepSummary)> {
        let results = self.localize_frame(frame, forced)?;
        let block = self.build_block(frame, &results)?;
        let summary = self.apply_block(&block, frame.t)?;
        Ok((results, summary))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_frame, AgentTruth};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_geom() -> NetworkGeometry {
        // 3 x 3 grid, 10 m spacing, c = 0.299792458 m/ns
        let mut anchors = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                anchors.push(Vector::from_vec(vec![10.0 * i as f64, 10.0 * j as f64]));
            }
        }
        NetworkGeometry::new(2, anchors, crate::model::SPEED_OF_LIGHT_M_PER_NS).unwrap()
    }

    fn los_agent(p: Vec<f64>, tau: f64, m: usize) -> AgentTruth {
        AgentTruth::new(Vector::from_vec(p), tau, (0..m).collect(), Vector::zeros(m)).unwrap()
    }

    fn make_frames(
        geom: &NetworkGeometry,
        offsets: &Vector,
        sigma: f64,
        t_max: usize,
        seed: u64,
    ) -> Vec<ToaFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = geom.num_anchors();
        (1..=t_max)
            .map(|t| {
                let agents = vec![
                    los_agent(vec![4.0 + 0.1 * t as f64, 7.0], 30.0 + t as f64, m),
                    los_agent(vec![14.0, 3.0 + 0.2 * t as f64], 80.0, m),
                ];
                generate_frame(t, geom, &agents, offsets, sigma, &mut rng).unwrap()
            })
            .collect()
    }

    fn forced_full(m: usize, n: usize) -> Vec<Vec<usize>> {
        vec![(0..m).collect(); n]
    }

    #[test]
    fn full_then_reduced_branching_under_full_coverage() {
        let geom = grid_geom();
        let m = geom.num_anchors();
        let offsets = Vector::zeros(m);
        let frames = make_frames(&geom, &offsets, 0.0, 3, 1);
        let mut eng =
            EngineState::new(geom.clone(), LocalizationConfig::default(), 0.9, 0.0).unwrap();
        let forced = forced_full(m, 2);

        let (_, s1) = eng.step(&frames[0], Some(&forced)).unwrap();
        assert!(!s1.used_reduced, "nothing covered yet: full branch required");
        assert_eq!(s1.covered_anchors, m);
        assert_eq!(s1.block_rows, 2 * m);
        assert_eq!(eng.covered_growth_steps(), 1);

        let (_, s2) = eng.step(&frames[1], Some(&forced)).unwrap();
        assert!(s2.used_reduced, "full coverage + majority selections");
        assert_eq!(eng.covered_growth_steps(), 1, "reduced branch cannot grow coverage");

        let (_, s3) = eng.step(&frames[2], Some(&forced)).unwrap();
        assert!(s3.used_reduced);
        assert_eq!(s3.t, 3);
    }

    #[test]
    fn noiseless_pipeline_recovers_positions_and_null_offsets() {
        let geom = grid_geom();
        let m = geom.num_anchors();
        let offsets = Vector::zeros(m);
        let frames = make_frames(&geom, &offsets, 0.0, 5, 2);
        let mut eng =
            EngineState::new(geom.clone(), LocalizationConfig::default(), 0.9, 0.0).unwrap();
        let forced = forced_full(m, 2);
        for frame in &frames {
            let (results, _) = eng.step(&frame, Some(&forced)).unwrap();
            let truths = frame.truth.as_ref().unwrap();
            for (res, truth) in results.iter().zip(truths) {
                let err = (&res.position - &truth.position).norm();
                assert!(err < 1e-6, "position error {err}");
            }
        }
        assert!(
            eng.sync_state().delta_hat.norm() < 1e-9,
            "noiseless zero-offset data must leave the clock estimate at zero: {}",
            eng.sync_state().delta_hat.norm()
        );
    }

    #[test]
    fn engine_runs_are_deterministic() {
        let geom = grid_geom();
        let m = geom.num_anchors();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let offsets = Vector::from_fn(m, |_, _| rng.gen_range(-8.0..8.0));
        let frames = make_frames(&geom, &offsets, 0.4, 6, 3);

        let run = |frames: &[ToaFrame]| {
            let mut eng =
                EngineState::new(geom.clone(), LocalizationConfig::default(), 0.8, 0.0).unwrap();
            let mut positions = Vec::new();
            for frame in frames {
                let (results, _) = eng.step(frame, None).unwrap();
                positions.extend(results.into_iter().map(|r| r.position));
            }
            (positions, eng.sync_state().delta_hat.clone())
        };
        let (p1, d1) = run(&frames);
        let (p2, d2) = run(&frames);
        assert_eq!(p1, p2, "identical inputs must give bitwise-identical positions");
        assert_eq!(d1, d2);
        // with nonzero true offsets the tracker must actually move
        assert!(d1.norm() > 0.1, "offset estimate stayed near zero: {}", d1.norm());
    }

    #[test]
    fn tracking_warm_start_feeds_next_frame() {
        let geom = grid_geom();
        let m = geom.num_anchors();
        let offsets = Vector::zeros(m);
        let frames = make_frames(&geom, &offsets, 0.1, 2, 4);
        let mut eng =
            EngineState::new(geom.clone(), LocalizationConfig::default(), 0.9, 0.0).unwrap();
        let (r1, _) = eng.step(&frames[0], None).unwrap();
        // the stored warm start for agent 0 is exactly frame 1's estimate
        assert_eq!(eng.prev_positions[0].as_ref().unwrap(), &r1[0].position);
        let (r2, _) = eng.step(&frames[1], None).unwrap();
        assert_eq!(eng.prev_positions[0].as_ref().unwrap(), &r2[0].position);
    }

    #[test]
    fn coverage_growth_is_bounded_by_anchor_count() {
        let geom = grid_geom();
        let m = geom.num_anchors();
        let offsets = Vector::zeros(m);
        // alternate two overlapping 6-anchor selections so coverage arrives
        // piecewise instead of all at once
        let sel_a: Vec<usize> = vec![0, 1, 2, 3, 4, 5];
        let sel_b: Vec<usize> = vec![3, 4, 5, 6, 7, 8];
        let frames = make_frames(&geom, &offsets, 0.2, 8, 5);
        let mut eng =
            EngineState::new(geom.clone(), LocalizationConfig::default(), 0.9, 0.0).unwrap();
        let mut covered_prev = 0;
        for (i, frame) in frames.iter().enumerate() {
            let sel = if i % 2 == 0 { &sel_a } else { &sel_b };
            let forced = vec![sel.clone(); 2];
            let (_, s) = eng.step(frame, Some(&forced)).unwrap();
            assert!(s.covered_anchors >= covered_prev, "covered set must be monotone");
            covered_prev = s.covered_anchors;
        }
        assert_eq!(covered_prev, m);
        assert!(eng.covered_growth_steps() <= m);
        assert_eq!(eng.covered_growth_steps(), 2, "two distinct supports arrived");
    }

    #[test]
    fn rejects_malformed_frames() {
        let geom = grid_geom();
        let m = geom.num_anchors();
        let mut eng =
            EngineState::new(geom.clone(), LocalizationConfig::default(), 0.9, 0.0).unwrap();
        let empty = ToaFrame { t: 1, measurements: vec![], truth: None };
        assert!(eng.step(&empty, None).is_err());
        let short = ToaFrame {
            t: 1,
            measurements: vec![Vector::zeros(m - 1)],
            truth: None,
        };
        assert!(eng.step(&short, None).is_err());
        let frames = make_frames(&geom, &Vector::zeros(m), 0.0, 1, 6);
        let wrong_forced = vec![vec![0usize, 1, 2, 3]; 3];
        assert!(eng.step(&frames[0], Some(&wrong_forced)).is_err());
    }
}
