//! Measurement model: network geometry, per-frame ground truth, and the
//! time-of-arrival observation equation.
//!
//! All times are in nanoseconds and all lengths in meters. A measurement from
//! agent `n` at anchor `m` in frame `t` is
//!
//! ```text
//! r[m] = |q_m - p| / c  +  tau  +  delta[m]  +  b[m]  +  eps[m]
//! ```
//!
//! with `q_m` the anchor position, `p` the (unknown) agent position, `tau`
//! the unknown per-transmission send time, `delta[m]` the fixed anchor clock
//! offset, `b[m] >= 0` an NLoS excess delay (zero on LoS links), and
//! `eps[m]` white Gaussian noise. Anchor indices are 0-based throughout.
//!
//! Subset bookkeeping uses the selection matrix `F(S)` (rows of the identity
//! picked out by `S`) and the centering matrix `B(k) = I - (1/k) 11^T`; their
//! product `A(S) = B(|S|) F(S)` maps full-length vectors to centered
//! selections. Centering eliminates the common send time `tau` from every
//! row block, which is what makes joint offset estimation possible without
//! knowing transmission times.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite_vec, Matrix, Vector};

/// Propagation speed in meters per nanosecond (vacuum speed of light).
pub const SPEED_OF_LIGHT_M_PER_NS: f64 = 0.299792458;

/// Fixed anchor constellation plus propagation constant.
#[derive(Debug, Clone)]
pub struct NetworkGeometry {
    /// Spatial dimension, 2 or 3.
    pub dim: usize,
    /// Anchor positions, each of length `dim`, in meters.
    pub anchors: Vec<Vector>,
    /// Propagation speed in m/ns.
    pub c: f64,
}

impl NetworkGeometry {
    pub fn new(dim: usize, anchors: Vec<Vector>, c: f64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::invalid("geometry dimension must be 2 or 3"));
        }
        if anchors.len() < 2 {
            return Err(Error::invalid("at least two anchors required"));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid("propagation speed must be positive"));
        }
        for (i, q) in anchors.iter().enumerate() {
            if q.len() != dim {
                return Err(Error::invalid(format!("anchor {i} has wrong dimension")));
            }
            ensure_finite_vec("anchor position", q)?;
        }
        Ok(NetworkGeometry { dim, anchors, c })
    }

    /// Number of anchors `M`.
    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Mean of the anchor positions.
    pub fn anchor_centroid(&self) -> Vector {
        let mut c = Vector::zeros(self.dim);
        for q in &self.anchors {
            c += q;
        }
        c / self.anchors.len() as f64
    }
}

/// Ground truth for one agent in one frame (simulation-side knowledge).
#[derive(Debug, Clone)]
pub struct AgentTruth {
    /// True agent position, length = geometry dim, meters.
    pub position: Vector,
    /// True send time `tau` for this transmission, ns.
    pub tx_time: f64,
    /// Sorted indices of LoS anchors for this transmission.
    pub los_set: Vec<usize>,
    /// Per-anchor NLoS excess delays, ns; exactly zero on `los_set`,
    /// strictly positive elsewhere.
    pub nlos_errors: Vector,
}

impl AgentTruth {
    pub fn new(position: Vector, tx_time: f64, los_set: Vec<usize>, nlos_errors: Vector) -> Result<Self> {
        let m = nlos_errors.len();
        validate_subset(&los_set, m)?;
        ensure_finite_vec("agent position", &position)?;
        if !tx_time.is_finite() {
            return Err(Error::invalid("tx_time must be finite"));
        }
        let mut is_los = vec![false; m];
        for &i in &los_set {
            is_los[i] = true;
        }
        for i in 0..m {
            let b = nlos_errors[i];
            if is_los[i] && b != 0.0 {
                return Err(Error::invalid(format!("LoS anchor {i} has nonzero NLoS delay")));
            }
            if !is_los[i] && !(b > 0.0) {
                return Err(Error::invalid(format!("NLoS anchor {i} must have positive delay")));
            }
        }
        Ok(AgentTruth { position, tx_time, los_set, nlos_errors })
    }

    /// Sorted complement of the LoS set: the true NLoS anchor indices.
    pub fn nlos_set(&self) -> Vec<usize> {
        let m = self.nlos_errors.len();
        complement(&self.los_set, m)
    }
}

/// One time instance of measurements: `measurements[n][m]` is the ToA of
/// agent `n` at anchor `m`, in ns. `truth` travels alongside in simulation.
#[derive(Debug, Clone)]
pub struct ToaFrame {
    /// 1-based time index of this frame.
    pub t: usize,
    pub measurements: Vec<Vector>,
    pub truth: Option<Vec<AgentTruth>>,
}

/// Checks that `s` is nonempty, strictly increasing, and within `0..m`.
pub(crate) fn validate_subset(s: &[usize], m: usize) -> Result<()> {
    if s.is_empty() {
        return Err(Error::invalid("anchor subset must be nonempty"));
    }
    for w in s.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::invalid("anchor subset must be strictly increasing"));
        }
    }
    if *s.last().unwrap() >= m {
        return Err(Error::invalid(format!(
            "anchor index {} out of range for M={m}",
            s.last().unwrap()
        )));
    }
    Ok(())
}

/// Sorted complement of a valid subset within `0..m`.
pub(crate) fn complement(s: &[usize], m: usize) -> Vec<usize> {
    let mut inside = vec![false; m];
    for &i in s {
        inside[i] = true;
    }
    (0..m).filter(|&i| !inside[i]).collect()
}

/// Selection matrix `F(S)`: `|S| x m`, row `i` is the `s[i]`-th unit row.
pub fn selection_matrix(s: &[usize], m: usize) -> Result<Matrix> {
    validate_subset(s, m)?;
    let mut f = Matrix::zeros(s.len(), m);
    for (i, &j) in s.iter().enumerate() {
        f[(i, j)] = 1.0;
    }
    Ok(f)
}

/// Centering matrix `B(k) = I_k - (1/k) 11^T`. Symmetric, idempotent,
/// annihilates constant vectors; `B(1)` is the 1x1 zero matrix.
pub fn centering_matrix(k: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::invalid("centering matrix order must be positive"));
    }
    let mut b = Matrix::from_element(k, k, -1.0 / k as f64);
    for i in 0..k {
        b[(i, i)] += 1.0;
    }
    Ok(b)
}

/// Reduced row matrix `A(S) = B(|S|) F(S)`: selects the entries of `S` and
/// removes their mean. Every row sums to zero, so `A(S) 1 = 0` and the
/// common send time drops out of `A(S) r`.
pub fn reduced_row_matrix(s: &[usize], m: usize) -> Result<Matrix> {
    let f = selection_matrix(s, m)?;
    let b = centering_matrix(s.len())?;
    Ok(b * f)
}

/// ToA-unit distances `(1/c) |q_m - p|` from agent position `p` to every
/// anchor, in ns.
pub fn distance_vector(p: &Vector, geom: &NetworkGeometry) -> Result<Vector> {
    ensure_finite_vec("position", p)?;
    if p.len() != geom.dim {
        return Err(Error::invalid("position dimension mismatch"));
    }
    Ok(Vector::from_iterator(
        geom.num_anchors(),
        geom.anchors.iter().map(|q| (q - p).norm() / geom.c),
    ))
}

/// Generates the ToA frame for time `t` from ground truth: distances plus
/// send times, clock offsets, NLoS delays and white noise of std `sigma` ns.
///
/// The send time and clock offset are added as one pre-computed sum, so a
/// gauge shift (`delta + kappa`, `tau - kappa`) with exactly representable
/// `kappa` reproduces measurements bit for bit under the same RNG stream.
pub fn generate_frame(
    t: usize,
    geom: &NetworkGeometry,
    agents: &[AgentTruth],
    offsets: &Vector,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<ToaFrame> {
    let m = geom.num_anchors();
    if agents.is_empty() {
        return Err(Error::invalid("at least one agent required"));
    }
    if offsets.len() != m {
        return Err(Error::invalid("offset vector length must equal anchor count"));
    }
    ensure_finite_vec("clock offsets", offsets)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("noise std must be nonnegative"));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let mut measurements = Vec::with_capacity(agents.len());
    for truth in agents {
        if truth.nlos_errors.len() != m {
            return Err(Error::invalid("agent NLoS vector length must equal anchor count"));
        }
        let d = distance_vector(&truth.position, geom)?;
        let mut r = Vector::zeros(m);
        for i in 0..m {
            let shift = truth.tx_time + offsets[i];
            r[i] = d[i] + shift + truth.nlos_errors[i] + noise.sample(rng);
        }
        measurements.push(r);
    }
    Ok(ToaFrame { t, measurements, truth: Some(agents.to_vec()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_geom() -> NetworkGeometry {
        // c = 1 makes distances equal to times; convenient for hand checks
        NetworkGeometry::new(
            2,
            vec![
                Vector::from_vec(vec![0.0, 0.0]),
                Vector::from_vec(vec![3.0, 4.0]),
                Vector::from_vec(vec![6.0, 0.0]),
            ],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn selection_picks_identity_rows() {
        let f = selection_matrix(&[0, 2], 3).unwrap();
        let expect = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(f, expect);
        let full = selection_matrix(&[0, 1, 2], 3).unwrap();
        assert_eq!(full, Matrix::identity(3, 3));
    }

    #[test]
    fn selection_rejects_bad_subsets() {
        assert!(selection_matrix(&[], 3).is_err());
        assert!(selection_matrix(&[1, 1], 3).is_err());
        assert!(selection_matrix(&[2, 1], 3).is_err());
        assert!(selection_matrix(&[0, 3], 3).is_err());
    }

    #[test]
    fn centering_small_orders() {
        let b1 = centering_matrix(1).unwrap();
        assert_eq!(b1, Matrix::zeros(1, 1));
        let b2 = centering_matrix(2).unwrap();
        let expect = Matrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert_abs_diff_eq!(b2, expect, epsilon = 1e-15);
    }

    #[test]
    fn centering_annihilates_constants_and_is_idempotent() {
        let b = centering_matrix(7).unwrap();
        let ones = Vector::from_element(7, 1.0);
        assert!((&b * &ones).amax() < 1e-14);
        assert!((&b * &b - &b).amax() < 1e-14);
        assert!((&b - b.transpose()).amax() == 0.0);
    }

    #[test]
    fn reduced_rows_center_a_selection() {
        let a = reduced_row_matrix(&[0, 2], 3).unwrap();
        let expect = Matrix::from_row_slice(2, 3, &[0.5, 0.0, -0.5, -0.5, 0.0, 0.5]);
        assert_abs_diff_eq!(a, expect, epsilon = 1e-15);
        // applied to r = (4, _, 6): centered selection (-1, 1)
        let r = Vector::from_vec(vec![4.0, 99.0, 6.0]);
        let y = &a * r;
        assert_abs_diff_eq!(y, Vector::from_vec(vec![-1.0, 1.0]), epsilon = 1e-15);
    }

    #[test]
    fn reduced_rows_sum_to_zero() {
        let a = reduced_row_matrix(&[1, 3, 4, 6], 8).unwrap();
        for row in a.row_iter() {
            assert!(row.sum().abs() < 1e-14);
        }
        let ones = Vector::from_element(8, 1.0);
        assert!((&a * ones).amax() < 1e-14);
    }

    #[test]
    fn distances_match_hand_computed_triangle() {
        let geom = unit_geom();
        let p = Vector::from_vec(vec![0.0, 0.0]);
        let d = distance_vector(&p, &geom).unwrap();
        assert_abs_diff_eq!(d[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[2], 6.0, epsilon = 1e-15);
        // doubling c halves the ToA
        let mut fast = unit_geom();
        fast.c = 2.0;
        let d2 = distance_vector(&p, &fast).unwrap();
        assert_abs_diff_eq!(d2[1], 2.5, epsilon = 1e-15);
    }

    fn los_truth(p: Vector, tau: f64, m: usize) -> AgentTruth {
        AgentTruth::new(p, tau, (0..m).collect(), Vector::zeros(m)).unwrap()
    }

    #[test]
    fn noiseless_frame_reproduces_distances_exactly() {
        let geom = unit_geom();
        let truth = los_truth(Vector::from_vec(vec![1.0, 1.0]), 0.0, 3);
        let d = distance_vector(&truth.position, &geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame =
            generate_frame(1, &geom, &[truth], &Vector::zeros(3), 0.0, &mut rng).unwrap();
        assert_eq!(frame.measurements[0], d);
    }

    #[test]
    fn offsets_and_nlos_shift_measurements() {
        let geom = unit_geom();
        let truth = AgentTruth::new(
            Vector::from_vec(vec![1.0, 1.0]),
            2.0,
            vec![0, 2],
            Vector::from_vec(vec![0.0, 30.0, 0.0]),
        )
        .unwrap();
        assert_eq!(truth.nlos_set(), vec![1]);
        let d = distance_vector(&truth.position, &geom).unwrap();
        let offsets = Vector::from_vec(vec![1.0, -2.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = generate_frame(1, &geom, &[truth], &offsets, 0.0, &mut rng).unwrap();
        let r = &frame.measurements[0];
        assert_abs_diff_eq!(r[0], d[0] + 2.0 + 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], d[1] + 2.0 - 2.0 + 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[2], d[2] + 2.0 + 4.0, epsilon = 1e-12);
    }

    #[test]
    fn gauge_shift_is_bit_identical() {
        // shifting all offsets by kappa and the send time by -kappa leaves
        // the observable sum unchanged; with exactly representable values
        // the generated frames agree bit for bit
        let geom = unit_geom();
        let kappa = 2.0;
        let offsets = Vector::from_vec(vec![1.25, -0.75, 0.5]);
        let shifted = offsets.map(|x| x + kappa);
        let truth_a = los_truth(Vector::from_vec(vec![1.5, 2.0]), 3.5, 3);
        let truth_b = los_truth(Vector::from_vec(vec![1.5, 2.0]), 3.5 - kappa, 3);
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        let fa = generate_frame(1, &geom, &[truth_a], &offsets, 0.3, &mut rng_a).unwrap();
        let fb = generate_frame(1, &geom, &[truth_b], &shifted, 0.3, &mut rng_b).unwrap();
        assert_eq!(fa.measurements[0], fb.measurements[0]);
    }

    #[test]
    fn noise_std_matches_request() {
        let geom = unit_geom();
        let truth = los_truth(Vector::from_vec(vec![2.0, 1.0]), 0.0, 3);
        let d = distance_vector(&truth.position, &geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = 0.4;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for t in 0..40_000 {
            let frame =
                generate_frame(t + 1, &geom, &[truth.clone()], &Vector::zeros(3), sigma, &mut rng)
                    .unwrap();
            for i in 0..3 {
                let eps = frame.measurements[0][i] - d[i];
                sum_sq += eps * eps;
                count += 1;
            }
        }
        let est = (sum_sq / count as f64).sqrt();
        assert!((est - sigma).abs() / sigma < 0.02, "noise std {est} vs {sigma}");
    }

    #[test]
    fn truth_validation_rejects_inconsistent_nlos() {
        // positive delay on a LoS anchor
        assert!(AgentTruth::new(
            Vector::from_vec(vec![0.0, 0.0]),
            0.0,
            vec![0, 1],
            Vector::from_vec(vec![0.0, 5.0, 10.0]),
        )
        .is_err());
        // zero delay on an NLoS anchor
        assert!(AgentTruth::new(
            Vector::from_vec(vec![0.0, 0.0]),
            0.0,
            vec![0],
            Vector::from_vec(vec![0.0, 0.0, 10.0]),
        )
        .is_err());
    }

    #[test]
    fn generate_frame_rejects_bad_inputs() {
        let geom = unit_geom();
        let truth = los_truth(Vector::from_vec(vec![1.0, 1.0]), 0.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(generate_frame(1, &geom, &[truth.clone()], &Vector::zeros(2), 0.1, &mut rng)
            .is_err());
        assert!(
            generate_frame(1, &geom, &[truth], &Vector::zeros(3), -0.1, &mut rng).is_err()
        );
        assert!(generate_frame(1, &geom, &[], &Vector::zeros(3), 0.1, &mut rng).is_err());
    }

    #[test]
    fn geometry_validation() {
        assert!(NetworkGeometry::new(2, vec![Vector::zeros(2)], 1.0).is_err());
        assert!(NetworkGeometry::new(4, vec![Vector::zeros(4), Vector::zeros(4)], 1.0).is_err());
        assert!(
            NetworkGeometry::new(2, vec![Vector::zeros(2), Vector::zeros(3)], 1.0).is_err()
        );
        assert!(NetworkGeometry::new(2, vec![Vector::zeros(2), Vector::zeros(2)], 0.0).is_err());
    }
}
