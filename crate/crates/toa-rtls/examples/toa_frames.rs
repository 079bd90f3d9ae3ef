//! The measurement model: what one time-of-arrival frame contains.
//!
//! Each measurement stacks four ingredients (all in nanoseconds):
//! propagation delay ||q - p|| / c, the agent's unknown transmission
//! time, the anchor's unknown clock offset, and — on non-line-of-sight
//! links — a large positive excess delay. This example generates one
//! frame on a small anchor grid and takes a single measurement apart.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toa_rtls::linalg::Vector;
use toa_rtls::model::{distance_vector, generate_frame, SPEED_OF_LIGHT_M_PER_NS};
use toa_rtls::{AgentTruth, NetworkGeometry};

fn main() -> toa_rtls::Result<()> {
    // nine anchors on a 3x3 grid, 10 m pitch, mounted at 5 m
    let mut anchors = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            anchors.push(Vector::from_vec(vec![10.0 * i as f64, 10.0 * j as f64, 5.0]));
        }
    }
    let geom = NetworkGeometry::new(3, anchors, SPEED_OF_LIGHT_M_PER_NS)?;
    let m = geom.num_anchors();

    // one agent at 1.5 m height; anchors 2 and 6 are NLoS with 18 / 30 ns
    // of excess delay, every other link is line of sight
    let position = Vector::from_vec(vec![12.0, 7.0, 1.5]);
    let tx_time = 41.7; // ns, unknown to the estimator
    let los: Vec<usize> = (0..m).filter(|i| *i != 2 && *i != 6).collect();
    let mut nlos_errors = Vector::zeros(m);
    nlos_errors[2] = 18.0;
    nlos_errors[6] = 30.0;
    let agent = AgentTruth::new(position.clone(), tx_time, los, nlos_errors.clone())?;

    // per-anchor clock offsets, fixed for the run
    let offsets =
        Vector::from_vec(vec![3.1, -2.4, 0.8, 5.0, -7.2, 1.1, -0.6, 2.2, 4.4]);
    let sigma = 0.4; // measurement noise std, ns

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frame = generate_frame(1, &geom, &[agent], &offsets, sigma, &mut rng)?;

    let d = distance_vector(&position, &geom)?; // propagation delays, ns
    println!("frame t={} with {} agent(s), {} anchors", frame.t, frame.measurements.len(), m);
    println!("true NLoS set of agent 0: {:?}\n", frame.truth.as_ref().unwrap()[0].nlos_set());
    println!("anchor    toa_ns =  prop_ns +    tau +  offset +  nlos +  noise");
    for a in 0..m {
        let toa = frame.measurements[0][a];
        let prop = d[a];
        let noise = toa - prop - tx_time - offsets[a] - nlos_errors[a];
        println!(
            "  {a}    {toa:8.3} = {prop:8.3} + {tx_time:6.1} + {:7.1} + {:5.1} + {noise:6.3}{}",
            offsets[a],
            nlos_errors[a],
            if nlos_errors[a] > 0.0 { "   <- NLoS" } else { "" }
        );
    }
    println!("\nnoise column is N(0, {sigma} ns); regenerating with the same seed");
    println!("reproduces the frame bit for bit.");
    Ok(())
}
