//! Recursive clock-offset estimation against the direct batch solve.
//!
//! Frames arrive as blocks of centered range residuals; each block only
//! involves the anchors the agents selected, so early blocks cannot
//! determine every offset. The recursive engine absorbs each block in
//! constant time per step and switches to a cheaper inversion-free
//! update once its covered-anchor condition holds; re-solving the full
//! weighted least-squares stack from scratch must give the same answer
//! at every step — that equivalence is checked here, along with the
//! shrinking gauge-aligned offset error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toa_rtls::linalg::Vector;
use toa_rtls::model::{distance_vector, SPEED_OF_LIGHT_M_PER_NS};
use toa_rtls::sim::clock_rmse;
use toa_rtls::sync::{
    assemble_block, brmp_update_full, brmp_update_reduced, direct_lls_solve, init_sync,
    reduced_update_condition,
};
use toa_rtls::{AgentTruth, NetworkGeometry, ToaFrame};

fn main() -> toa_rtls::Result<()> {
    let m = 9;
    let lambda = 0.9;
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // 3x3 anchor grid at 5 m height
    let mut anchors = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            anchors.push(Vector::from_vec(vec![12.0 * i as f64, 12.0 * j as f64, 5.0]));
        }
    }
    let geom = NetworkGeometry::new(3, anchors, SPEED_OF_LIGHT_M_PER_NS)?;
    let delta_true = Vector::from_fn(m, |_, _| rng.gen_range(-8.0..8.0));

    let mut state = init_sync(m, lambda)?;
    let mut blocks = Vec::new();
    println!(" t  branch   covered  ||delta_err||_rms  recursive-vs-direct");
    for t in 1..=20 {
        // two agents per frame at random positions, each selecting a
        // random majority subset of the anchors (as the localizer would)
        let mut truths = Vec::new();
        let mut selections = Vec::new();
        let mut positions = Vec::new();
        for _ in 0..2 {
            let p = Vector::from_vec(vec![
                rng.gen_range(2.0..22.0),
                rng.gen_range(2.0..22.0),
                1.5,
            ]);
            let tau = rng.gen_range(0.0..100.0);
            truths.push(AgentTruth::new(p.clone(), tau, (0..m).collect(), Vector::zeros(m))?);
            let keep = rng.gen_range(m / 2 + 1..=m);
            let mut idx: Vec<usize> = (0..m).collect();
            for k in 0..keep {
                let swap = rng.gen_range(k..m);
                idx.swap(k, swap);
            }
            let mut sel: Vec<usize> = idx[..keep].to_vec();
            sel.sort_unstable();
            selections.push(sel);
            positions.push(p);
        }
        // noiseless measurements so the only unknowns are tau and delta
        let measurements: Vec<Vector> = truths
            .iter()
            .map(|tr| {
                let d = distance_vector(&tr.position, &geom).unwrap(); // ns
                Vector::from_fn(m, |a, _| d[a] + tr.tx_time + delta_true[a])
            })
            .collect();
        let frame = ToaFrame { t, measurements, truth: Some(truths) };

        let block = assemble_block(&frame, &selections, &positions, &geom)?;
        let reduced = reduced_update_condition(&selections, &state);
        state = if reduced {
            brmp_update_reduced(&state, &block)?
        } else {
            let mut next = brmp_update_full(&state, &block, 1e-10)?;
            for s in &selections {
                for &a in s {
                    if !next.covered_set.contains(&a) {
                        next.covered_set.push(a);
                    }
                }
            }
            next.covered_set.sort_unstable();
            next
        };
        state.t = t;
        blocks.push(block);

        // the direct solve restacks every block seen so far
        let direct = direct_lls_solve(&blocks, lambda, 1e-10)?;
        let equiv = (&state.delta_hat - &direct).norm();
        println!(
            "{t:3}  {}   {:2} / {m}   {:14.6}      {equiv:.3e}",
            if reduced { "reduced" } else { "full   " },
            state.covered_set.len(),
            clock_rmse(&state.delta_hat, &delta_true),
        );
    }
    println!("\nonce every anchor is covered and selections keep an anchor majority,");
    println!("the engine stays on the reduced branch and the aligned error is zero");
    println!("to noise level (exactly zero here: the frames are noiseless).");
    Ok(())
}
