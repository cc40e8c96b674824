//! Scratch probe for expert failure modes (not part of the test suite).

use mdf_core::world::*;
use mdf_core::rng;

fn main() {
    let n = 1000u64;
    let mut fails = Vec::new();
    for i in 0..n {
        let ep = run_expert_episode(20_000, i);
        if !ep.success {
            fails.push(i);
        }
    }
    println!("failures: {} / {n}", fails.len());
    for &i in fails.iter().take(5) {
        println!("--- episode {i}");
        // replay with the same streams, printing per-block state
        let mut init_rng = rng::stream(20_000, "ep-init", i);
        let mut expert_rng = rng::stream(20_000, "ep-expert", i);
        let mut state = sample_initial(&mut init_rng);
        println!(
            "start: slot {:.4} dx {:+.4} bottom {:.4}",
            state.slot_center_x,
            state.peg_center()[0] - state.slot_center_x,
            state.peg_bottom()[1]
        );
        for t in 0..T_MODEL {
            let a = scripted_expert(&state, &mut expert_rng);
            for _ in 0..STRIDE {
                state = step(&state, a).unwrap().next;
            }
            println!(
                "  t {t}: a ({:+.3},{:+.3}) dx {:+.4} bottom {:.4} fy {:+.3} tq {:+.4} succ {}",
                a[0],
                a[1],
                state.peg_center()[0] - state.slot_center_x,
                state.peg_bottom()[1],
                state.contact_force[1],
                state.contact_torque,
                is_success(&state)
            );
        }
    }
}
