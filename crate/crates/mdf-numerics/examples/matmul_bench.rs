//! Rough single-core throughput check for the blocked matmul kernel.

use mdf_numerics::kernels::mm_nn;
use std::time::Instant;

fn main() {
    for (m, k, n) in [(640usize, 128usize, 128usize), (640, 128, 512), (640, 512, 128)] {
        let a = vec![0.5f32; m * k];
        let b = vec![0.25f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let reps = 200;
        let t0 = Instant::now();
        for _ in 0..reps {
            mm_nn(&a, &b, &mut c, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
        println!("{}x{}x{}: {:.1} GFLOP/s", m, k, n, gflops);
    }
}
