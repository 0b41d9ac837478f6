use hemlock_core::numerics::linalg;
use std::time::Instant;

fn main() {
    // attack-loop shaped matmuls: (13x64)@(64x2000), (13x64)@(64x256), (13x2000)@(2000x64 via bt)
    let cases = [(13usize, 64usize, 2000usize), (13, 64, 256), (13, 256, 256), (64, 64, 64), (128, 64, 2000)];
    for (m, k, n) in cases {
        let a = vec![1.000001f64; m * k];
        let b = vec![0.999999f64; k * n];
        let mut c = vec![0.0; m * n];
        let reps = (2_000_000_000 / (2 * m * k * n)).max(3);
        let t = Instant::now();
        for _ in 0..reps {
            linalg::matmul(&a, &b, m, k, n, &mut c);
        }
        let dt = t.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n * reps) as f64) / dt / 1e9;
        println!("matmul {m}x{k}x{n}: {gflops:.2} GFLOP/s ({reps} reps, {dt:.2}s, sink {})", c[0]);

        let mut cbt = vec![0.0; m * n];
        let bt = vec![0.999999f64; n * k];
        let t = Instant::now();
        for _ in 0..reps {
            cbt.fill(0.0);
            linalg::matmul_bt_acc(&a, &bt, m, k, n, &mut cbt);
        }
        let dt = t.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n * reps) as f64) / dt / 1e9;
        println!("  bt_acc: {gflops:.2} GFLOP/s (sink {})", cbt[0]);
    }
}
