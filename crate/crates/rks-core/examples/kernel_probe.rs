//! Micro-timings for the matcher kernel pieces.

use rand::{Rng, SeedableRng};
use rks_core::matcher::kernel::fast_exp;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let n = 1 << 20;
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();

    // exp throughput with lane accumulators.
    let t0 = std::time::Instant::now();
    let mut se = [0.0f64; 8];
    for reps in 0..25 {
        for chunk in xs.chunks_exact(8) {
            for lane in 0..8 {
                se[lane] += fast_exp(chunk[lane] * (1.0 + reps as f64 * 1e-9));
            }
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("fast_exp: {:.3} ns/elem (sum {})", dt / (25.0 * n as f64) * 1e9, se[0]);

    // GEMM-style accumulation: 16 channels x 8 keypoints over 128-wide rows.
    let planes: Vec<f64> = (0..16 * n).map(|i| (i % 97) as f64 * 0.01).collect();
    let kdesc: Vec<f64> = (0..16 * 8).map(|i| (i % 13) as f64 * 0.07).collect();
    let mut acc = [[0.0f64; 128]; 8];
    let t0 = std::time::Instant::now();
    let reps = 8;
    for _ in 0..reps {
        for seg in 0..(n / 128) {
            let off = seg * 128;
            for (k, a) in acc.iter_mut().enumerate() {
                let row = &mut a[..128];
                row.fill(0.0);
                for c in 0..16 {
                    let dc = kdesc[k * 16 + c];
                    let plane = &planes[c * n + off..c * n + off + 128];
                    for (ai, &pi) in row.iter_mut().zip(plane) {
                        *ai += dc * pi;
                    }
                }
            }
            std::hint::black_box(&acc);
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = reps as f64 * (n as f64) * 16.0 * 8.0 * 2.0;
    println!("gemm: {:.2} GFLOP/s", flops / dt / 1e9);
}
