//! Quick timing probe for the dense matcher at benchmark scale.

use rand::{Rng, SeedableRng};
use rks_core::grid::{Grid2, PixelCoord};
use rks_core::matcher::{match_points, MatchConfig};

fn main() {
    let (w, h, ch, n) = (256usize, 256usize, 16usize, 400usize);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let data: Vec<f64> = (0..w * h * ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let desc_d = Grid2::from_values(w, h, ch, data).unwrap();
    let data: Vec<f64> = (0..w * h * ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let desc_s = Grid2::from_values(w, h, ch, data).unwrap();
    let scores = Grid2::from_values(w, h, 1, vec![0.9; w * h]).unwrap();
    let src: Vec<PixelCoord> = (0..n)
        .map(|_| PixelCoord::new(rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)))
        .collect();
    let cfg = MatchConfig::default();
    let out = match_points(&src, &desc_s, &desc_d, &scores, &scores, &cfg).unwrap();
    println!("warmup weight[0] = {}", out.weights[0]);
    for probe_n in [1usize, 8, 100, 400] {
        let src_sub = &src[..probe_n];
        let t0 = std::time::Instant::now();
        let o = match_points(src_sub, &desc_s, &desc_d, &scores, &scores, &cfg).unwrap();
        std::hint::black_box(&o);
        println!("n={probe_n}: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0);
    }
    let mut best = f64::INFINITY;
    for _ in 0..8 {
        let t0 = std::time::Instant::now();
        let out = match_points(&src, &desc_s, &desc_d, &scores, &scores, &cfg).unwrap();
        let dt = t0.elapsed().as_secs_f64() * 1000.0;
        best = best.min(dt);
        std::hint::black_box(&out);
    }
    println!("best of 8: {best:.2} ms");
}
