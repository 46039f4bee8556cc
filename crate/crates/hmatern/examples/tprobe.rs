// temporary truncation microbenchmark
use hmatern::dense::{jacobi_svd, Mat};
use hmatern::hmatrix::{truncate_lowrank, RankPolicy};
use std::time::Instant;

fn bench(m: usize, p: usize, r: usize, reps: usize) {
    // factors with a realistic geometric singular spectrum
    let u = Mat::from_fn(m, r, |i, j| {
        let decay = 0.6f64.powi(j as i32 / 2);
        decay * ((i * 7 + j * 13 + 1) as f64 * 0.173).sin()
    });
    let v = Mat::from_fn(p, r, |i, j| {
        let decay = 0.6f64.powi(j as i32 / 2 + (j % 2) as i32);
        decay * ((i * 3 + j * 5 + 2) as f64 * 0.117).cos()
    });
    let t0 = Instant::now();
    let mut keep = 0;
    for _ in 0..reps {
        let (u2, _v2) = truncate_lowrank(&u, &v, RankPolicy::adaptive(1e-6));
        keep = u2.ncols();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("truncate m={m} p={p} r={r}: {:.1} us keep={keep}", dt * 1e6);
    let core = Mat::from_fn(r, r, |i, j| {
        0.7f64.powi(i.min(j) as i32) * ((i * 11 + j * 17 + 1) as f64 * 0.213).sin()
    });
    let t0 = Instant::now();
    let mut sweeps = 0;
    for _ in 0..reps {
        let (_, s, _) = jacobi_svd(&core);
        sweeps = s.len();
    }
    let _ = sweeps;
    println!("  jacobi r={r}: {:.1} us", t0.elapsed().as_secs_f64() / reps as f64 * 1e6);
}

fn main() {
    bench(32, 32, 16, 2000);
    bench(64, 64, 24, 2000);
    bench(128, 128, 32, 1000);
    bench(256, 256, 40, 500);
    bench(512, 512, 48, 200);
    bench(1024, 1024, 56, 100);
    bench(2048, 2048, 56, 50);
}
