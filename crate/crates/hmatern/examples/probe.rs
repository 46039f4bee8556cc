// temporary timing probe
use hmatern::geometry::*;
use hmatern::hlinalg::{factorize, FactorMode};
use hmatern::hmatrix::{assemble, compression_stats, RankPolicy};
use hmatern::kernels::MaternParams;
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let sqrt_n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(129);
    let eps: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let nu: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let t0 = Instant::now();
    let nmin: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let ell: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(0.0334);
    let mut ps = generate_perturbed_mesh(sqrt_n, 0.4, 7).unwrap();
    let ct = Arc::new(build_cluster_tree(&mut ps, nmin).unwrap());
    let bt = Arc::new(build_block_tree(&ct, 2.0).unwrap());
    println!("n={} trees: {:.3}s blocks={} leaves={}", ct.len(), t0.elapsed().as_secs_f64(), bt.block_count(), bt.leaf_ids().len());
    let params = MaternParams::new(1.0, ell, nu, 0.0).unwrap();
    let t1 = Instant::now();
    let h = assemble(&ct, &bt, &params, RankPolicy::adaptive(eps)).unwrap();
    let ta = t1.elapsed().as_secs_f64();
    let st = compression_stats(&h);
    println!("assemble: {:.3}s  c.r.={:.3} maxrank={} bytes={:.1}MB fallbacks={}", ta, st.compression_ratio, st.max_rank, st.bytes_compressed as f64/1e6, st.dense_fallbacks);
    let t2 = Instant::now();
    let f = factorize(&h, FactorMode::Ldlt, None).unwrap();
    let tf = t2.elapsed().as_secs_f64();
    println!("factorize: {:.3}s  logdet={:.6} maxrank={}", tf, f.logdet(), f.max_rank());
    println!("prof: {}", hmatern::hlinalg::work::prof::report());
    println!("trunc_all: {:.2}s / {} calls", hmatern::hmatrix::TRUNC_ALL_NS.load(std::sync::atomic::Ordering::Relaxed) as f64/1e9, hmatern::hmatrix::TRUNC_ALL_CALLS.load(std::sync::atomic::Ordering::Relaxed));
    println!("jacobi: {:.2}s", hmatern::hmatrix::JACOBI_NS.load(std::sync::atomic::Ordering::Relaxed) as f64/1e9);
}
