use pathssl_core::tensor::matmul_acc_slices;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, iters: usize) {
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..iters {
        matmul_acc_slices(&mut c, &a, &b, m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64();
    let gf = 2.0 * (m * k * n * iters) as f64 / dt / 1e9;
    eprintln!("{m}x{k}x{n}: {gf:.1} GFLOP/s");
}

fn main() {
    bench(2688, 128, 384, 50);
    bench(2688, 128, 256, 50);
    bench(2688, 256, 128, 50);
    bench(384, 128, 1024, 100);
    bench(128, 2688, 384, 50);
}
