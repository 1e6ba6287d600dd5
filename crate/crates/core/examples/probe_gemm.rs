use ndarray::Array2;
use spectral_cmm::rng::stream;
use rand::Rng;
use std::time::Instant;
fn main() {
    let n = 4000;
    let mut rng = stream(1, 1);
    let a: Array2<f64> = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
    let b: Array2<f64> = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
    let t0 = Instant::now();
    let c = a.dot(&b);
    let el = t0.elapsed().as_secs_f64();
    println!("gemm {n}: {:.2}s = {:.1} GFLOP/s (check {})", el, 2.0 * (n as f64).powi(3) / el / 1e9, c[[0,0]]);
}
