use ndarray::{Array1, Array2};
use spectral_cmm::cmm::{fit_minimax, violation_from_residuals, DensePrecompute, fit_dense_chol_pre};
use spectral_cmm::kernels::{gram, Kernel, RbfKernel};
use spectral_cmm::rng::stream;
use rand::Rng;
use std::time::Instant;

fn main() {
    let n = 900;
    let mut rng = stream(1, 1);
    let pts: Array2<f64> = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
    let y: Array1<f64> = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
    let k = Kernel::Rbf(RbfKernel::new(0.8).unwrap());
    let t0 = Instant::now();
    let kx = gram(&k, pts.view(), pts.view()).unwrap();
    let kz = gram(&k, pts.view(), pts.view()).unwrap();
    println!("grams: {:.3}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let pre = DensePrecompute::new(kx.view(), kz.view());
    println!("precompute: {:.3}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let f = fit_dense_chol_pre(kx.view(), kz.view(), &pre, y.view(), 0.1, 0.1).unwrap();
    println!("chol fit: {:.3}s (saddle {:.3e})", t0.elapsed().as_secs_f64(), f.diagnostics.saddle_value);
    let t0 = Instant::now();
    let f2 = fit_minimax(kx.view(), kz.view(), y.view(), 0.1, 0.1).unwrap();
    println!("fit_minimax dispatch: {:.3}s (saddle {:.3e})", t0.elapsed().as_secs_f64(), f2.diagnostics.saddle_value);
    let m = 600;
    let kzv = gram(&k, pts.slice(ndarray::s![0..m, ..]), pts.slice(ndarray::s![0..m, ..])).unwrap();
    let u: Array1<f64> = Array1::from_shape_fn(m, |_| rng.gen_range(-1.0..1.0));
    let t0 = Instant::now();
    let v = violation_from_residuals(u.view(), kzv.view(), 0.1).unwrap();
    println!("violation m=600: {:.3}s ({v:.3e})", t0.elapsed().as_secs_f64());
}
