use ndarray::Array2;
use spectral_cmm::linalg::{sym_eig, rel_frob_dist, SymMatrix};
use spectral_cmm::rng::stream;
use rand::Rng;
use std::time::Instant;

fn main() {
    for n in [100usize, 300, 900, 2000] {
        let mut rng = stream(n as u64, 1);
        let b: Array2<f64> = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let a = SymMatrix::symmetrized(b.t().dot(&b)).unwrap();
        let t0 = Instant::now();
        let eig = sym_eig(&a).unwrap();
        let el = t0.elapsed().as_secs_f64();
        let rec = eig.reconstruct_with(|l| l);
        let err = rel_frob_dist(&rec.view(), &a.as_array());
        let vtv = eig.vectors.t().dot(&eig.vectors);
        let orth = rel_frob_dist(&vtv.view(), &Array2::eye(n).view());
        println!("n={n}: {el:.3}s, reconstruction {err:.2e}, orthogonality {orth:.2e}");
    }
}
