//! Compare validation scorers: nu-regularized violation vs U-statistic MMR.
use ndarray::{Array1};
use spectral_cmm::cmm::*;
use spectral_cmm::contrastive::{train_spectral, TrainConfig};
use spectral_cmm::datagen::{gen_npiv_with_splits, Split, SplitCounts};
use spectral_cmm::kernels::{gram, median_heuristic, Kernel, RbfKernel, Recipe, build_kx, build_kz};

fn main() {
    let n = 4000usize;
    let v = (n as f64 * 0.2) as usize;
    let splits = SplitCounts { train: n - v, covariance: 0, estimation: n - v, validation: 2 * v, test: 2 * n };
    let data = gen_npiv_with_splits(0.7, 1, splits, 11).unwrap();
    let cfg = TrainConfig { max_epochs: 400, patience: 40, seed: 5, ..TrainConfig::default() };
    let model = train_spectral(&data, &cfg).unwrap();
    let z_val = data.z_split(Split::Validation);
    let x_val = data.x_split(Split::Validation);
    let y_val = data.y_split(Split::Validation).to_owned();
    let truth = data.row_target(Split::Test).unwrap();
    let x_test = data.x_split(Split::Test);
    // MMR U-stat Gram on validation instruments.
    let bw = median_heuristic(z_val).unwrap();
    let kz_score = gram(&Kernel::Rbf(RbfKernel::new(bw).unwrap()), z_val, z_val).unwrap();
    let m = z_val.nrows();
    let scorer = ViolationScorer::new(z_val).unwrap();
    let bx_all = |alpha: f64| build_kx(&model, alpha).unwrap();
    println!("alpha lambda      mmr_u      viol      test_mse");
    for alpha in [0.5, 1.0, 2.0, 3.0] {
        let kx = bx_all(alpha);
        let kz = build_kz(&model, alpha + 1.0).unwrap();
        let bx = kx.half_features(data.x_split(Split::Estimation)).unwrap();
        let cz = kz.half_features(data.z_split(Split::Estimation)).unwrap();
        let y_est = data.y_split(Split::Estimation).to_owned();
        for lam_base in [3e-4, 1e-3, 3e-3, 1e-2, 3e-2] {
            let gf = fit_minimax_factored(bx.view(), cz.view(), y_est.view(), lam_base, lam_base).unwrap();
            let fit = CmmFit { gamma: gf.gamma, anchors: data.x_split(Split::Estimation).to_owned(),
                kernel_x: Kernel::Learned(kx.clone()), lambda: lam_base, nu: lam_base, diagnostics: gf.diagnostics };
            let preds_val = fit.predict(x_val).unwrap();
            let u = &preds_val - &y_val;
            // U-statistic MMR: sum_{i!=j} u_i u_j K[i,j] / (m(m-1))
            let ku = kz_score.dot(&u);
            let vstat: f64 = u.dot(&ku);
            let diag: f64 = (0..m).map(|i| u[i] * u[i] * kz_score[[i, i]]).sum();
            let mmr_u = (vstat - diag) / (m as f64 * (m as f64 - 1.0));
            let viol = scorer.score(u.view());
            let _pt = ();
            
            let pt = fit.predict(x_test).unwrap();
            let mse = (&pt - &truth).mapv(|q| q * q).mean().unwrap();
            println!("{alpha:>4} {lam_base:.0e}  {mmr_u:+.6e} {viol:.6e} {mse:.4}");
        }
    }
}
