use spectral_cmm::cmm::*;
use spectral_cmm::contrastive::{train_spectral, TrainConfig};
use spectral_cmm::datagen::{gen_npiv_with_splits, SplitCounts};
use spectral_cmm::kernels::Recipe;

fn main() {
    let n = 4000usize;
    let v = (n as f64 * 0.2) as usize;
    let splits = SplitCounts { train: n - v, covariance: 0, estimation: n - v, validation: 2 * v, test: 2 * n };
    let data = gen_npiv_with_splits(0.7, 1, splits, 11).unwrap();
    let cfg = TrainConfig { max_epochs: 400, patience: 40, seed: 5, ..TrainConfig::default() };
    let model = train_spectral(&data, &cfg).unwrap();
    println!("D_hat {:.4} J {}", model.report.divergence_estimate, model.j);
    // h magnitude stats on the estimation split
    let h = model.h_values(data.z_split(spectral_cmm::datagen::Split::Estimation), data.x_split(spectral_cmm::datagen::Split::Estimation)).unwrap();
    let mut habs: Vec<f64> = h.iter().map(|v| v.abs()).collect();
    habs.sort_by(|a,b| a.partial_cmp(b).unwrap());
    let q = |p: f64| habs[((habs.len()-1) as f64 * p) as usize];
    println!("|h| quantiles: 50% {:.2} 90% {:.2} max {:.2}; mean h^2 {:.2}", q(0.5), q(0.9), habs[habs.len()-1], h.dot(&h)/h.len() as f64);
    let grid = HparamGrid { lambda: vec![1.0], nu: vec![1.0], ..HparamGrid::default() };
    for base in [1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0] {
        let opts = SelectOptions { base_scale: BaseScale::Fixed(base), eval_grid_test_mse: true };
        let sel = select_hparams(&data, &grid, KernelFamily::Learned {
            model: &model, recipe: Recipe::Eq9Prime, alpha_prime: AlphaPrimeRule::AlphaPlusOne,
        }, &opts).unwrap();
        let best_mse = sel.rows.iter().map(|r| r.test_mse.unwrap()).fold(f64::INFINITY, f64::min);
        println!("base {base:.0e}: selected a={:.1} mse={:.4} | best-in-grid mse {:.4}",
            sel.best_row.alpha.unwrap(), sel.best_row.test_mse.unwrap(), best_mse);
    }
}
