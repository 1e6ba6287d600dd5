//! Full-pipeline probe at moderate scale: train well, fit, compare
//! learned vs rbf test MSE against the truth.
use spectral_cmm::cmm::{select_hparams, AlphaPrimeRule, BaseScale, KernelFamily, SelectOptions};
use spectral_cmm::contrastive::{train_spectral, TrainConfig};
use spectral_cmm::datagen::gen_npiv_with_splits;
use spectral_cmm::datagen::SplitCounts;
use spectral_cmm::kernels::Recipe;
use spectral_cmm::cmm::HparamGrid;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let d: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let rho: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.7);
    let with_rbf: bool = args.get(4).map(|s| s == "rbf").unwrap_or(false);
    let v = (n as f64 * 0.2) as usize;
    let splits = SplitCounts {
        train: n - v, covariance: 0, estimation: n - v, validation: 2 * v,
        test: 2 * n,
    };
    let t0 = std::time::Instant::now();
    let data = gen_npiv_with_splits(rho, d, splits, 11).unwrap();
    let cfg = TrainConfig {
        max_epochs: 400, patience: 40, seed: 5,
        ..TrainConfig::default()
    };
    let model = train_spectral(&data, &cfg).unwrap();
    println!("train: J={} D_hat={:.4} ({:.0}s)", model.j, model.report.divergence_estimate, t0.elapsed().as_secs_f64());
    let grid = HparamGrid { lambda: vec![0.5, 2.0], nu: vec![0.5, 2.0], ..HparamGrid::default() };
    let opts = SelectOptions { base_scale: BaseScale::Auto, eval_grid_test_mse: true };
    let t1 = std::time::Instant::now();
    let sel = select_hparams(&data, &grid, KernelFamily::Learned {
        model: &model, recipe: Recipe::Eq9Prime, alpha_prime: AlphaPrimeRule::AlphaPlusOne,
    }, &opts).unwrap();
    println!("learned fit ({:.0}s): base {:.3e}", t1.elapsed().as_secs_f64(), sel.base_scale);
    for r in &sel.rows {
        println!("  a={:.1} lam={:.2e} nu={:.2e} viol={:.3e} mse={:.4}",
            r.alpha.unwrap(), r.lambda, r.nu, r.heldout_violation, r.test_mse.unwrap());
    }
    println!("  SELECTED: a={:.1} mse={:.4}", sel.best_row.alpha.unwrap(), sel.best_row.test_mse.unwrap());
    if with_rbf {
        let t2 = std::time::Instant::now();
        let sel2 = select_hparams(&data, &grid, KernelFamily::Rbf, &opts).unwrap();
        println!("rbf fit ({:.0}s):", t2.elapsed().as_secs_f64());
        for r in &sel2.rows {
            println!("  bwx={:.1} bwz={:.1} lam={:.2e} nu={:.2e} viol={:.3e} mse={:.4}",
                r.bw_x.unwrap(), r.bw_z.unwrap(), r.lambda, r.nu, r.heldout_violation, r.test_mse.unwrap());
        }
        println!("  SELECTED rbf mse={:.4}", sel2.best_row.test_mse.unwrap());
    }
}
