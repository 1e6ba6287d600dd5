//! Decisive probe at the d=10, n=8000 cell: learned vs rbf across base scales.
use spectral_cmm::cmm::*;
use spectral_cmm::contrastive::{train_spectral, TrainConfig};
use spectral_cmm::datagen::{gen_npiv_with_splits, SplitCounts};
use spectral_cmm::kernels::Recipe;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8000);
    let d: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let v = (n as f64 * 0.2) as usize;
    let splits = SplitCounts { train: n - v, covariance: 0, estimation: n - v, validation: 2 * v, test: 2 * n };
    let t0 = std::time::Instant::now();
    let data = gen_npiv_with_splits(0.7, d, splits, 21).unwrap();
    let cfg = TrainConfig { max_epochs: 400, patience: 40, seed: 9, ..TrainConfig::default() };
    let model = train_spectral(&data, &cfg).unwrap();
    println!("train ({:.0}s): J={} D_hat={:.4}", t0.elapsed().as_secs_f64(), model.j, model.report.divergence_estimate);
    let grid = HparamGrid { lambda: vec![0.5, 2.0], nu: vec![0.5, 2.0], ..HparamGrid::default() };
    for base in [3e-4, 1e-3, 3e-3, 1e-2] {
        let opts = SelectOptions { base_scale: BaseScale::Fixed(base), eval_grid_test_mse: true };
        let t1 = std::time::Instant::now();
        let sel = select_hparams(&data, &grid, KernelFamily::Learned {
            model: &model, recipe: Recipe::Eq9Prime, alpha_prime: AlphaPrimeRule::AlphaPlusOne,
        }, &opts).unwrap();
        let best = sel.rows.iter().filter_map(|r| r.test_mse).fold(f64::INFINITY, f64::min);
        println!("learned base {base:.0e} ({:.0}s): selected a={} mse={:.4} | best {:.4}",
            t1.elapsed().as_secs_f64(), sel.best_row.alpha.unwrap(), sel.best_row.test_mse.unwrap(), best);
    }
    let t2 = std::time::Instant::now();
    let opts = SelectOptions { base_scale: BaseScale::Auto, eval_grid_test_mse: true };
    let sel = select_hparams(&data, &grid, KernelFamily::Rbf, &opts).unwrap();
    let best = sel.rows.iter().filter_map(|r| r.test_mse).fold(f64::INFINITY, f64::min);
    println!("rbf auto ({:.0}s): selected bwx={} bwz={} mse={:.4} | best {:.4}",
        t2.elapsed().as_secs_f64(), sel.best_row.bw_x.unwrap(), sel.best_row.bw_z.unwrap(),
        sel.best_row.test_mse.unwrap(), best);
}
