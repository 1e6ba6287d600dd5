use spectral_cmm::contrastive::{train_spectral, TrainConfig};
use spectral_cmm::datagen::{gen_npiv_with_splits, SplitCounts};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let bs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(512);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200);
    let splits = SplitCounts { train: 6400, covariance: 0, estimation: 0, validation: 1600, test: 0 };
    let data = gen_npiv_with_splits(0.5, 1, splits, 1).unwrap();
    let t0 = std::time::Instant::now();
    let cfg = TrainConfig {
        j_grid: vec![10],
        learning_rate: lr,
        batch_size: bs,
        max_epochs: epochs,
        patience: 40,
        seed: 7,
        ..TrainConfig::default()
    };
    let model = train_spectral(&data, &cfg).unwrap();
    println!(
        "lr={lr} bs={bs} epochs={} best={} D_hat={:.4} elapsed={:.1}s",
        model.report.epochs_run, model.report.best_epoch,
        model.report.divergence_estimate, t0.elapsed().as_secs_f64()
    );
}
