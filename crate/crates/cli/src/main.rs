//! Experiment orchestration CLI: data generation, spectral training, kernel
//! fitting and evaluation, analytic oracle studies, and configuration
//! sweeps. See `--help` per subcommand; all runs are deterministic given
//! the global seed (overridable via `SPECTRAL_CMM_SEED`).

mod config;
mod pipeline;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use spectral_cmm::cmm::FitRow;
use spectral_cmm::contrastive::{
    population_risk_discrete, train_spectral, ModelDoc, SpectralModel,
};
use spectral_cmm::datagen::{self, Split};
use spectral_cmm::error::{Error, Result};
use spectral_cmm::oracles::{
    build_ideal_rkhs, illposedness_measure, modulus_of_continuity, variance_explained_gap,
    HypothesisSpec, OperatorOracle,
};
use spectral_cmm::rng::derive_seed;
use std::path::PathBuf;

use config::ExperimentConfig;
use pipeline::{FitDoc, MetricRow};

#[derive(Parser)]
#[command(
    name = "spectral-cmm",
    about = "Spectral representation learning and kernelized minimax estimation for conditional moment models",
    version
)]
struct Cli {
    /// TOML configuration file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (also via SPECTRAL_CMM_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataFlags {
    /// Data-generating process: npiv | proxy.
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "d-ex")]
    d_ex: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory (metadata.json + per-split CSVs).
    GenData {
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the spectral model on a dataset directory.
    Train {
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (model.json, train_curve.csv).
        #[arg(long)]
        out: PathBuf,
        /// Candidate J values, e.g. --j 10,20,30.
        #[arg(long, value_delimiter = ',')]
        j: Vec<usize>,
        /// Fraction of the train split held aside for covariance estimation.
        #[arg(long = "cov-split")]
        cov_split: Option<f64>,
        #[arg(long = "max-epochs")]
        max_epochs: Option<usize>,
    },
    /// Hyperparameter selection for the minimax estimator.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Trained model document (required for --kernel learned).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Kernel family: learned | rbf.
        #[arg(long, default_value = "learned")]
        kernel: String,
        /// Alpha grid for the learned family, e.g. --alpha 0.5,1,2,3.
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        /// Bandwidth multiplier grids for the RBF family.
        #[arg(long = "bw-x", value_delimiter = ',')]
        bw_x: Vec<f64>,
        #[arg(long = "bw-z", value_delimiter = ',')]
        bw_z: Vec<f64>,
        /// Kernel recipe: eq9prime | alg1.
        #[arg(long)]
        recipe: Option<String>,
        /// Theory preset: instrument-side exponent alpha' = 1.
        #[arg(long)]
        theory: bool,
        /// Output directory (fits.csv, best_fit.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a fitted estimator on the dataset's test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        /// Output CSV of metric rows.
        #[arg(long)]
        out: PathBuf,
        /// Experiment id recorded in the rows.
        #[arg(long, default_value = "eval")]
        id: String,
    },
    /// Analytic oracle studies: transition | modulus-sweep | lemma2-check.
    Oracle {
        /// Study name.
        study: String,
        #[arg(long, default_value_t = 0.7)]
        rho: f64,
        /// Leading subspace size J for the transition study.
        #[arg(long, default_value_t = 5)]
        j: usize,
        /// Swap offsets 1..=m for the transition study.
        #[arg(long = "m-max", default_value_t = 50)]
        m_max: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Lambda ladder "lo..hi" (log-spaced) for modulus-sweep.
        #[arg(long = "lambda-ladder", default_value = "1e-4..1")]
        lambda_ladder: String,
        #[arg(long = "ladder-points", default_value_t = 17)]
        ladder_points: usize,
        /// Grid side length for lemma2-check pmfs.
        #[arg(long, default_value_t = 8)]
        grid: usize,
        /// Number of random pmfs for lemma2-check.
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cartesian sweep over the configured axes with percentile summaries.
    Sweep {
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        out: PathBuf,
        /// Parallel cell jobs (0 = rayon default).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Print the merged configuration as TOML.
    PrintConfig,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Map usage errors to exit code 1; keep 0 for --help/--version.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, cli_seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match cli_config {
        Some(path) => ExperimentConfig::from_file(path).map_err(Error::InvalidInput)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env();
    if let Some(seed) = cli_seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_data_flags(cfg: &mut ExperimentConfig, flags: &DataFlags) {
    if let Some(v) = &flags.dgp {
        cfg.data.dgp = v.clone();
    }
    if let Some(v) = flags.rho {
        cfg.data.rho = v;
    }
    if let Some(v) = flags.d {
        cfg.data.d = v;
    }
    if let Some(v) = flags.d_ex {
        cfg.data.d_ex = v;
    }
    if let Some(v) = flags.n {
        cfg.data.n = v;
    }
}

fn write_fit_rows(path: &std::path::Path, rows: &[FitRow]) -> Result<()> {
    let mut out =
        String::from("config_id,method,alpha,bw_x,bw_z,lambda,nu,heldout_violation,test_mse\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.config_id,
            r.method,
            opt(r.alpha),
            opt(r.bw_x),
            opt(r.bw_z),
            r.lambda,
            r.nu,
            r.heldout_violation,
            opt(r.test_mse)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::GenData { data, out, force } => {
            apply_data_flags(&mut cfg, &data);
            let ds = match cfg.data.dgp.as_str() {
                "npiv" => datagen::gen_npiv(cfg.data.rho, cfg.data.d, cfg.data.n, cfg.seed)?,
                "proxy" => datagen::gen_proxy(cfg.data.d_ex, cfg.data.n, cfg.seed)?,
                other => return Err(Error::InvalidInput(format!("unknown dgp '{other}'"))),
            };
            datagen::save_dataset(&ds, &out, force)?;
            println!(
                "wrote {} rows (z dim {}, x dim {}) to {}",
                ds.n(),
                ds.z.ncols(),
                ds.x.ncols(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            j,
            cov_split,
            max_epochs,
        } => {
            let ds = datagen::load_dataset(&data)?;
            if !j.is_empty() {
                cfg.spectral.j_grid = j;
            }
            if let Some(me) = max_epochs {
                cfg.spectral.max_epochs = me;
            }
            let cov = cov_split.unwrap_or(cfg.data.cov_split);
            let tc = cfg.train_config(derive_seed(cfg.seed, 0xAA), cov);
            let model = train_spectral(&ds, &tc)?;
            std::fs::create_dir_all(&out)?;
            let doc = model.to_doc();
            std::fs::write(out.join("model.json"), serde_json::to_string(&doc)?)?;
            let mut curve = String::from("epoch,train_risk,val_risk,lambda_max_x,lambda_max_z\n");
            for row in &model.report.curve {
                curve.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.epoch, row.train_risk, row.val_risk, row.lambda_max_x, row.lambda_max_z
                ));
            }
            std::fs::write(out.join("train_curve.csv"), curve)?;
            println!(
                "trained model: J = {} (scores {:?}), held-out divergence estimate {:.4}",
                model.j, model.report.j_scores, model.report.divergence_estimate
            );
            Ok(())
        }
        Command::Fit {
            data,
            model,
            kernel,
            alpha,
            bw_x,
            bw_z,
            recipe,
            theory,
            out,
        } => {
            let ds = datagen::load_dataset(&data)?;
            if !alpha.is_empty() {
                cfg.estimator.alpha_grid = alpha;
            }
            if !bw_x.is_empty() {
                cfg.estimator.bw_x_grid = bw_x;
            }
            if !bw_z.is_empty() {
                cfg.estimator.bw_z_grid = bw_z;
            }
            if let Some(r) = recipe {
                cfg.kernel.recipe = r;
            }
            if theory {
                cfg.kernel.alpha_prime = "one".into();
            }
            let loaded_model: Option<SpectralModel> = match (&kernel[..], &model) {
                ("learned", Some(path)) => {
                    let doc: ModelDoc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
                    Some(SpectralModel::from_doc(&doc)?)
                }
                ("learned", None) => {
                    return Err(Error::InvalidInput(
                        "--kernel learned requires --model".into(),
                    ))
                }
                _ => None,
            };
            let sel = pipeline::fit_method(&cfg, &ds, loaded_model.as_ref(), &kernel)?;
            std::fs::create_dir_all(&out)?;
            write_fit_rows(&out.join("fits.csv"), &sel.rows)?;
            let doc = FitDoc::from_selection(&sel, &kernel);
            std::fs::write(out.join("best_fit.json"), serde_json::to_string(&doc)?)?;
            println!(
                "selected config {}: violation {:.6e} (lambda {:.3e}, nu {:.3e}, base scale {:.3e})",
                sel.best_row.config_id,
                sel.best_row.heldout_violation,
                sel.best_row.lambda,
                sel.best_row.nu,
                sel.base_scale
            );
            Ok(())
        }
        Command::Eval { data, fit, out, id } => {
            let ds = datagen::load_dataset(&data)?;
            let doc: FitDoc = serde_json::from_str(&std::fs::read_to_string(&fit)?)?;
            let (cmm_fit, kernel_z) = doc.rebuild(&ds)?;
            let mut rows: Vec<MetricRow> = Vec::new();
            let d_or_dex = match &ds.meta.dgp {
                datagen::DgpSpec::Npiv { d, .. } => *d,
                datagen::DgpSpec::Proxy { d_ex, .. } => *d_ex,
            };
            let mut push = |method: &str, metric: &str, value: f64| {
                rows.push(MetricRow {
                    experiment_id: id.clone(),
                    method: method.into(),
                    n: ds.n(),
                    d_or_dex,
                    metric: metric.into(),
                    value,
                    seed: ds.seed,
                });
            };
            match &ds.truth {
                Some(datagen::GroundTruth::DoseResponse { .. }) => {
                    let grid = pipeline::treatment_grid(&ds, 21);
                    let curve = pipeline::ate_curve(&cmm_fit, &ds, &grid)?;
                    push(&doc.method, "ate_mae", pipeline::ate_mae(&ds, &grid, &curve)?);
                    let naive = pipeline::naive_curve(&ds, &grid)?;
                    push("naive", "ate_mae", pipeline::ate_mae(&ds, &grid, &naive)?);
                }
                _ => {
                    if let Some(mse) = spectral_cmm::cmm::test_mse(&cmm_fit, &ds)? {
                        push(&doc.method, "test_mse", mse);
                    }
                    let v = spectral_cmm::cmm::heldout_violation(
                        &cmm_fit,
                        ds.z_split(Split::Validation),
                        ds.x_split(Split::Validation),
                        ds.y_split(Split::Validation),
                        &kernel_z,
                        doc.nu,
                    )?;
                    push(&doc.method, "validation_violation", v);
                }
            }
            pipeline::write_metric_rows(&out, &rows)?;
            println!("wrote {} metric rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Oracle {
            study,
            rho,
            j,
            m_max,
            alpha,
            lambda_ladder,
            ladder_points,
            grid,
            count,
            out,
        } => run_oracle_study(
            &cfg,
            &study,
            rho,
            j,
            m_max,
            alpha,
            &lambda_ladder,
            ladder_points,
            grid,
            count,
            &out,
        ),
        Command::Sweep {
            data,
            out,
            jobs,
            force,
        } => {
            apply_data_flags(&mut cfg, &data);
            run_sweep(&cfg, &out, jobs, force)
        }
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_oracle_study(
    cfg: &ExperimentConfig,
    study: &str,
    rho: f64,
    j: usize,
    m_max: usize,
    alpha: f64,
    lambda_ladder: &str,
    ladder_points: usize,
    grid: usize,
    count: usize,
    out: &std::path::Path,
) -> Result<()> {
    let mut csv = String::from("oracle_kind,parameter,j,m,measure,gap,omega,delta,lambda\n");
    match study {
        "transition" => {
            let k = j + m_max + 10;
            let oracle = OperatorOracle::gaussian(rho, k)?;
            for m in 1..=m_max {
                let mut idx: Vec<usize> = (0..j - 1).collect();
                idx.push(j - 1 + m);
                let spec = HypothesisSpec::from_indices(k, &idx)?;
                let measure = illposedness_measure(&oracle, &spec)?;
                let gap = variance_explained_gap(&oracle, &spec)?;
                csv.push_str(&format!("gaussian,{rho},{j},{m},{measure},{gap},,,\n"));
            }
        }
        "modulus-sweep" => {
            let parts: Vec<&str> = lambda_ladder.split("..").collect();
            if parts.len() != 2 {
                return Err(Error::InvalidInput(
                    "lambda ladder must look like '1e-4..1'".into(),
                ));
            }
            let lo: f64 = parts[0]
                .parse()
                .map_err(|_| Error::InvalidInput("bad ladder lower bound".into()))?;
            let hi: f64 = parts[1]
                .parse()
                .map_err(|_| Error::InvalidInput("bad ladder upper bound".into()))?;
            if !(lo > 0.0 && hi > lo) || ladder_points < 2 {
                return Err(Error::InvalidInput(
                    "ladder must be positive and increasing".into(),
                ));
            }
            let oracle = OperatorOracle::gaussian(rho, 40)?;
            let spec = build_ideal_rkhs(&oracle, alpha)?;
            let zero = Array1::zeros(oracle.truncation());
            let delta = 1.0;
            for i in 0..ladder_points {
                let t = i as f64 / (ladder_points - 1) as f64;
                let lambda = lo * (hi / lo).powf(t);
                let omega = modulus_of_continuity(&oracle, &spec, zero.view(), delta, lambda)?;
                let measure = omega * omega / (delta * delta);
                csv.push_str(&format!(
                    "gaussian,{rho},,,{measure},,{omega},{delta},{lambda}\n"
                ));
            }
        }
        "lemma2-check" => {
            // Three-way equivalence on random discrete oracles, plus the
            // trace identity chi2 + 1 = sum s^2. The `measure` column holds
            // the optimality-gap error, `gap` the trace-identity error.
            use ndarray::Array2;
            use rand::Rng;
            for rep in 0..count {
                let mut rng = spectral_cmm::rng::stream(cfg.seed, 0x1E33A + rep as u64);
                let mut pmf = Array2::from_shape_fn((grid, grid), |_| rng.gen_range(0.05..1.0));
                let total = pmf.sum();
                pmf.mapv_inplace(|v| v / total);
                let oracle = OperatorOracle::discrete(pmf.view())?;
                let h0 = oracle.h0_table().unwrap().to_owned();
                let d0 = population_risk_discrete(h0.view(), pmf.view())?;
                let h = Array2::from_shape_fn((grid, grid), |_| rng.gen_range(-1.0..2.0));
                let d = population_risk_discrete(h.view(), pmf.view())?;
                let (p_z, p_x) = oracle.discrete_marginals().unwrap();
                let mut dist = 0.0;
                for zi in 0..grid {
                    for xi in 0..grid {
                        let diff = h[[zi, xi]] - h0[[zi, xi]];
                        dist += p_z[zi] * p_x[xi] * diff * diff;
                    }
                }
                let lemma_err = ((d0 - d) - dist).abs();
                let trace: f64 = oracle.svals.iter().map(|s| s * s).sum();
                let trace_err = (oracle.chi2 + 1.0 - trace).abs();
                csv.push_str(&format!("discrete,{rep},{grid},,{lemma_err},{trace_err},,,\n"));
            }
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown oracle study '{other}' (expected transition, modulus-sweep, lemma2-check)"
            )))
        }
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, csv)?;
    println!("wrote oracle study '{study}' to {}", out.display());
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, out: &std::path::Path, jobs: usize, force: bool) -> Result<()> {
    use rayon::prelude::*;
    if out.join("rows.csv").exists() && !force {
        return Err(Error::Refused(format!(
            "sweep output {} exists (use --force)",
            out.display()
        )));
    }
    std::fs::create_dir_all(out)?;
    let is_proxy = cfg.data.dgp == "proxy";
    let ds_axis: Vec<usize> = if is_proxy {
        cfg.sweep.d_ex_axis.clone()
    } else {
        cfg.sweep.d_axis.clone()
    };
    let rho_axis: Vec<f64> = if is_proxy {
        vec![cfg.data.rho]
    } else {
        cfg.sweep.rho_axis.clone()
    };
    let mut cells = Vec::new();
    for &n in &cfg.sweep.n_axis {
        for &rho in &rho_axis {
            for &dd in &ds_axis {
                for &seed in &cfg.sweep.seeds {
                    cells.push((n, rho, dd, seed));
                }
            }
        }
    }
    let methods: Vec<String> = {
        let mut m = cfg.sweep.methods.clone();
        if is_proxy && !m.iter().any(|s| s == "naive") {
            m.push("naive".into());
        }
        m
    };

    let run_all = || -> Vec<(usize, std::result::Result<Vec<MetricRow>, String>)> {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, &(n, rho, dd, seed))| {
                let (d, d_ex) = if is_proxy { (cfg.data.d, dd) } else { (dd, 0) };
                let id = if is_proxy {
                    format!("proxy_n{n}_dex{dd}")
                } else {
                    format!("npiv_n{n}_rho{rho}_d{dd}")
                };
                let res = pipeline::run_cell(
                    cfg,
                    &id,
                    n,
                    rho,
                    d,
                    d_ex,
                    derive_seed(cfg.seed, seed),
                    &methods,
                )
                .map_err(|e| e.to_string());
                (i, res)
            })
            .collect()
    };
    let results = if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::NumericalFailure(e.to_string()))?
            .install(run_all)
    } else {
        run_all()
    };

    let mut ordered = results;
    ordered.sort_by_key(|(i, _)| *i);
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for (i, res) in ordered {
        match res {
            Ok(mut r) => rows.append(&mut r),
            Err(msg) => {
                let (n, rho, dd, seed) = cells[i];
                failures.push(format!("cell n={n} rho={rho} d={dd} seed={seed}: {msg}"));
            }
        }
    }
    pipeline::write_metric_rows(&out.join("rows.csv"), &rows)?;

    // Percentile summary per (experiment, method, metric).
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry((r.experiment_id.clone(), r.method.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    let mut summary = String::from("experiment_id,method,metric,p25,p50,p75,count\n");
    for ((id, method, metric), mut vals) in groups {
        let p25 = pipeline::percentile(&mut vals.clone(), 25.0);
        let p50 = pipeline::percentile(&mut vals.clone(), 50.0);
        let p75 = pipeline::percentile(&mut vals, 75.0);
        summary.push_str(&format!(
            "{id},{method},{metric},{p25},{p50},{p75},{}\n",
            vals.len()
        ));
    }
    std::fs::write(out.join("summary.csv"), summary)?;
    if !failures.is_empty() {
        std::fs::write(out.join("failures.txt"), failures.join("\n"))?;
        eprintln!("{} cell(s) failed; see failures.txt", failures.len());
    }
    println!(
        "sweep complete: {} cells, {} rows -> {}",
        cells.len(),
        rows.len(),
        out.display()
    );
    Ok(())
}
