//! End-to-end CLI tests: determinism of the full pipeline, config
//! round-trips, refusal semantics, seed overrides, and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> PathBuf {
    let mut p = PathBuf::from(env!("CARGO_BIN_EXE_spectral-cmm"));
    if !p.exists() {
        p = PathBuf::from("spectral-cmm");
    }
    p
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_env(args: &[&str], key: &str, value: &str) -> std::process::Output {
    Command::new(bin())
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("specmm_cli_{}_{}", std::process::id(), name));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_respects_force() {
    let dir = tmp("gen");
    let ds = dir.join("ds");
    let args = [
        "gen-data", "--dgp", "npiv", "--rho", "0.7", "--d", "1", "--n", "400",
        "--seed", "1", "--out", ds.to_str().unwrap(),
    ];
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = read(&ds.join("train.csv"));

    // Re-run without --force refuses (exit code 1).
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));

    // With --force the bytes are identical.
    let mut forced: Vec<&str> = args.to_vec();
    forced.push("--force");
    let out = run(&forced);
    assert!(out.status.success());
    assert_eq!(first, read(&ds.join("train.csv")));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tmp("pipe");
    let ds = dir.join("ds");
    assert!(run(&[
        "gen-data", "--dgp", "npiv", "--rho", "0.6", "--d", "1", "--n", "900",
        "--seed", "3", "--out", ds.to_str().unwrap(),
    ])
    .status
    .success());

    let run_once = |tag: &str| -> (String, String) {
        let model = dir.join(format!("model_{tag}"));
        let fit = dir.join(format!("fit_{tag}"));
        let eval = dir.join(format!("eval_{tag}.csv"));
        let out = run(&[
            "train", "--data", ds.to_str().unwrap(), "--out", model.to_str().unwrap(),
            "--j", "4", "--max-epochs", "8", "--seed", "5",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = run(&[
            "fit", "--data", ds.to_str().unwrap(), "--model",
            model.join("model.json").to_str().unwrap(), "--kernel", "learned",
            "--alpha", "1,2", "--out", fit.to_str().unwrap(), "--seed", "5",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = run(&[
            "eval", "--data", ds.to_str().unwrap(), "--fit",
            fit.join("best_fit.json").to_str().unwrap(), "--out", eval.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (read(&fit.join("fits.csv")), read(&eval))
    };
    let (fits_a, eval_a) = run_once("a");
    let (fits_b, eval_b) = run_once("b");
    assert_eq!(fits_a, fits_b, "fit tables differ between identical runs");
    assert_eq!(eval_a, eval_b, "eval rows differ between identical runs");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn print_config_roundtrips_and_env_seed_overrides() {
    let dir = tmp("cfg");
    let out = run(&["print-config", "--seed", "17"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 17"));

    // Re-feed the printed config: output is identical.
    let cfg_path = dir.join("cfg.toml");
    std::fs::write(&cfg_path, &text).unwrap();
    let out = run(&["print-config", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), text);

    // Environment seed override.
    let out = run_env(&["print-config"], "SPECTRAL_CMM_SEED", "99");
    assert!(String::from_utf8(out.stdout).unwrap().contains("seed = 99"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn oracle_studies_emit_expected_csv() {
    let dir = tmp("oracle");
    let trans = dir.join("transition.csv");
    let out = run(&[
        "oracle", "transition", "--rho", "0.7", "--j", "5", "--m-max", "10",
        "--out", trans.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = read(&trans);
    assert!(text.starts_with("oracle_kind,parameter,j,m,measure,gap,omega,delta,lambda"));
    assert_eq!(text.lines().count(), 11);
    // Geometric blow-up: measure at M=10 is rho^{-15}.
    let last = text.lines().last().unwrap();
    let measure: f64 = last.split(',').nth(4).unwrap().parse().unwrap();
    let expect = 0.7f64.powi(-15);
    assert!((measure / expect - 1.0).abs() < 1e-9);

    let lem = dir.join("lemma2.csv");
    let out = run(&[
        "oracle", "lemma2-check", "--grid", "8", "--count", "100",
        "--out", lem.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = read(&lem);
    assert_eq!(text.lines().count(), 101);
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let lemma_err: f64 = cols[4].parse().unwrap();
        let trace_err: f64 = cols[5].parse().unwrap();
        assert!(lemma_err <= 1e-8, "lemma identity err {lemma_err}");
        assert!(trace_err <= 1e-10, "trace identity err {trace_err}");
    }

    let md = dir.join("modulus.csv");
    let out = run(&[
        "oracle", "modulus-sweep", "--alpha", "1", "--lambda-ladder", "1e-4..1",
        "--ladder-points", "9", "--out", md.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = read(&md);
    assert_eq!(text.lines().count(), 10);
    // omega'^2/delta^2 * sqrt(lambda) stable within a factor 2.
    let mut consts = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let measure: f64 = cols[4].parse().unwrap();
        let lambda: f64 = cols[8].parse().unwrap();
        consts.push(measure * lambda.sqrt());
    }
    let cmax = consts.iter().cloned().fold(f64::MIN, f64::max);
    let cmin = consts.iter().cloned().fold(f64::MAX, f64::min);
    assert!(cmax / cmin <= 2.0, "modulus constants spread {}", cmax / cmin);

    // Unknown study is a usage error (exit 1).
    let out = run(&["oracle", "nope", "--out", dir.join("x.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sweep_aggregates_percentiles_deterministically() {
    let dir = tmp("sweep");
    let cfg = dir.join("sweep.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 7
[data]
dgp = "npiv"
rho = 0.6
[spectral]
j_grid = [4]
max_epochs = 6
patience = 3
[estimator]
alpha_grid = [1.0]
lambda_grid = [1.0]
nu_grid = [1.0]
[sweep]
n_axis = [300]
rho_axis = [0.6]
d_axis = [1]
seeds = [0, 1, 2]
methods = ["learned"]
"#,
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = run(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
        "--jobs", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read(&out_dir.join("rows.csv"));
    let summary = read(&out_dir.join("summary.csv"));
    assert!(rows.lines().count() > 3);
    assert!(summary.contains("test_mse"));

    // Re-running without --force refuses; with --force reproduces bytes.
    let out = run(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
        "--jobs", "1", "--force",
    ]);
    assert!(out.status.success());
    assert_eq!(rows, read(&out_dir.join("rows.csv")), "sweep rows not deterministic");
    assert_eq!(summary, read(&out_dir.join("summary.csv")));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn fit_requires_model_for_learned_kernel() {
    let dir = tmp("errs");
    let ds = dir.join("ds");
    assert!(run(&[
        "gen-data", "--dgp", "npiv", "--n", "300", "--seed", "2", "--out",
        ds.to_str().unwrap(),
    ])
    .status
    .success());
    let out = run(&[
        "fit", "--data", ds.to_str().unwrap(), "--kernel", "learned", "--out",
        dir.join("f").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires --model"));
    std::fs::remove_dir_all(&dir).unwrap();
}
