//! Shared experiment pipeline: dataset accounting, training, fitting,
//! evaluation metrics, and sweep cells.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use spectral_cmm::cmm::{
    heldout_violation, kernel_ridge_1d, select_hparams, AlphaPrimeRule, BaseScale, CmmFit,
    FitDiagnostics, KernelFamily, SelectOptions, Selection,
};
use spectral_cmm::contrastive::{train_spectral, SpectralModel};
use spectral_cmm::datagen::{
    gen_npiv_with_splits, gen_proxy_with, Dataset, ProxyCoeffs, Split, SplitCounts,
};
use spectral_cmm::error::{Error, Result};
use spectral_cmm::kernels::{KernelDoc, Recipe};
use spectral_cmm::rng::derive_seed;
use spectral_cmm::Kernel;

use crate::config::ExperimentConfig;

/// One result record: `(experiment id, method, n, d or D_ex, metric,
/// value, seed)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment_id: String,
    pub method: String,
    pub n: usize,
    pub d_or_dex: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub fn write_metric_rows(path: &std::path::Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("experiment_id,method,n,d_or_dex,metric,value,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.experiment_id, r.method, r.n, r.d_or_dex, r.metric, r.value, r.seed
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Split accounting for one experiment cell: the run observes `2n` samples
/// (representation half and estimation half), validation carved from each
/// half, plus `test_mult * n` test rows.
pub fn accounting_splits(n: usize, val_fraction: f64, test_mult: f64) -> SplitCounts {
    let v = ((n as f64) * val_fraction).floor() as usize;
    SplitCounts {
        train: n - v,
        covariance: 0,
        estimation: n - v,
        validation: 2 * v,
        test: ((n as f64) * test_mult).round() as usize,
    }
}

/// Generate the dataset for one cell of the experiment grid.
pub fn gen_cell_dataset(
    cfg: &ExperimentConfig,
    n: usize,
    rho: f64,
    d: usize,
    d_ex: usize,
    seed: u64,
) -> Result<Dataset> {
    let splits = accounting_splits(n, cfg.data.val_fraction, cfg.data.test_mult);
    match cfg.data.dgp.as_str() {
        "npiv" => gen_npiv_with_splits(rho, d, splits, seed),
        "proxy" => gen_proxy_with(d_ex, splits, seed, ProxyCoeffs::default()),
        other => Err(Error::InvalidInput(format!("unknown dgp '{other}'"))),
    }
}

pub fn parse_recipe(name: &str) -> Result<Recipe> {
    match name {
        "eq9prime" => Ok(Recipe::Eq9Prime),
        "alg1" => Ok(Recipe::Alg1),
        other => Err(Error::InvalidInput(format!("unknown recipe '{other}'"))),
    }
}

pub fn parse_alpha_prime(name: &str) -> Result<AlphaPrimeRule> {
    match name {
        "alpha_plus_one" => Ok(AlphaPrimeRule::AlphaPlusOne),
        "one" => Ok(AlphaPrimeRule::One),
        other => other
            .parse::<f64>()
            .map(AlphaPrimeRule::Fixed)
            .map_err(|_| Error::InvalidInput(format!("unknown alpha' rule '{other}'"))),
    }
}

pub fn parse_base_scale(name: &str) -> Result<BaseScale> {
    if name == "auto" {
        return Ok(BaseScale::Auto);
    }
    name.parse::<f64>()
        .map(BaseScale::Fixed)
        .map_err(|_| Error::InvalidInput(format!("bad base scale '{name}'")))
}

/// Serialized fitted estimator: enough to reconstruct predictions against
/// the originating dataset (anchors are its estimation split).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDoc {
    pub method: String,
    pub alpha: Option<f64>,
    pub bw_x: Option<f64>,
    pub bw_z: Option<f64>,
    pub lambda: f64,
    pub nu: f64,
    pub base_scale: f64,
    pub heldout_violation: f64,
    pub gamma: Vec<f64>,
    pub kernel_x: KernelDoc,
    pub kernel_z: KernelDoc,
    pub diagnostics: FitDiagnostics,
}

impl FitDoc {
    pub fn from_selection(sel: &Selection, method: &str) -> FitDoc {
        FitDoc {
            method: method.into(),
            alpha: sel.best_row.alpha,
            bw_x: sel.best_row.bw_x,
            bw_z: sel.best_row.bw_z,
            lambda: sel.best_row.lambda,
            nu: sel.best_row.nu,
            base_scale: sel.base_scale,
            heldout_violation: sel.best_row.heldout_violation,
            gamma: sel.best.gamma.to_vec(),
            kernel_x: sel.best.kernel_x.to_doc(),
            kernel_z: sel.kernel_z.to_doc(),
            diagnostics: sel.best.diagnostics.clone(),
        }
    }

    pub fn rebuild(&self, data: &Dataset) -> Result<(CmmFit, Kernel)> {
        let anchors: Array2<f64> = data.x_split(Split::Estimation).to_owned();
        if anchors.nrows() != self.gamma.len() {
            return Err(Error::InvalidInput(format!(
                "fit has {} coefficients but the dataset's estimation split has {} rows",
                self.gamma.len(),
                anchors.nrows()
            )));
        }
        let fit = CmmFit {
            gamma: ndarray::Array1::from_vec(self.gamma.clone()),
            anchors,
            kernel_x: Kernel::from_doc(&self.kernel_x)?,
            lambda: self.lambda,
            nu: self.nu,
            diagnostics: self.diagnostics.clone(),
        };
        Ok((fit, Kernel::from_doc(&self.kernel_z)?))
    }
}

/// Run hyperparameter selection for the requested method.
pub fn fit_method(
    cfg: &ExperimentConfig,
    data: &Dataset,
    model: Option<&SpectralModel>,
    method: &str,
) -> Result<Selection> {
    let grid = cfg.hparam_grid();
    let opts = SelectOptions {
        base_scale: parse_base_scale(&cfg.estimator.base_scale)?,
        eval_grid_test_mse: cfg.estimator.grid_test_mse,
    };
    match method {
        "learned" => {
            let model = model.ok_or_else(|| {
                Error::InvalidInput("learned kernel requires a trained model".into())
            })?;
            let family = KernelFamily::Learned {
                model,
                recipe: parse_recipe(&cfg.kernel.recipe)?,
                alpha_prime: parse_alpha_prime(&cfg.kernel.alpha_prime)?,
            };
            select_hparams(data, &grid, family, &opts)
        }
        "rbf" => select_hparams(data, &grid, KernelFamily::Rbf, &opts),
        other => Err(Error::InvalidInput(format!("unknown method '{other}'"))),
    }
}

/// Dose-response evaluation grid: equally spaced between the 5% and 95%
/// quantiles of the test-split treatment values.
pub fn treatment_grid(data: &Dataset, points: usize) -> Vec<f64> {
    let t_col: Vec<f64> = data
        .x_split(Split::Test)
        .column(0)
        .iter()
        .cloned()
        .collect();
    let mut sorted = t_col;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let idx = (p * (sorted.len() - 1) as f64).round() as usize;
        sorted[idx]
    };
    let (lo, hi) = (q(0.05), q(0.95));
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Average-treatment-effect curve of a fitted estimator:
/// `ATE(t) = mean_i f(t, w_i)` over the test split's proxy rows.
pub fn ate_curve(fit: &CmmFit, data: &Dataset, grid: &[f64]) -> Result<Vec<f64>> {
    let x_test = data.x_split(Split::Test);
    let m = x_test.nrows();
    let dx = x_test.ncols();
    let mut curve = Vec::with_capacity(grid.len());
    for &t in grid {
        let mut queries = x_test.to_owned();
        for i in 0..m {
            queries[[i, 0]] = t;
        }
        let _ = dx;
        let preds = fit.predict(queries.view())?;
        curve.push(preds.sum() / m as f64);
    }
    Ok(curve)
}

/// Dose-response MAE of an estimated curve against the dataset's truth.
pub fn ate_mae(data: &Dataset, grid: &[f64], curve: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (t, est) in grid.iter().zip(curve.iter()) {
        let truth = data
            .dose_response_truth(*t)
            .ok_or_else(|| Error::InvalidInput("dataset has no dose-response truth".into()))?;
        acc += (est - truth).abs();
    }
    Ok(acc / grid.len() as f64)
}

/// Naive outcome-regression baseline: kernel ridge of y on t alone.
pub fn naive_curve(data: &Dataset, grid: &[f64]) -> Result<Vec<f64>> {
    let t = data.x_split(Split::Estimation).column(0).to_owned();
    let y = data.y_split(Split::Estimation).to_owned();
    kernel_ridge_1d(t.view(), y.view(), grid, 1e-2)
}

/// Full pipeline for one sweep cell; returns metric rows.
pub fn run_cell(
    cfg: &ExperimentConfig,
    experiment_id: &str,
    n: usize,
    rho: f64,
    d: usize,
    d_ex: usize,
    seed: u64,
    methods: &[String],
) -> Result<Vec<MetricRow>> {
    let data = gen_cell_dataset(cfg, n, rho, d, d_ex, seed)?;
    let d_or_dex = if cfg.data.dgp == "proxy" { d_ex } else { d };
    let mut rows = Vec::new();
    let mut push = |method: &str, metric: &str, value: f64| {
        rows.push(MetricRow {
            experiment_id: experiment_id.into(),
            method: method.into(),
            n,
            d_or_dex,
            metric: metric.into(),
            value,
            seed,
        });
    };

    let needs_model = methods.iter().any(|m| m == "learned");
    let model = if needs_model {
        let tc = cfg.train_config(derive_seed(seed, 0xAA), cfg.data.cov_split);
        let model = train_spectral(&data, &tc)?;
        push("learned", "divergence_estimate", model.report.divergence_estimate);
        push("learned", "chosen_j", model.j as f64);
        Some(model)
    } else {
        None
    };

    let is_proxy = cfg.data.dgp == "proxy";
    let grid = if is_proxy {
        Some(treatment_grid(&data, 21))
    } else {
        None
    };
    if is_proxy && methods.iter().any(|m| m == "naive") {
        let g = grid.as_ref().unwrap();
        let curve = naive_curve(&data, g)?;
        push("naive", "ate_mae", ate_mae(&data, g, &curve)?);
    }

    for method in methods.iter().filter(|m| *m != "naive") {
        let sel = fit_method(cfg, &data, model.as_ref(), method)?;
        push(method, "heldout_violation", sel.best_row.heldout_violation);
        push(method, "lambda", sel.best_row.lambda);
        push(method, "nu", sel.best_row.nu);
        if method == "learned" {
            push(method, "alpha", sel.best_row.alpha.unwrap_or(f64::NAN));
        }
        if is_proxy {
            let g = grid.as_ref().unwrap();
            let curve = ate_curve(&sel.best, &data, g)?;
            push(method, "ate_mae", ate_mae(&data, g, &curve)?);
        } else if let Some(mse) = spectral_cmm::cmm::test_mse(&sel.best, &data)? {
            push(method, "test_mse", mse);
        } else {
            // No truth available: report the validation violation only.
            let v = heldout_violation(
                &sel.best,
                data.z_split(Split::Validation),
                data.x_split(Split::Validation),
                data.y_split(Split::Validation),
                &sel.kernel_z,
                sel.best_row.nu,
            )?;
            push(method, "validation_violation", v);
        }
    }
    Ok(rows)
}

/// Linear-interpolation percentile of already-collected values.
pub fn percentile(values: &mut Vec<f64>, p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if values.is_empty() {
        return f64::NAN;
    }
    let h = p / 100.0 * (values.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        values[lo]
    } else {
        values[lo] + (h - lo as f64) * (values[hi] - values[lo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accounting_matches_two_n_convention() {
        let s = accounting_splits(1000, 0.2, 2.0);
        assert_eq!(s.train, 800);
        assert_eq!(s.estimation, 800);
        assert_eq!(s.validation, 400);
        assert_eq!(s.test, 2000);
        assert_eq!(s.train + s.estimation + s.validation, 2000);
    }

    #[test]
    fn percentile_median_of_three() {
        let mut v = vec![3.0, 1.0, 2.0];
        assert_eq!(percentile(&mut v, 50.0), 2.0);
        assert_eq!(percentile(&mut v.clone(), 25.0), 1.5);
        assert_eq!(percentile(&mut v.clone(), 75.0), 2.5);
    }
}
