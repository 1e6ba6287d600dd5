//! Experiment configuration: TOML file + CLI flag overrides.
//!
//! Every field has a default; `print-config` emits the merged configuration
//! as TOML that can be fed back through `--config` to reproduce a run. The
//! environment variable `SPECTRAL_CMM_SEED` overrides the global seed.

use serde::{Deserialize, Serialize};
use spectral_cmm::cmm::HparamGrid;
use spectral_cmm::contrastive::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataSection {
    /// "npiv" or "proxy".
    pub dgp: String,
    pub rho: f64,
    pub d: usize,
    pub d_ex: usize,
    /// Accounting size: the run observes 2n samples (n for representation
    /// learning, n for estimation) plus `test_mult * n` test rows.
    pub n: usize,
    /// Fraction of each half carved out for validation.
    pub val_fraction: f64,
    /// Fraction of the representation half held aside for covariance
    /// estimation (0 reuses the training rows).
    pub cov_split: f64,
    pub test_mult: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dgp: "npiv".into(),
            rho: 0.5,
            d: 1,
            d_ex: 0,
            n: 2000,
            val_fraction: 0.2,
            cov_split: 0.0,
            test_mult: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SpectralSection {
    pub j_grid: Vec<usize>,
    pub hidden_widths: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub penalty_weight: f64,
}

impl Default for SpectralSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        SpectralSection {
            j_grid: t.j_grid,
            hidden_widths: t.hidden_widths,
            dropout: t.dropout,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            penalty_weight: t.penalty_weight,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct KernelSection {
    /// "eq9prime" (whitened powers) or "alg1" (sandwich form).
    pub recipe: String,
    /// "alpha_plus_one", "one", or a number.
    pub alpha_prime: String,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection {
            recipe: "eq9prime".into(),
            alpha_prime: "alpha_plus_one".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EstimatorSection {
    pub alpha_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub nu_grid: Vec<f64>,
    pub bw_x_grid: Vec<f64>,
    pub bw_z_grid: Vec<f64>,
    /// "auto" or a positive number: scale multiplied by the lambda/nu grids.
    pub base_scale: String,
    /// Evaluate test MSE for every grid point (needs ground truth).
    pub grid_test_mse: bool,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let g = HparamGrid::default();
        EstimatorSection {
            alpha_grid: g.alpha,
            lambda_grid: g.lambda,
            nu_grid: g.nu,
            bw_x_grid: g.bw_x,
            bw_z_grid: g.bw_z,
            base_scale: "auto".into(),
            grid_test_mse: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SweepSection {
    pub n_axis: Vec<usize>,
    pub rho_axis: Vec<f64>,
    pub d_axis: Vec<usize>,
    pub d_ex_axis: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub jobs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            n_axis: vec![1000, 2000, 4000, 8000, 16000],
            rho_axis: vec![0.5, 0.7, 0.9],
            d_axis: vec![1, 2, 10],
            d_ex_axis: vec![0, 4, 32, 256],
            seeds: vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
            methods: vec!["learned".into(), "rbf".into()],
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub spectral: SpectralSection,
    pub kernel: KernelSection,
    pub estimator: EstimatorSection,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad config: {e}"))
    }

    /// Apply the `SPECTRAL_CMM_SEED` environment override.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var("SPECTRAL_CMM_SEED") {
            if let Ok(seed) = v.parse::<u64>() {
                self.seed = seed;
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self, seed: u64, cov_split: f64) -> TrainConfig {
        TrainConfig {
            j_grid: self.spectral.j_grid.clone(),
            hidden_widths: self.spectral.hidden_widths.clone(),
            dropout: self.spectral.dropout,
            learning_rate: self.spectral.learning_rate,
            weight_decay: self.spectral.weight_decay,
            batch_size: self.spectral.batch_size,
            max_epochs: self.spectral.max_epochs,
            patience: self.spectral.patience,
            penalty_weight: self.spectral.penalty_weight,
            seed,
            cov_split_fraction: cov_split,
        }
    }

    pub fn hparam_grid(&self) -> HparamGrid {
        HparamGrid {
            alpha: self.estimator.alpha_grid.clone(),
            lambda: self.estimator.lambda_grid.clone(),
            nu: self.estimator.nu_grid.clone(),
            bw_x: self.estimator.bw_x_grid.clone(),
            bw_z: self.estimator.bw_z_grid.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_preserves_config() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 42;
        cfg.data.rho = 0.7;
        cfg.estimator.alpha_grid = vec![1.0, 2.0];
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg: ExperimentConfig = toml::from_str("seed = 7\n[data]\nrho = 0.9\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.rho, 0.9);
        assert_eq!(cfg.data.n, 2000);
        assert_eq!(cfg.spectral.batch_size, 512);
    }
}
