//! The spectral representation learning objective and trainer.
//!
//! The factorized density-ratio model `h(z, x) = Phi(z)^T Psi(x)` is trained
//! by stochastic ascent on the U-statistic risk
//!
//! ```text
//! D_n(h) = (2/n) sum_i h(z_i, x_i) - (1/(n(n-1))) sum_{i != j} h(z_i, x_j)^2
//! ```
//!
//! which estimates `D[h] + 1`, where `D[h] = 2 E_joint h - E_prod h^2 - 1`
//! is the population objective whose supremum is the chi-squared divergence
//! between the joint law and the product of marginals. Reported divergence
//! estimates are therefore `risk - 1`.
//!
//! Training follows the practical recipe: minibatch gradients of the
//! within-batch U-statistic, AdamW, early stopping on a held-out risk, model
//! width `J` selected from a grid by the same held-out risk, and feature
//! covariances estimated on a configurable split (reusing the training split
//! by default).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::kernels::estimate_covariance;
use crate::linalg::{sym_eig, SymMatrix};
use crate::nnet::{adamw_step, FeatureNet, Grads, Mode, NetDoc, OptimizerState};
use crate::rng::{derive_seed, stream};

/// Eigenvalue ceiling of the soft covariance-conditioning penalty (the 6/5
/// constraint of the constrained spectral objective).
pub const PENALTY_EIG_CEILING: f64 = 1.2;

const CURVE_SUBSAMPLE: usize = 2048;

/// Trainer configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Candidate output widths; the winner is chosen by held-out risk.
    pub j_grid: Vec<usize>,
    /// Hidden widths shared by both feature nets.
    pub hidden_widths: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience, in epochs without held-out improvement.
    pub patience: usize,
    /// Weight of the soft covariance eigenvalue penalty (0 disables it).
    pub penalty_weight: f64,
    pub seed: u64,
    /// Fraction of the train split held aside for covariance estimation
    /// when the dataset has no dedicated covariance split. 0 reuses the
    /// train split.
    pub cov_split_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            j_grid: vec![10, 20, 30],
            hidden_widths: vec![50, 50, 50],
            dropout: 0.2,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 512,
            max_epochs: 200,
            patience: 20,
            penalty_weight: 0.0,
            seed: 0,
            cov_split_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.j_grid.is_empty() || self.j_grid.iter().any(|&j| j == 0) {
            return Err(Error::InvalidInput("J grid must be non-empty".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidInput("batch size must be >= 2".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidInput("max epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.cov_split_fraction) {
            return Err(Error::InvalidInput(
                "covariance split fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the per-epoch training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_risk: f64,
    pub val_risk: f64,
    pub lambda_max_x: f64,
    pub lambda_max_z: f64,
}

/// Summary of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub chosen_j: usize,
    /// Held-out risk of the restored best epoch (estimates D + 1).
    pub final_val_risk: f64,
    pub final_train_risk: f64,
    /// Divergence estimate: `final_val_risk - 1`.
    pub divergence_estimate: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Curve of the selected J.
    pub curve: Vec<CurveRow>,
    /// Held-out risk per candidate J, in grid order.
    pub j_scores: Vec<(usize, f64)>,
}

/// Trained factorized density-ratio model with feature covariances.
#[derive(Debug, Clone)]
pub struct SpectralModel {
    pub phi: FeatureNet,
    pub psi: FeatureNet,
    pub sigma_z_hat: SymMatrix,
    pub sigma_x_hat: SymMatrix,
    pub j: usize,
    /// Leading x columns that the psi net does NOT see (overlap variables).
    pub overlap_dim: usize,
    pub report: TrainReport,
}

impl SpectralModel {
    /// Instrument-side features on raw z rows.
    pub fn phi_features(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.phi.forward_eval(z)
    }

    /// Treatment-side features on raw x rows; overlap columns are dropped
    /// before the net is applied.
    pub fn psi_features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() < self.overlap_dim {
            return Err(Error::InvalidInput(format!(
                "x has {} columns but overlap_dim is {}",
                x.ncols(),
                self.overlap_dim
            )));
        }
        self.psi
            .forward_eval(x.slice(ndarray::s![.., self.overlap_dim..]))
    }

    /// Density-ratio estimate on paired rows.
    pub fn h_values(&self, z: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let p = self.phi_features(z)?;
        let s = self.psi_features(x)?;
        Ok((&p * &s).sum_axis(Axis(1)))
    }
}

/// Serialization document for a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    pub j: usize,
    pub overlap_dim: usize,
    pub phi: NetDoc,
    pub psi: NetDoc,
    /// Row-major J x J feature covariances.
    pub sigma_z: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub report: TrainReport,
}

impl SpectralModel {
    pub fn to_doc(&self) -> ModelDoc {
        ModelDoc {
            j: self.j,
            overlap_dim: self.overlap_dim,
            phi: self.phi.to_doc(),
            psi: self.psi.to_doc(),
            sigma_z: self.sigma_z_hat.as_array().iter().cloned().collect(),
            sigma_x: self.sigma_x_hat.as_array().iter().cloned().collect(),
            report: self.report.clone(),
        }
    }

    pub fn from_doc(doc: &ModelDoc) -> Result<Self> {
        let j = doc.j;
        let to_sym = |flat: &Vec<f64>| -> Result<SymMatrix> {
            if flat.len() != j * j {
                return Err(Error::InvalidInput("covariance length mismatch".into()));
            }
            SymMatrix::symmetrized(
                Array2::from_shape_vec((j, j), flat.clone())
                    .map_err(|e| Error::InvalidInput(e.to_string()))?,
            )
        };
        Ok(SpectralModel {
            phi: FeatureNet::from_doc(&doc.phi)?,
            psi: FeatureNet::from_doc(&doc.psi)?,
            sigma_z_hat: to_sym(&doc.sigma_z)?,
            sigma_x_hat: to_sym(&doc.sigma_x)?,
            j,
            overlap_dim: doc.overlap_dim,
            report: doc.report.clone(),
        })
    }
}

/// U-statistic risk of factorized features: `(2/n) sum_i <phi_i, psi_i> -
/// (1/(n(n-1))) sum_{i != j} <phi_i, psi_j>^2`. Estimates `D[h] + 1`.
pub fn empirical_risk(phi_feats: ArrayView2<f64>, psi_feats: ArrayView2<f64>) -> Result<f64> {
    let n = phi_feats.nrows();
    if n < 2 || psi_feats.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "need n >= 2 paired rows, got {} and {}",
            n,
            psi_feats.nrows()
        )));
    }
    if phi_feats.ncols() != psi_feats.ncols() {
        return Err(Error::InvalidInput("feature dims differ".into()));
    }
    let mut diag_sum = 0.0;
    let mut diag_sq = 0.0;
    let mut total_sq = 0.0;
    let chunk = 1024;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let h_block = phi_feats
            .slice(ndarray::s![start..end, ..])
            .dot(&psi_feats.t());
        total_sq += h_block.iter().map(|v| v * v).sum::<f64>();
        for (local, i) in (start..end).enumerate() {
            let hii = h_block[[local, i]];
            diag_sum += hii;
            diag_sq += hii * hii;
        }
        start = end;
    }
    let nf = n as f64;
    let risk = 2.0 * diag_sum / nf - (total_sq - diag_sq) / (nf * (nf - 1.0));
    if !risk.is_finite() {
        return Err(Error::NumericalFailure(
            "empirical risk is non-finite".into(),
        ));
    }
    Ok(risk)
}

/// U-statistic risk for an arbitrary (non-factorized) pair function, used to
/// score oracle density ratios on sampled data.
pub fn empirical_risk_fn<F>(h: F, z: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<f64>
where
    F: Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64 + Sync,
{
    let n = z.nrows();
    if n < 2 || x.nrows() != n {
        return Err(Error::InvalidInput("need n >= 2 paired rows".into()));
    }
    let rows: Vec<usize> = (0..n).collect();
    let (diag_sum, off_sq) = rows
        .par_iter()
        .map(|&i| {
            let zi = z.row(i);
            let mut off = 0.0;
            for j in 0..n {
                if j != i {
                    let v = h(zi, x.row(j));
                    off += v * v;
                }
            }
            (h(zi, x.row(i)), off)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let nf = n as f64;
    Ok(2.0 * diag_sum / nf - off_sq / (nf * (nf - 1.0)))
}

/// Plug-in chi-squared estimate from a known density ratio: the pair
/// U-statistic `(1/(n(n-1))) sum_{i != j} (h0(z_i, x_j) - 1)^2`, unbiased
/// for the divergence because off-diagonal pairs are product-measure draws.
pub fn chi2_plugin<F>(h0: F, z: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<f64>
where
    F: Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64 + Sync,
{
    let n = z.nrows();
    if n < 2 || x.nrows() != n {
        return Err(Error::InvalidInput("need n >= 2 paired rows".into()));
    }
    let rows: Vec<usize> = (0..n).collect();
    let total: f64 = rows
        .par_iter()
        .map(|&i| {
            let zi = z.row(i);
            let mut acc = 0.0;
            for j in 0..n {
                if j != i {
                    let d = h0(zi, x.row(j)) - 1.0;
                    acc += d * d;
                }
            }
            acc
        })
        .sum();
    let nf = n as f64;
    Ok(total / (nf * (nf - 1.0)))
}

/// Exact population objective `D[h] = 2 E_joint h - E_prod h^2 - 1` on a
/// finite space, given a table `h[z][x]` and a joint pmf.
pub fn population_risk_discrete(h: ArrayView2<f64>, pmf: ArrayView2<f64>) -> Result<f64> {
    if h.dim() != pmf.dim() {
        return Err(Error::InvalidInput("h table and pmf shapes differ".into()));
    }
    if pmf.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidInput("pmf entries must be >= 0".into()));
    }
    let total: f64 = pmf.sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "pmf sums to {total}, expected 1"
        )));
    }
    let p_z = pmf.sum_axis(Axis(1));
    let p_x = pmf.sum_axis(Axis(0));
    let mut joint = 0.0;
    let mut prod = 0.0;
    for zi in 0..pmf.nrows() {
        for xi in 0..pmf.ncols() {
            joint += pmf[[zi, xi]] * h[[zi, xi]];
            prod += p_z[zi] * p_x[xi] * h[[zi, xi]] * h[[zi, xi]];
        }
    }
    Ok(2.0 * joint - prod - 1.0)
}

/// Output of one minibatch gradient evaluation.
pub struct MinibatchOut {
    pub loss: f64,
    /// Within-batch U-statistic risk (before negation and penalty).
    pub batch_risk: f64,
    pub grads_phi: Grads,
    pub grads_psi: Grads,
    pub lambda_max_x: f64,
    pub lambda_max_z: f64,
}

/// Loss and exact gradients on one minibatch: negative within-batch risk
/// plus the soft covariance-eigenvalue penalty
/// `penalty * (relu(lmax(Sigma_x) - 1.2)^2 + relu(lmax(Sigma_z) - 1.2)^2)`.
pub fn minibatch_loss_and_grads(
    phi_net: &FeatureNet,
    psi_net: &FeatureNet,
    z_batch: ArrayView2<f64>,
    x_batch: ArrayView2<f64>,
    penalty_weight: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<MinibatchOut> {
    let b = z_batch.nrows();
    if b < 2 || x_batch.nrows() != b {
        return Err(Error::InvalidInput("batch size must be >= 2".into()));
    }
    let (p, tape_p) = phi_net.forward(z_batch, mode, rng)?;
    let (s, tape_s) = psi_net.forward(x_batch, mode, rng)?;
    let bf = b as f64;

    let h = p.dot(&s.t());
    let mut risk = 0.0;
    let mut g_h = Array2::zeros((b, b));
    let off_scale = 1.0 / (bf * (bf - 1.0));
    for i in 0..b {
        for j in 0..b {
            if i == j {
                risk += 2.0 * h[[i, i]] / bf;
                g_h[[i, i]] = 2.0 / bf;
            } else {
                risk -= h[[i, j]] * h[[i, j]] * off_scale;
                g_h[[i, j]] = -2.0 * h[[i, j]] * off_scale;
            }
        }
    }
    // d(risk)/dP and d(risk)/dS; loss is the negative.
    let mut d_p = g_h.dot(&s);
    let mut d_s = g_h.t().dot(&p);
    d_p.mapv_inplace(|v| -v);
    d_s.mapv_inplace(|v| -v);

    let mut loss = -risk;
    let mut penalty_side = |feats: &Array2<f64>,
                            grad: &mut Array2<f64>|
     -> Result<f64> {
        let cov = SymMatrix::symmetrized(feats.t().dot(feats) / bf)?;
        let eig = sym_eig(&cov)?;
        let lmax = eig.values[0];
        if penalty_weight > 0.0 {
            let excess = (lmax - PENALTY_EIG_CEILING).max(0.0);
            if excess > 0.0 {
                loss += penalty_weight * excess * excess;
                let v = eig.vectors.column(0).to_owned();
                let fv = feats.dot(&v);
                let coeff = penalty_weight * 2.0 * excess * 2.0 / bf;
                for r in 0..feats.nrows() {
                    for c in 0..feats.ncols() {
                        grad[[r, c]] += coeff * fv[r] * v[c];
                    }
                }
            }
        }
        Ok(lmax)
    };
    let lambda_max_x = penalty_side(&s, &mut d_s)?;
    let lambda_max_z = penalty_side(&p, &mut d_p)?;

    let grads_phi = phi_net.backward(&tape_p, d_p.view())?;
    let grads_psi = psi_net.backward(&tape_s, d_s.view())?;
    Ok(MinibatchOut {
        loss,
        batch_risk: risk,
        grads_phi,
        grads_psi,
        lambda_max_x,
        lambda_max_z,
    })
}

struct SingleRun {
    phi: FeatureNet,
    psi: FeatureNet,
    best_val_risk: f64,
    best_epoch: usize,
    epochs_run: usize,
    final_train_risk: f64,
    curve: Vec<CurveRow>,
}

fn select_rows(m: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

fn train_single_j(
    z_train: ArrayView2<f64>,
    x_train: ArrayView2<f64>,
    z_val: ArrayView2<f64>,
    x_val: ArrayView2<f64>,
    j: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SingleRun> {
    let mut rng = stream(seed, 0);
    let mut phi_widths = vec![z_train.ncols()];
    phi_widths.extend_from_slice(&cfg.hidden_widths);
    phi_widths.push(j);
    let mut psi_widths = vec![x_train.ncols()];
    psi_widths.extend_from_slice(&cfg.hidden_widths);
    psi_widths.push(j);
    let mut phi = FeatureNet::new(&phi_widths, cfg.dropout, &mut rng)?;
    let mut psi = FeatureNet::new(&psi_widths, cfg.dropout, &mut rng)?;
    let mut opt_phi = OptimizerState::new(&phi, cfg.learning_rate, cfg.weight_decay);
    let mut opt_psi = OptimizerState::new(&psi, cfg.learning_rate, cfg.weight_decay);

    let n = z_train.nrows();
    let sub = CURVE_SUBSAMPLE.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, usize, FeatureNet, FeatureNet)> = None;
    let mut curve = Vec::new();
    let mut final_train_risk = f64::NAN;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let zb = select_rows(z_train, chunk);
            let xb = select_rows(x_train, chunk);
            let out = minibatch_loss_and_grads(
                &phi,
                &psi,
                zb.view(),
                xb.view(),
                cfg.penalty_weight,
                Mode::Train,
                &mut rng,
            )?;
            if !out.loss.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "divergent loss at epoch {epoch}"
                )));
            }
            adamw_step(&mut phi, &out.grads_phi, &mut opt_phi)
                .map_err(|e| Error::NumericalFailure(format!("epoch {epoch}: {e}")))?;
            adamw_step(&mut psi, &out.grads_psi, &mut opt_psi)
                .map_err(|e| Error::NumericalFailure(format!("epoch {epoch}: {e}")))?;
        }

        // Epoch diagnostics in eval mode.
        let p_sub = phi.forward_eval(z_train.slice(ndarray::s![0..sub, ..]))?;
        let s_sub = psi.forward_eval(x_train.slice(ndarray::s![0..sub, ..]))?;
        let train_risk = empirical_risk(p_sub.view(), s_sub.view())?;
        let p_val = phi.forward_eval(z_val)?;
        let s_val = psi.forward_eval(x_val)?;
        let val_risk = empirical_risk(p_val.view(), s_val.view())?;
        let lam = |f: &Array2<f64>| -> Result<f64> {
            let cov = SymMatrix::symmetrized(f.t().dot(f) / f.nrows() as f64)?;
            Ok(sym_eig(&cov)?.values[0])
        };
        curve.push(CurveRow {
            epoch,
            train_risk,
            val_risk,
            lambda_max_x: lam(&s_sub)?,
            lambda_max_z: lam(&p_sub)?,
        });
        final_train_risk = train_risk;

        let improved = best.as_ref().map_or(true, |(b, _, _, _)| val_risk > *b);
        if improved {
            best = Some((val_risk, epoch, phi.clone(), psi.clone()));
        } else if epoch - best.as_ref().unwrap().1 >= cfg.patience {
            break;
        }
    }
    let (best_val_risk, best_epoch, phi, psi) = best.unwrap();
    Ok(SingleRun {
        phi,
        psi,
        best_val_risk,
        best_epoch,
        epochs_run,
        final_train_risk,
        curve,
    })
}

/// Train the spectral model on a dataset: stochastic ascent of the
/// U-statistic risk with early stopping on the validation split, J selected
/// from the configured grid, covariances estimated on the covariance split
/// (falling back to a carved fraction of train, or train itself).
///
/// Candidate J values train as independent jobs in parallel; each owns a
/// seed derived from `cfg.seed` and the J value, so results do not depend
/// on scheduling.
pub fn train_spectral(data: &Dataset, cfg: &TrainConfig) -> Result<SpectralModel> {
    cfg.validate()?;
    let train_range = data.range(Split::Train);
    let val_range = data.range(Split::Validation);
    if train_range.is_empty() {
        return Err(Error::InvalidInput("train split is empty".into()));
    }
    if val_range.is_empty() {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }

    let z_all = data.z_split(Split::Train);
    let x_all = data.x_component(Split::Train);
    // Covariance rows: dedicated split if present, else carve the tail of
    // train per the configured fraction, else reuse train.
    let cov_from_dataset = !data.range(Split::Covariance).is_empty();
    let n_train_total = train_range.len();
    let carve = if cov_from_dataset {
        0
    } else {
        ((n_train_total as f64) * cfg.cov_split_fraction).floor() as usize
    };
    if carve >= n_train_total {
        return Err(Error::InvalidInput(
            "covariance carve leaves no training rows".into(),
        ));
    }
    let n_fit = n_train_total - carve;
    let z_train = z_all.slice(ndarray::s![0..n_fit, ..]);
    let x_train = x_all.slice(ndarray::s![0..n_fit, ..]);
    let z_val = data.z_split(Split::Validation);
    let x_val = data.x_component(Split::Validation);

    let runs: Vec<(usize, Result<SingleRun>)> = cfg
        .j_grid
        .par_iter()
        .map(|&j| {
            let seed = derive_seed(cfg.seed, 1000 + j as u64);
            (
                j,
                train_single_j(z_train, x_train, z_val, x_val, j, cfg, seed),
            )
        })
        .collect();

    let mut best_idx: Option<usize> = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut j_scores = Vec::new();
    for (idx, (j, run)) in runs.iter().enumerate() {
        let run = run.as_ref().map_err(clone_err)?;
        j_scores.push((*j, run.best_val_risk));
        if best_idx.is_none() || run.best_val_risk > best_score {
            best_idx = Some(idx);
            best_score = run.best_val_risk;
        }
    }
    let best_idx = best_idx.unwrap();
    let chosen_j = runs[best_idx].0;
    let run = runs.into_iter().nth(best_idx).unwrap().1.unwrap();

    // Covariance estimation rows.
    let (z_cov, x_cov) = if cov_from_dataset {
        (data.z_split(Split::Covariance), data.x_component(Split::Covariance))
    } else if carve > 0 {
        (
            z_all.slice(ndarray::s![n_fit.., ..]),
            x_all.slice(ndarray::s![n_fit.., ..]),
        )
    } else {
        (z_train, x_train)
    };
    let phi_cov = run.phi.forward_eval(z_cov)?;
    let psi_cov = run.psi.forward_eval(x_cov)?;
    let sigma_z_hat = estimate_covariance(phi_cov.view())?;
    let sigma_x_hat = estimate_covariance(psi_cov.view())?;

    let report = TrainReport {
        chosen_j,
        final_val_risk: run.best_val_risk,
        final_train_risk: run.final_train_risk,
        divergence_estimate: run.best_val_risk - 1.0,
        best_epoch: run.best_epoch,
        epochs_run: run.epochs_run,
        curve: run.curve,
        j_scores,
    };
    Ok(SpectralModel {
        phi: run.phi,
        psi: run.psi,
        sigma_z_hat,
        sigma_x_hat,
        j: chosen_j,
        overlap_dim: data.overlap_dim,
        report,
    })
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::InvalidInput(s) => Error::InvalidInput(s.clone()),
        Error::NumericalFailure(s) => Error::NumericalFailure(s.clone()),
        Error::DegenerateMatrix(s) => Error::DegenerateMatrix(s.clone()),
        Error::DegenerateInput(s) => Error::DegenerateInput(s.clone()),
        Error::InfeasibleConstraint(s) => Error::InfeasibleConstraint(s.clone()),
        Error::Unsupported(s) => Error::Unsupported(s.clone()),
        Error::Refused(s) => Error::Refused(s.clone()),
        Error::Io(s) => Error::NumericalFailure(format!("io: {s}")),
        Error::Serde(s) => Error::NumericalFailure(format!("serde: {s}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_npiv_with_splits;
    use crate::datagen::SplitCounts;
    use crate::rng::stream;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn risk_of_zero_function_is_zero() {
        let phi = Array2::zeros((5, 3));
        let psi = Array2::zeros((5, 3));
        assert_eq!(empirical_risk(phi.view(), psi.view()).unwrap(), 0.0);
    }

    #[test]
    fn risk_of_constant_one_is_one() {
        let phi = Array2::ones((8, 1));
        let psi = Array2::ones((8, 1));
        let r = empirical_risk(phi.view(), psi.view()).unwrap();
        assert!((r - 1.0).abs() < 1e-14);
        // Divergence estimate is r - 1 = 0.
    }

    #[test]
    fn risk_hand_arithmetic_n2() {
        // h(z, x) = z*x with samples (1,1), (2,2).
        let phi = array![[1.0], [2.0]];
        let psi = array![[1.0], [2.0]];
        let r = empirical_risk(phi.view(), psi.view()).unwrap();
        assert!((r - 1.0).abs() < 1e-14);
    }

    #[test]
    fn risk_rejects_single_sample() {
        let phi = Array2::ones((1, 1));
        let psi = Array2::ones((1, 1));
        assert!(matches!(
            empirical_risk(phi.view(), psi.view()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn chunked_risk_matches_direct_evaluation() {
        let mut rng = stream(3, 1);
        let n = 1500; // spans multiple chunks
        let phi = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let psi = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let fast = empirical_risk(phi.view(), psi.view()).unwrap();
        let slow = empirical_risk_fn(
            |a, b| a.dot(&b),
            phi.view(),
            psi.view(),
        )
        .unwrap();
        assert!((fast - slow).abs() < 1e-10);
    }

    fn random_pmf(mz: usize, mx: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, 7);
        let mut p = Array2::from_shape_fn((mz, mx), |_| rng.gen_range(0.05..1.0));
        let total = p.sum();
        p.mapv_inplace(|v| v / total);
        p
    }

    fn ratio_table(pmf: &Array2<f64>) -> Array2<f64> {
        let p_z = pmf.sum_axis(Axis(1));
        let p_x = pmf.sum_axis(Axis(0));
        Array2::from_shape_fn(pmf.dim(), |(i, j)| pmf[[i, j]] / (p_z[i] * p_x[j]))
    }

    #[test]
    fn population_risk_constant_under_independence_is_zero() {
        // Product pmf: h0 = 1 and D[1] = 2 - 1 - 1 = 0.
        let pmf = Array2::from_elem((3, 3), 1.0 / 9.0);
        let h = Array2::ones((3, 3));
        let d = population_risk_discrete(h.view(), pmf.view()).unwrap();
        assert!(d.abs() < 1e-14);
    }

    #[test]
    fn population_risk_at_ratio_equals_chi2_sum() {
        for seed in 0..20 {
            let pmf = random_pmf(4, 5, seed);
            let h0 = ratio_table(&pmf);
            let d = population_risk_discrete(h0.view(), pmf.view()).unwrap();
            // Brute-force chi-squared: sum (p_zx - p_z p_x)^2 / (p_z p_x).
            let p_z = pmf.sum_axis(Axis(1));
            let p_x = pmf.sum_axis(Axis(0));
            let mut chi2 = 0.0;
            for i in 0..4 {
                for j in 0..5 {
                    let prod = p_z[i] * p_x[j];
                    let diff = pmf[[i, j]] - prod;
                    chi2 += diff * diff / prod;
                }
            }
            assert!((d - chi2).abs() < 1e-12, "seed {seed}: {d} vs {chi2}");
        }
    }

    #[test]
    fn optimality_gap_equals_squared_distance() {
        // D[h0] - D[h] = ||h - h0||^2 under the product measure, for 50
        // random tables; h0 is also the maximizer.
        let pmf = random_pmf(4, 4, 99);
        let h0 = ratio_table(&pmf);
        let d0 = population_risk_discrete(h0.view(), pmf.view()).unwrap();
        let p_z = pmf.sum_axis(Axis(1));
        let p_x = pmf.sum_axis(Axis(0));
        let mut rng = stream(5, 5);
        for _ in 0..50 {
            let h = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..3.0));
            let d = population_risk_discrete(h.view(), pmf.view()).unwrap();
            let mut dist = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    let diff = h[[i, j]] - h0[[i, j]];
                    dist += p_z[i] * p_x[j] * diff * diff;
                }
            }
            assert!(d0 >= d - 1e-12);
            assert!(((d0 - d) - dist).abs() < 1e-10);
        }
    }

    #[test]
    fn pmf_validation() {
        let h = Array2::ones((2, 2));
        let bad = Array2::from_elem((2, 2), 0.3);
        assert!(matches!(
            population_risk_discrete(h.view(), bad.view()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn full_batch_loss_is_negative_risk_when_unpenalized() {
        let mut rng = stream(21, 0);
        let phi = FeatureNet::new(&[2, 4, 2], 0.0, &mut rng).unwrap();
        let psi = FeatureNet::new(&[2, 4, 2], 0.0, &mut rng).unwrap();
        let z = Array2::from_shape_fn((12, 2), |_| rng.gen_range(-1.0..1.0));
        let x = Array2::from_shape_fn((12, 2), |_| rng.gen_range(-1.0..1.0));
        let out = minibatch_loss_and_grads(
            &phi,
            &psi,
            z.view(),
            x.view(),
            0.0,
            Mode::Eval,
            &mut rng,
        )
        .unwrap();
        let p = phi.forward_eval(z.view()).unwrap();
        let s = psi.forward_eval(x.view()).unwrap();
        let risk = empirical_risk(p.view(), s.view()).unwrap();
        assert!((out.loss + risk).abs() < 1e-12);
        assert!((out.batch_risk - risk).abs() < 1e-12);
    }

    #[test]
    fn penalty_is_inactive_below_ceiling() {
        let mut rng = stream(22, 0);
        let mut phi = FeatureNet::new(&[1, 1], 0.0, &mut rng).unwrap();
        let mut psi = FeatureNet::new(&[1, 1], 0.0, &mut rng).unwrap();
        // Features 0.5 * input on both sides: covariance eigenvalues well
        // below the 1.2 ceiling for inputs in [-1, 1].
        phi.set_param(0, 0.5);
        phi.set_param(1, 0.0);
        psi.set_param(0, 0.5);
        psi.set_param(1, 0.0);
        let z = array![[1.0], [-1.0], [0.5]];
        let x = array![[0.5], [1.0], [-0.5]];
        let with = minibatch_loss_and_grads(
            &phi, &psi, z.view(), x.view(), 10.0, Mode::Eval, &mut rng,
        )
        .unwrap();
        let without = minibatch_loss_and_grads(
            &phi, &psi, z.view(), x.view(), 0.0, Mode::Eval, &mut rng,
        )
        .unwrap();
        assert_eq!(with.loss, without.loss);
        assert!(with.lambda_max_x <= PENALTY_EIG_CEILING);
    }

    #[test]
    fn minibatch_gradients_match_finite_differences() {
        // Tiny 2-feature model; scaled-up weights so the covariance penalty
        // is active, making the test cover both loss terms.
        for seed in 0..20u64 {
            let mut rng = stream(400 + seed, 0);
            let mut phi = FeatureNet::new(&[2, 3, 2], 0.0, &mut rng).unwrap();
            let mut psi = FeatureNet::new(&[2, 3, 2], 0.0, &mut rng).unwrap();
            for i in 0..phi.num_params() {
                phi.set_param(i, phi.get_param(i) * 3.0);
            }
            for i in 0..psi.num_params() {
                psi.set_param(i, psi.get_param(i) * 3.0);
            }
            let z = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.5..1.5));
            let x = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.5..1.5));
            let pw = 0.7;
            let out = minibatch_loss_and_grads(
                &phi, &psi, z.view(), x.view(), pw, Mode::Eval, &mut rng,
            )
            .unwrap();
            let h = 1e-5;
            let loss_at = |phi: &FeatureNet, psi: &FeatureNet| {
                let mut r = stream(0, 0);
                minibatch_loss_and_grads(phi, psi, z.view(), x.view(), pw, Mode::Eval, &mut r)
                    .unwrap()
                    .loss
            };
            for i in 0..phi.num_params() {
                let mut probe = phi.clone();
                let orig = probe.get_param(i);
                probe.set_param(i, orig + h);
                let up = loss_at(&probe, &psi);
                probe.set_param(i, orig - h);
                let down = loss_at(&probe, &psi);
                let fd = (up - down) / (2.0 * h);
                let an = FeatureNet::get_grad(&out.grads_phi, i);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "seed {seed} phi param {i}: {an} vs {fd}"
                );
            }
            for i in 0..psi.num_params() {
                let mut probe = psi.clone();
                let orig = probe.get_param(i);
                probe.set_param(i, orig + h);
                let up = loss_at(&phi, &probe);
                probe.set_param(i, orig - h);
                let down = loss_at(&phi, &probe);
                let fd = (up - down) / (2.0 * h);
                let an = FeatureNet::get_grad(&out.grads_psi, i);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "seed {seed} psi param {i}: {an} vs {fd}"
                );
            }
        }
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            j_grid: vec![3],
            hidden_widths: vec![16, 16],
            dropout: 0.1,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            max_epochs: 15,
            patience: 5,
            penalty_weight: 0.0,
            seed,
            cov_split_fraction: 0.0,
        }
    }

    #[test]
    fn trainer_is_deterministic_and_improves_heldout() {
        let splits = SplitCounts {
            train: 400,
            covariance: 0,
            estimation: 0,
            validation: 150,
            test: 0,
        };
        let data = gen_npiv_with_splits(0.6, 1, splits, 17).unwrap();
        let m1 = train_spectral(&data, &tiny_config(5)).unwrap();
        let m2 = train_spectral(&data, &tiny_config(5)).unwrap();
        for i in 0..m1.phi.num_params() {
            assert_eq!(
                m1.phi.get_param(i).to_bits(),
                m2.phi.get_param(i).to_bits()
            );
        }
        // Held-out risk at the stopping epoch is at least the epoch-1 value.
        let first = m1.report.curve.first().unwrap().val_risk;
        assert!(m1.report.final_val_risk >= first - 1e-12);
        assert_eq!(m1.j, 3);
        assert!(m1.report.final_val_risk.is_finite());
        // Covariances are PSD after projection.
        let eig = sym_eig(&m1.sigma_x_hat).unwrap();
        assert!(eig.values.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn trainer_uses_cov_split_when_requested() {
        let splits = SplitCounts {
            train: 300,
            covariance: 100,
            estimation: 0,
            validation: 100,
            test: 0,
        };
        let data = gen_npiv_with_splits(0.5, 1, splits, 3).unwrap();
        let model = train_spectral(&data, &tiny_config(1)).unwrap();
        assert_eq!(model.j, 3);
        // And carving from train works when no covariance split exists.
        let splits2 = SplitCounts {
            train: 400,
            covariance: 0,
            estimation: 0,
            validation: 100,
            test: 0,
        };
        let data2 = gen_npiv_with_splits(0.5, 1, splits2, 3).unwrap();
        let mut cfg = tiny_config(1);
        cfg.cov_split_fraction = 0.5;
        let model2 = train_spectral(&data2, &cfg).unwrap();
        assert_eq!(model2.j, 3);
    }

    #[test]
    fn trainer_rejects_empty_splits() {
        let splits = SplitCounts {
            train: 100,
            covariance: 0,
            estimation: 0,
            validation: 0,
            test: 0,
        };
        let data = gen_npiv_with_splits(0.5, 1, splits, 3).unwrap();
        assert!(matches!(
            train_spectral(&data, &tiny_config(1)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn model_doc_roundtrip() {
        let splits = SplitCounts {
            train: 200,
            covariance: 0,
            estimation: 0,
            validation: 80,
            test: 0,
        };
        let data = gen_npiv_with_splits(0.5, 1, splits, 8).unwrap();
        let model = train_spectral(&data, &tiny_config(2)).unwrap();
        let json = serde_json::to_string(&model.to_doc()).unwrap();
        let doc: ModelDoc = serde_json::from_str(&json).unwrap();
        let back = SpectralModel::from_doc(&doc).unwrap();
        let z = data.z_split(Split::Validation);
        let a = model.phi_features(z).unwrap();
        let b = back.phi_features(z).unwrap();
        assert_eq!(a, b);
    }
}
