//! Oracle-backed validation of the spectral trainer: subspace alignment
//! against the analytic Hermite system, the variance-explained implication
//! on discrete oracles, and the data-generator / oracle consistency checks.

mod common;

use common::heavy_lock;
use ndarray::{Array1, Array2};
use rand::Rng;
use spectral_cmm::contrastive::{
    chi2_plugin, empirical_risk_fn, population_risk_discrete, train_spectral, TrainConfig,
};
use spectral_cmm::datagen::{gen_npiv_with_splits, Split, SplitCounts};
use spectral_cmm::linalg::{svd_full, sym_eig, SymMatrix};
use spectral_cmm::oracles::{hermite_normalized, OperatorOracle};
use spectral_cmm::rng::stream;

/// Orthonormalize columns with respect to the (1/n)-weighted inner product.
fn orthonormal_cols(mut m: Array2<f64>) -> Array2<f64> {
    let n = m.nrows() as f64;
    let cols = m.ncols();
    for c in 0..cols {
        for _ in 0..2 {
            for p in 0..c {
                let proj = m.column(c).dot(&m.column(p)) / n;
                let pc = m.column(p).to_owned();
                m.column_mut(c).scaled_add(-proj, &pc);
            }
        }
        let norm = (m.column(c).dot(&m.column(c)) / n).sqrt();
        m.column_mut(c).mapv_inplace(|v| v / norm);
    }
    m
}

#[test]
fn learned_subspace_aligns_with_hermite_directions() {
    let _guard = heavy_lock();
    // rho = 0.7, J = 5, n = 16000 training rows: the span of whitened
    // psi-features should overlap the leading Hermite span with mean
    // principal-angle cosine >= 0.9.
    let splits = SplitCounts {
        train: 16_000,
        covariance: 0,
        estimation: 0,
        validation: 3000,
        test: 1000,
    };
    let data = gen_npiv_with_splits(0.7, 1, splits, 31).unwrap();
    let cfg = TrainConfig {
        j_grid: vec![5],
        max_epochs: 400,
        patience: 40,
        seed: 13,
        ..TrainConfig::default()
    };
    let model = train_spectral(&data, &cfg).unwrap();

    // Evaluate on the test rows: net features on observed x, Hermite basis
    // on the latent xbar.
    let x_test = data.x_split(Split::Test);
    let feats = model.psi_features(x_test).unwrap();
    let r = data.range(Split::Test);
    let xbar = data.latents.xbar.as_ref().unwrap();
    let latents = xbar.slice(ndarray::s![r]);
    let j = 5;
    let mut hermite = Array2::zeros((latents.len(), j));
    for (row, &v) in latents.iter().enumerate() {
        for col in 0..j {
            hermite[[row, col]] = hermite_normalized(col + 1, v);
        }
    }
    let qa = orthonormal_cols(feats);
    let qb = orthonormal_cols(hermite);
    let n = qa.nrows() as f64;
    let cross = qa.t().dot(&qb) / n;
    let (_, sigma, _) = svd_full(&cross.view()).unwrap();
    let mean_cos = sigma.iter().take(j).sum::<f64>() / j as f64;
    assert!(
        mean_cos >= 0.9,
        "mean principal-angle cosine {mean_cos:.4} < 0.9 (cosines {sigma:?})"
    );
    println!("subspace alignment: mean cosine {mean_cos:.4} (D = {:.4})", model.report.divergence_estimate);
}

#[test]
fn variance_explained_implication_on_discrete_oracle() {
    let _guard = heavy_lock();
    // Train on samples from a discrete joint pmf (one-hot inputs); then
    // sum_j ||E psi~_j||^2 over whitened trained features must sit within
    // eps = D[h0] - D[h_hat] of the leading-J optimum, both evaluated
    // exactly on the oracle.
    let m = 6usize;
    let j = 3usize;
    let mut rng = stream(77, 0);
    let base = Array2::from_shape_fn((m, m), |(a, b)| {
        (-(a as f64 - b as f64).powi(2) / 2.0).exp() + 0.05 * rng.gen_range(0.0..1.0)
    });
    let total = base.sum();
    let pmf = base.mapv(|v| v / total);
    let oracle = OperatorOracle::discrete(pmf.view()).unwrap();

    // Sample (z, x) pairs and one-hot encode.
    let n = 6000;
    let flat: Vec<f64> = pmf.iter().cloned().collect();
    let mut z_rows = Array2::zeros((n, m));
    let mut x_rows = Array2::zeros((n, m));
    for i in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut cell = 0;
        for (idx, &p) in flat.iter().enumerate() {
            acc += p;
            if u <= acc {
                cell = idx;
                break;
            }
            cell = idx;
        }
        let (zi, xi) = (cell / m, cell % m);
        z_rows[[i, zi]] = 1.0;
        x_rows[[i, xi]] = 1.0;
    }
    // Assemble a Dataset-like table by training on explicit splits.
    let splits = SplitCounts {
        train: 4500,
        covariance: 0,
        estimation: 0,
        validation: 1500,
        test: 0,
    };
    let data = spectral_cmm::datagen::Dataset {
        z: z_rows.clone(),
        x: x_rows.clone(),
        y: Array1::zeros(n),
        splits,
        seed: 0,
        m_y: 0.0,
        s_y: 1.0,
        overlap_dim: 0,
        latents: Default::default(),
        truth: None,
        meta: spectral_cmm::datagen::DatasetMeta {
            schema_version: 1,
            dgp: spectral_cmm::datagen::DgpSpec::Npiv { rho: 0.0, d: 1 },
            seed: 0,
            splits,
            d_z: m,
            d_x: m,
            overlap_dim: 0,
            m_y: 0.0,
            s_y: 1.0,
            decoders: vec![],
        },
    };
    let cfg = TrainConfig {
        j_grid: vec![j],
        hidden_widths: vec![32, 32],
        dropout: 0.05,
        max_epochs: 250,
        patience: 30,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = train_spectral(&data, &cfg).unwrap();

    // Tabulate trained features on the categories.
    let eye = Array2::eye(m);
    let phi_tab = model.phi_features(eye.view()).unwrap();
    let psi_tab = model.psi_features(eye.view()).unwrap();
    let (p_z, p_x) = oracle.discrete_marginals().unwrap();
    let (p_z, p_x) = (p_z.to_owned(), p_x.to_owned());

    // Exact population risk of the trained h on the oracle.
    let h_tab = phi_tab.dot(&psi_tab.t());
    let d_hat = population_risk_discrete(h_tab.view(), pmf.view()).unwrap();
    let eps = oracle.chi2 - d_hat;
    assert!(eps >= -1e-10, "population optimality violated: eps = {eps}");

    // Whitened features psi~ under the exact x-marginal.
    let mut sx = Array2::zeros((j, j));
    for a in 0..j {
        for b in 0..j {
            for xi in 0..m {
                sx[[a, b]] += p_x[xi] * psi_tab[[xi, a]] * psi_tab[[xi, b]];
            }
        }
    }
    let eig = sym_eig(&SymMatrix::symmetrized(sx).unwrap()).unwrap();
    let sx_isqrt = eig.reconstruct_with(|l| l.max(1e-12).powf(-0.5));
    let psi_white = psi_tab.dot(&sx_isqrt);

    // sum_j ||E psi~_j||^2 exactly: (E f)(z) = sum_x pmf(z,x)/p_z(z) f(x).
    let mut explained = 0.0;
    for col in 0..j {
        for zi in 0..m {
            let mut ef = 0.0;
            for xi in 0..m {
                ef += pmf[[zi, xi]] / p_z[zi] * psi_white[[xi, col]];
            }
            explained += p_z[zi] * ef * ef;
        }
    }
    let leading: f64 = oracle.svals.iter().take(j).map(|s| s * s).sum();
    let gap = leading - explained;
    assert!(
        gap <= eps + 1e-8,
        "variance-explained gap {gap:.6} exceeds eps {eps:.6}"
    );
    assert!(gap >= -1e-8, "gap should be non-negative, got {gap:.3e}");
    println!(
        "variance-explained implication: gap {gap:.5} <= eps {eps:.5} (chi2 {:.4}, D[h] {:.4})",
        oracle.chi2, d_hat
    );
}

#[test]
fn npiv_latents_score_the_oracle_density_ratio() {
    let _guard = heavy_lock();
    // Feeding the latent pair through the oracle's h0 gives an empirical
    // divergence estimate that is strictly positive and approaches
    // rho^2/(1-rho^2) as n grows; ties datagen to the oracles.
    let rho = 0.5f64;
    let chi2 = rho * rho / (1.0 - rho * rho);
    let oracle = OperatorOracle::gaussian(rho, 10).unwrap();
    let mut errs = Vec::new();
    for &n in &[2000usize, 8000, 32_000] {
        let splits = SplitCounts {
            train: n,
            covariance: 0,
            estimation: 0,
            validation: 0,
            test: 0,
        };
        let data = gen_npiv_with_splits(rho, 1, splits, 51).unwrap();
        let zb = data.latents.zbar.as_ref().unwrap();
        let xb = data.latents.xbar.as_ref().unwrap();
        let z = zb.clone().insert_axis(ndarray::Axis(1));
        let x = xb.clone().insert_axis(ndarray::Axis(1));
        let risk = empirical_risk_fn(
            |a, b| oracle.h0(a[0], b[0]),
            z.view(),
            x.view(),
        )
        .unwrap();
        let est = risk - 1.0;
        assert!(est > 0.0, "divergence estimate at n={n} should be positive");
        errs.push((est - chi2).abs());
    }
    assert!(
        errs[2] <= 0.05,
        "estimate at n=32000 off by {:.4} (> 0.05)",
        errs[2]
    );
    assert!(
        errs[2] <= errs[0] + 0.02,
        "estimate not tightening with n: errors {errs:?}"
    );

    // Plug-in chi-squared estimate from the known ratio (pair U-statistic).
    let splits = SplitCounts {
        train: 8000,
        covariance: 0,
        estimation: 0,
        validation: 0,
        test: 0,
    };
    let data = gen_npiv_with_splits(rho, 1, splits, 53).unwrap();
    let z = data.latents.zbar.as_ref().unwrap().clone().insert_axis(ndarray::Axis(1));
    let x = data.latents.xbar.as_ref().unwrap().clone().insert_axis(ndarray::Axis(1));
    let plug = chi2_plugin(|a, b| oracle.h0(a[0], b[0]), z.view(), x.view()).unwrap();
    assert!(
        (plug - chi2).abs() <= 0.08,
        "plug-in chi2 {plug:.4} vs {chi2:.4}"
    );
    println!("datagen-oracle tie: errors {errs:?}, plug-in chi2 {plug:.4}");
}
