//! Learned-kernel construction and evaluation, fixed-form RBF baselines,
//! product kernels for overlap variables, and Gram-matrix assembly.
//!
//! A learned kernel is `k(a, b) = feature(a)^T M feature(b)` with a frozen
//! feature net and a symmetric PSD middle matrix built from the empirical
//! feature covariances. Two construction recipes are first-class:
//!
//! - the whitened-power form
//!   `M = Sx^{-1/2} (Sx^{1/2} Sz Sx^{1/2})^alpha Sx^{-1/2}`
//!   (and its z-side mirror with exponent alpha'), and
//! - the sandwich form `M = Sx^{(alpha-1)/2} Sz^alpha Sx^{(alpha-1)/2}` with
//!   z-side `M = Sz^{alpha/2} Sx^{alpha+1} Sz^{alpha/2}`.
//!
//! The two coincide at alpha = 1 and generally differ when the covariances
//! do not commute; both are kept because each matches a different part of
//! the estimation protocol.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::SpectralModel;
use crate::error::{Error, Result};
use crate::linalg::{frac_power, psd_project, SymMatrix};
use crate::nnet::{FeatureNet, NetDoc};

/// Which side of the model a learned kernel lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSide {
    X,
    Z,
}

/// Construction recipe tag recorded on learned kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Eq9Prime,
    Eq11,
    Alg1,
}

/// Learned kernel: frozen feature net and symmetric PSD middle matrix.
#[derive(Debug, Clone)]
pub struct LearnedKernel {
    pub side: KernelSide,
    pub recipe: Recipe,
    pub alpha: f64,
    pub net: FeatureNet,
    pub m: SymMatrix,
}

impl LearnedKernel {
    /// Feature matrix (n x J) on raw points.
    pub fn features(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.forward_eval(points)
    }

    /// The factor `A = M^{1/2} F^T`-style representation: returns
    /// `features * M^{1/2}` (n x J), so that the Gram matrix is `B B^T`.
    pub fn half_features(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        let root = frac_power(&self.m, 0.5)?;
        Ok(self.features(points)?.dot(&root.as_array()))
    }
}

/// RBF kernel `exp(-||a - b||^2 / (2 bandwidth^2))`; `k(a, a) = 1`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RbfKernel {
    pub bandwidth: f64,
}

impl RbfKernel {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidInput(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(RbfKernel { bandwidth })
    }
}

/// A kernel usable by the minimax estimator. `Product` splits its input at
/// a column index and multiplies the factor kernels; `One` is the constant
/// unit kernel (handy as a trivial factor).
#[derive(Debug, Clone)]
pub enum Kernel {
    Rbf(RbfKernel),
    Learned(LearnedKernel),
    Product {
        first: Box<Kernel>,
        second: Box<Kernel>,
        /// Input columns [0, split) feed `first`, the rest feed `second`.
        split: usize,
    },
    One,
}

/// Product kernel over concatenated inputs: columns `[0, dims_first)` feed
/// `k_first`, the remainder feeds `k_second`. PSD because a pointwise
/// product of PSD kernels is PSD.
pub fn product_kernel(k_first: Kernel, k_second: Kernel, dims_first: usize) -> Kernel {
    Kernel::Product {
        first: Box::new(k_first),
        second: Box::new(k_second),
        split: dims_first,
    }
}

impl Kernel {
    /// Pointwise evaluation.
    pub fn evaluate(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::InvalidInput(format!(
                "point dims differ: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        match self {
            Kernel::Rbf(k) => {
                let d2: f64 = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                Ok((-d2 / (2.0 * k.bandwidth * k.bandwidth)).exp())
            }
            Kernel::Learned(k) => {
                let fa = k.features(a.insert_axis(Axis(0)))?;
                let fb = k.features(b.insert_axis(Axis(0)))?;
                Ok(fa.row(0).dot(&k.m.as_array().dot(&fb.row(0))))
            }
            Kernel::Product {
                first,
                second,
                split,
            } => {
                if a.len() < *split {
                    return Err(Error::InvalidInput(format!(
                        "product kernel split {split} exceeds input dim {}",
                        a.len()
                    )));
                }
                let (a1, a2) = a.split_at(Axis(0), *split);
                let (b1, b2) = b.split_at(Axis(0), *split);
                Ok(first.evaluate(a1, b1)? * second.evaluate(a2, b2)?)
            }
            Kernel::One => Ok(1.0),
        }
    }

    fn expected_dim_hint(&self) -> Option<usize> {
        match self {
            Kernel::Learned(k) => Some(k.net.input_dim()),
            Kernel::Product {
                first,
                second,
                split,
            } => match (first.expected_dim_hint(), second.expected_dim_hint()) {
                (Some(_), Some(s)) => Some(split + s),
                _ => None,
            },
            _ => None,
        }
    }
}

fn rbf_gram(k: &RbfKernel, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let na: Array1<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Array1<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    // Allocate C-order explicitly so the row-parallel rescale below can
    // slice the buffer.
    let mut g = Array2::zeros((a.nrows(), b.nrows()));
    ndarray::linalg::general_mat_mul(1.0, &a, &b.t(), 0.0, &mut g);
    let denom = 2.0 * k.bandwidth * k.bandwidth;
    let chunks: Vec<(usize, &mut [f64])> = {
        let cols = b.nrows();
        g.as_slice_mut()
            .unwrap()
            .chunks_mut(cols)
            .enumerate()
            .collect()
    };
    // Parallel over rows for large Grams; cheap either way.
    chunks.into_par_iter().for_each(|(i, row)| {
        for (j, val) in row.iter_mut().enumerate() {
            let d2 = (na[i] + nb[j] - 2.0 * *val).max(0.0);
            *val = (-d2 / denom).exp();
        }
    });
    g
}

/// Gram matrix `G[i][j] = k(a_i, b_j)`. When `a` and `b` are the same point
/// set the result is symmetrized.
pub fn gram(kernel: &Kernel, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::InvalidInput(format!(
            "point dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if let Some(d) = kernel.expected_dim_hint() {
        if a.ncols() != d {
            return Err(Error::InvalidInput(format!(
                "kernel expects {d}-dimensional points, got {}",
                a.ncols()
            )));
        }
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Ok(Array2::zeros((a.nrows(), b.nrows())));
    }
    let mut g = match kernel {
        Kernel::Rbf(k) => rbf_gram(k, a, b),
        Kernel::Learned(k) => {
            let fa = k.features(a)?;
            let fb = k.features(b)?;
            fa.dot(&k.m.as_array()).dot(&fb.t())
        }
        Kernel::Product {
            first,
            second,
            split,
        } => {
            if a.ncols() < *split {
                return Err(Error::InvalidInput(format!(
                    "product kernel split {split} exceeds input dim {}",
                    a.ncols()
                )));
            }
            let g1 = gram(first, a.slice(ndarray::s![.., ..*split]), b.slice(ndarray::s![.., ..*split]))?;
            let g2 = gram(
                second,
                a.slice(ndarray::s![.., *split..]),
                b.slice(ndarray::s![.., *split..]),
            )?;
            &g1 * &g2
        }
        Kernel::One => Array2::ones((a.nrows(), b.nrows())),
    };
    let same_points = a.nrows() == b.nrows()
        && (std::ptr::eq(a.as_ptr(), b.as_ptr()) && a.strides() == b.strides() || a == b);
    if same_points {
        g = 0.5 * (&g + &g.t());
    }
    Ok(g)
}

/// Uncentered second-moment matrix `(1/n) sum_i f_i f_i^T` of feature rows,
/// PSD-projected against round-off.
pub fn estimate_covariance(features: ArrayView2<f64>) -> Result<SymMatrix> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::InvalidInput(
            "need at least one row to estimate a covariance".into(),
        ));
    }
    let cov = features.t().dot(&features) / n as f64;
    psd_project(&SymMatrix::symmetrized(cov)?)
}

/// Middle matrix of the whitened-power x-side kernel:
/// `Sx^{-1/2} (Sx^{1/2} Sz Sx^{1/2})^alpha Sx^{-1/2}`.
pub fn middle_matrix_whitened(
    sigma_own: &SymMatrix,
    sigma_other: &SymMatrix,
    alpha: f64,
) -> Result<SymMatrix> {
    let own_sqrt = frac_power(sigma_own, 0.5)?;
    let own_isqrt = frac_power(sigma_own, -0.5)?;
    let inner = own_sqrt
        .as_array()
        .dot(&sigma_other.as_array())
        .dot(&own_sqrt.as_array());
    let inner_pow = frac_power(&psd_project(&SymMatrix::symmetrized(inner)?)?, alpha)?;
    let m = own_isqrt
        .as_array()
        .dot(&inner_pow.as_array())
        .dot(&own_isqrt.as_array());
    psd_project(&SymMatrix::symmetrized(m)?)
}

/// Middle matrix of the sandwich-form x-side kernel:
/// `Sx^{(alpha-1)/2} Sz^alpha Sx^{(alpha-1)/2}`.
pub fn middle_matrix_sandwich_x(
    sigma_x: &SymMatrix,
    sigma_z: &SymMatrix,
    alpha: f64,
) -> Result<SymMatrix> {
    let outer = frac_power(sigma_x, (alpha - 1.0) / 2.0)?;
    let mid = frac_power(sigma_z, alpha)?;
    let m = outer.as_array().dot(&mid.as_array()).dot(&outer.as_array());
    psd_project(&SymMatrix::symmetrized(m)?)
}

/// Middle matrix of the sandwich-form z-side kernel:
/// `Sz^{alpha/2} Sx^{alpha+1} Sz^{alpha/2}`.
pub fn middle_matrix_sandwich_z(
    sigma_x: &SymMatrix,
    sigma_z: &SymMatrix,
    alpha: f64,
) -> Result<SymMatrix> {
    let outer = frac_power(sigma_z, alpha / 2.0)?;
    let mid = frac_power(sigma_x, alpha + 1.0)?;
    let m = outer.as_array().dot(&mid.as_array()).dot(&outer.as_array());
    psd_project(&SymMatrix::symmetrized(m)?)
}

/// Treatment-side learned kernel in the whitened-power form.
pub fn build_kx(model: &SpectralModel, alpha: f64) -> Result<LearnedKernel> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let m = middle_matrix_whitened(&model.sigma_x_hat, &model.sigma_z_hat, alpha)?;
    Ok(LearnedKernel {
        side: KernelSide::X,
        recipe: Recipe::Eq9Prime,
        alpha,
        net: model.psi.clone(),
        m,
    })
}

/// Instrument-side learned kernel: mirror of [`build_kx`] with the roles of
/// the two sides swapped and exponent `alpha_prime`.
pub fn build_kz(model: &SpectralModel, alpha_prime: f64) -> Result<LearnedKernel> {
    if !(alpha_prime > 0.0) {
        return Err(Error::InvalidInput(format!(
            "alpha' must be positive, got {alpha_prime}"
        )));
    }
    let m = middle_matrix_whitened(&model.sigma_z_hat, &model.sigma_x_hat, alpha_prime)?;
    Ok(LearnedKernel {
        side: KernelSide::Z,
        recipe: Recipe::Eq11,
        alpha: alpha_prime,
        net: model.phi.clone(),
        m,
    })
}

/// Sandwich-form kernel pair; the z side uses the `alpha + 1` convention.
pub fn build_alg1_pair(model: &SpectralModel, alpha: f64) -> Result<(LearnedKernel, LearnedKernel)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let mx = middle_matrix_sandwich_x(&model.sigma_x_hat, &model.sigma_z_hat, alpha)?;
    let mz = middle_matrix_sandwich_z(&model.sigma_x_hat, &model.sigma_z_hat, alpha)?;
    Ok((
        LearnedKernel {
            side: KernelSide::X,
            recipe: Recipe::Alg1,
            alpha,
            net: model.psi.clone(),
            m: mx,
        },
        LearnedKernel {
            side: KernelSide::Z,
            recipe: Recipe::Alg1,
            alpha,
            net: model.phi.clone(),
            m: mz,
        },
    ))
}

/// Median of all pairwise Euclidean distances (i < j).
pub fn median_heuristic(points: ArrayView2<f64>) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(
            "median heuristic needs at least two points".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    let len = dists.len();
    let median = if len % 2 == 1 {
        let (_, mid, _) = dists.select_nth_unstable_by(len / 2, |a, b| a.partial_cmp(b).unwrap());
        *mid
    } else {
        let (lower, mid, _) =
            dists.select_nth_unstable_by(len / 2, |a, b| a.partial_cmp(b).unwrap());
        let lo = lower.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + *mid)
    };
    if median <= 0.0 {
        return Err(Error::DegenerateInput(
            "all points identical; median pairwise distance is zero".into(),
        ));
    }
    Ok(median)
}

/// Serialization document for kernels: recipe tag, alpha, and middle matrix
/// as a row-major array (learned); bandwidth (RBF); recursive for products.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelDoc {
    Rbf {
        bandwidth: f64,
    },
    Learned {
        side: KernelSide,
        recipe: Recipe,
        alpha: f64,
        j: usize,
        m: Vec<f64>,
        net: NetDoc,
    },
    Product {
        first: Box<KernelDoc>,
        second: Box<KernelDoc>,
        split: usize,
    },
    One,
}

impl Kernel {
    pub fn to_doc(&self) -> KernelDoc {
        match self {
            Kernel::Rbf(k) => KernelDoc::Rbf {
                bandwidth: k.bandwidth,
            },
            Kernel::Learned(k) => KernelDoc::Learned {
                side: k.side,
                recipe: k.recipe,
                alpha: k.alpha,
                j: k.m.dim(),
                m: k.m.as_array().iter().cloned().collect(),
                net: k.net.to_doc(),
            },
            Kernel::Product {
                first,
                second,
                split,
            } => KernelDoc::Product {
                first: Box::new(first.to_doc()),
                second: Box::new(second.to_doc()),
                split: *split,
            },
            Kernel::One => KernelDoc::One,
        }
    }

    pub fn from_doc(doc: &KernelDoc) -> Result<Self> {
        Ok(match doc {
            KernelDoc::Rbf { bandwidth } => Kernel::Rbf(RbfKernel::new(*bandwidth)?),
            KernelDoc::Learned {
                side,
                recipe,
                alpha,
                j,
                m,
                net,
            } => {
                if m.len() != j * j {
                    return Err(Error::InvalidInput("middle matrix length mismatch".into()));
                }
                let arr = Array2::from_shape_vec((*j, *j), m.clone())
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
                Kernel::Learned(LearnedKernel {
                    side: *side,
                    recipe: *recipe,
                    alpha: *alpha,
                    net: FeatureNet::from_doc(net)?,
                    m: SymMatrix::symmetrized(arr)?,
                })
            }
            KernelDoc::Product {
                first,
                second,
                split,
            } => Kernel::Product {
                first: Box::new(Kernel::from_doc(first)?),
                second: Box::new(Kernel::from_doc(second)?),
                split: *split,
            },
            KernelDoc::One => Kernel::One,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::{SpectralModel, TrainReport};
    use crate::linalg::{rel_frob_dist, sym_eig};
    use crate::rng::stream;
    use ndarray::array;
    use rand::Rng;

    fn const_net(in_dim: usize, j: usize, value: f64) -> FeatureNet {
        let mut rng = stream(0, 0);
        let mut net = FeatureNet::new(&[in_dim, j], 0.0, &mut rng).unwrap();
        for i in 0..net.num_params() {
            net.set_param(i, 0.0);
        }
        // Bias parameters are the trailing `j` flat entries of this net.
        for b in 0..j {
            net.set_param(in_dim * j + b, value);
        }
        net
    }

    fn empty_report(j: usize) -> TrainReport {
        TrainReport {
            chosen_j: j,
            final_val_risk: f64::NAN,
            final_train_risk: f64::NAN,
            divergence_estimate: f64::NAN,
            best_epoch: 0,
            epochs_run: 0,
            curve: vec![],
            j_scores: vec![],
        }
    }

    /// Model with random frozen nets and the given covariances.
    fn frozen_model(
        dz: usize,
        dx: usize,
        j: usize,
        sigma_z: SymMatrix,
        sigma_x: SymMatrix,
        seed: u64,
    ) -> SpectralModel {
        let mut rng = stream(seed, 0);
        SpectralModel {
            phi: FeatureNet::new(&[dz, 6, j], 0.0, &mut rng).unwrap(),
            psi: FeatureNet::new(&[dx, 6, j], 0.0, &mut rng).unwrap(),
            sigma_z_hat: sigma_z,
            sigma_x_hat: sigma_x,
            j,
            overlap_dim: 0,
            report: empty_report(j),
        }
    }

    fn random_cov(j: usize, seed: u64) -> SymMatrix {
        let mut rng = stream(seed, 3);
        let b = Array2::from_shape_fn((j, j), |_| rng.gen_range(-1.0..1.0));
        let mut c = b.t().dot(&b) / j as f64;
        for i in 0..j {
            c[[i, i]] += 0.3;
        }
        SymMatrix::symmetrized(c).unwrap()
    }

    #[test]
    fn covariance_examples() {
        // Single sample v -> v v^T.
        let v = array![[1.0, 2.0]];
        let c = estimate_covariance(v.view()).unwrap();
        assert!((c.as_array()[[0, 0]] - 1.0).abs() < 1e-14);
        assert!((c.as_array()[[0, 1]] - 2.0).abs() < 1e-14);
        assert!((c.as_array()[[1, 1]] - 4.0).abs() < 1e-14);

        // All rows e1 -> diag(1, 0, ...).
        let e1 = Array2::from_shape_fn((5, 3), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let c = estimate_covariance(e1.view()).unwrap();
        assert!(rel_frob_dist(&c.as_array(), &SymMatrix::from_diag(&[1.0, 0.0, 0.0]).as_array()) < 1e-12);

        // Rows (1,0) and (0,1) -> I/2.
        let two = array![[1.0, 0.0], [0.0, 1.0]];
        let c = estimate_covariance(two.view()).unwrap();
        assert!(rel_frob_dist(&c.as_array(), &(0.5 * Array2::<f64>::eye(2)).view()) < 1e-12);
    }

    #[test]
    fn kx_alpha_one_collapses_to_sigma_z() {
        let j = 4;
        let model = frozen_model(2, 2, j, random_cov(j, 1), random_cov(j, 2), 7);
        let k = build_kx(&model, 1.0).unwrap();
        assert!(rel_frob_dist(&k.m.as_array(), &model.sigma_z_hat.as_array()) < 1e-10);
        let kz = build_kz(&model, 1.0).unwrap();
        assert!(rel_frob_dist(&kz.m.as_array(), &model.sigma_x_hat.as_array()) < 1e-10);
    }

    #[test]
    fn scalar_constant_features_give_unit_kernel() {
        // J = 1 with Phi = Psi = 1: covariances are [1] and k = 1 always.
        let mut rng = stream(1, 1);
        let model = SpectralModel {
            phi: const_net(2, 1, 1.0),
            psi: const_net(2, 1, 1.0),
            sigma_z_hat: SymMatrix::from_diag(&[1.0]),
            sigma_x_hat: SymMatrix::from_diag(&[1.0]),
            j: 1,
            overlap_dim: 0,
            report: empty_report(1),
        };
        for alpha in [0.5, 1.0, 2.0, 3.0] {
            let k = Kernel::Learned(build_kx(&model, alpha).unwrap());
            let a = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-2.0..2.0));
            let g = gram(&k, a.view(), a.view()).unwrap();
            for v in g.iter() {
                assert!((v - 1.0).abs() < 1e-10, "alpha {alpha}: {v}");
            }
            let (kx1, kz1) = build_alg1_pair(&model, alpha).unwrap();
            assert!((kx1.m.as_array()[[0, 0]] - 1.0).abs() < 1e-10);
            assert!((kz1.m.as_array()[[0, 0]] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn whitened_power_two_routes_agree() {
        // Composition of fractional powers vs. direct eigendecomposition of
        // the whitened operator.
        let j = 5;
        let sx = random_cov(j, 11);
        let sz = random_cov(j, 12);
        let m1 = middle_matrix_whitened(&sx, &sz, 2.0).unwrap();
        let sx_sqrt = frac_power(&sx, 0.5).unwrap();
        let sx_isqrt = frac_power(&sx, -0.5).unwrap();
        let w = SymMatrix::symmetrized(
            sx_sqrt
                .as_array()
                .dot(&sz.as_array())
                .dot(&sx_sqrt.as_array()),
        )
        .unwrap();
        let eig = sym_eig(&w).unwrap();
        let w2 = eig.reconstruct_with(|l| l.max(0.0).powi(2));
        let m2 = sx_isqrt.as_array().dot(&w2).dot(&sx_isqrt.as_array());
        assert!(rel_frob_dist(&m1.as_array(), &m2.view()) < 1e-8);
    }

    #[test]
    fn kz_equals_kx_of_swapped_model() {
        let j = 4;
        let sz = random_cov(j, 21);
        let sx = random_cov(j, 22);
        let model = frozen_model(3, 2, j, sz.clone(), sx.clone(), 5);
        let swapped = SpectralModel {
            phi: model.psi.clone(),
            psi: model.phi.clone(),
            sigma_z_hat: model.sigma_x_hat.clone(),
            sigma_x_hat: model.sigma_z_hat.clone(),
            j,
            overlap_dim: 0,
            report: empty_report(j),
        };
        for ap in [0.5, 1.0, 2.0] {
            let kz = build_kz(&model, ap).unwrap();
            let kx_sw = build_kx(&swapped, ap).unwrap();
            let diff = rel_frob_dist(&kz.m.as_array(), &kx_sw.m.as_array());
            assert!(diff < 1e-10, "alpha' {ap}: {diff}");
        }
    }

    #[test]
    fn sandwich_and_whitened_recipes_agree_iff_commuting() {
        let j = 4;
        // Commuting (diagonal) covariances: recipes coincide for any alpha.
        let sx = SymMatrix::from_diag(&[1.5, 0.9, 0.6, 0.3]);
        let sz = SymMatrix::from_diag(&[1.1, 0.8, 0.5, 0.2]);
        let model = frozen_model(2, 2, j, sz.clone(), sx.clone(), 31);
        for alpha in [0.5, 1.0, 2.0, 3.0] {
            let kx_w = build_kx(&model, alpha).unwrap();
            let (kx_s, _) = build_alg1_pair(&model, alpha).unwrap();
            let diff = (&kx_w.m.as_array() - &kx_s.m.as_array())
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-10, "alpha {alpha}: {diff}");
        }

        // Non-commuting random covariances: identical at alpha = 1, and
        // genuinely different at alpha = 2.
        let model = frozen_model(2, 2, j, random_cov(j, 41), random_cov(j, 42), 6);
        let kx_w = build_kx(&model, 1.0).unwrap();
        let (kx_s, _) = build_alg1_pair(&model, 1.0).unwrap();
        let mut rng = stream(2, 2);
        let pts = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
        let g_w = gram(&Kernel::Learned(kx_w), pts.view(), pts.view()).unwrap();
        let g_s = gram(&Kernel::Learned(kx_s), pts.view(), pts.view()).unwrap();
        let gap1 = (&g_w - &g_s).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(gap1 < 1e-12, "alpha=1 entrywise gap {gap1}");

        let kx_w2 = build_kx(&model, 2.0).unwrap();
        let (kx_s2, _) = build_alg1_pair(&model, 2.0).unwrap();
        let g_w2 = gram(&Kernel::Learned(kx_w2), pts.view(), pts.view()).unwrap();
        let g_s2 = gram(&Kernel::Learned(kx_s2), pts.view(), pts.view()).unwrap();
        let gap2 = (&g_w2 - &g_s2).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(gap2 > 1e-6, "alpha=2 should differ, gap {gap2}");
    }

    #[test]
    fn product_with_unit_factor_is_identity() {
        let mut rng = stream(3, 3);
        let base = Kernel::Rbf(RbfKernel::new(1.3).unwrap());
        let prod = product_kernel(base.clone(), Kernel::One, 2);
        let a = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let g_prod = gram(&prod, a.view(), b.view()).unwrap();
        let g_base = gram(
            &base,
            a.slice(ndarray::s![.., ..2]),
            b.slice(ndarray::s![.., ..2]),
        )
        .unwrap();
        assert!(rel_frob_dist(&g_prod.view(), &g_base.view()) < 1e-14);
    }

    #[test]
    fn product_gram_is_psd_with_bounded_rank() {
        let mut rng = stream(4, 4);
        let ka = Kernel::Rbf(RbfKernel::new(0.8).unwrap());
        // Rank-limited second factor: learned kernel with J = 2.
        let model = frozen_model(2, 2, 2, random_cov(2, 51), random_cov(2, 52), 9);
        let kb = Kernel::Learned(build_kx(&model, 1.0).unwrap());
        let prod = product_kernel(kb, ka, 2);
        let pts = Array2::from_shape_fn((10, 4), |_| rng.gen_range(-1.0..1.0));
        let g = gram(&prod, pts.view(), pts.view()).unwrap();
        let eig = sym_eig(&SymMatrix::symmetrized(g.clone()).unwrap()).unwrap();
        let lmax = eig.values[0];
        assert!(eig.values.iter().all(|&l| l >= -1e-8 * lmax.max(1.0)));

        // rank(G_prod) <= rank(G_a) * rank(G_b).
        let rank = |g: &Array2<f64>| {
            let e = sym_eig(&SymMatrix::symmetrized(g.clone()).unwrap()).unwrap();
            let top = e.values[0].max(1e-300);
            e.values.iter().filter(|&&l| l > 1e-10 * top).count()
        };
        let ga = gram(
            &Kernel::Rbf(RbfKernel::new(0.8).unwrap()),
            pts.slice(ndarray::s![.., 2..]),
            pts.slice(ndarray::s![.., 2..]),
        )
        .unwrap();
        let model2 = frozen_model(2, 2, 2, random_cov(2, 51), random_cov(2, 52), 9);
        let gb = gram(
            &Kernel::Learned(build_kx(&model2, 1.0).unwrap()),
            pts.slice(ndarray::s![.., ..2]),
            pts.slice(ndarray::s![.., ..2]),
        )
        .unwrap();
        assert!(rank(&g) <= rank(&ga) * rank(&gb));
    }

    #[test]
    fn median_heuristic_examples() {
        let line = array![[0.0], [1.0], [2.0]];
        assert!((median_heuristic(line.view()).unwrap() - 1.0).abs() < 1e-15);

        let pair = array![[0.0, 0.0], [3.0, 4.0]];
        assert!((median_heuristic(pair.view()).unwrap() - 5.0).abs() < 1e-15);

        // Homogeneity under scaling.
        let mut rng = stream(6, 6);
        let pts = Array2::from_shape_fn((7, 2), |_| rng.gen_range(-1.0..1.0));
        let base = median_heuristic(pts.view()).unwrap();
        let scaled = median_heuristic((&pts * 2.5).view()).unwrap();
        assert!((scaled - 2.5 * base).abs() < 1e-12);

        let same = Array2::zeros((4, 2));
        assert!(matches!(
            median_heuristic(same.view()),
            Err(Error::DegenerateInput(_))
        ));
        let single = Array2::zeros((1, 2));
        assert!(matches!(
            median_heuristic(single.view()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn gram_basics() {
        let k = Kernel::Rbf(RbfKernel::new(1.0).unwrap());
        let p = array![[0.3, -0.2]];
        let g = gram(&k, p.view(), p.view()).unwrap();
        assert_eq!(g.dim(), (1, 1));
        assert!((g[[0, 0]] - 1.0).abs() < 1e-15);

        let empty = Array2::zeros((0, 2));
        let g = gram(&k, p.view(), empty.view()).unwrap();
        assert_eq!(g.dim(), (1, 0));
    }

    #[test]
    fn learned_gram_matches_pointwise_evaluation() {
        let j = 3;
        let model = frozen_model(2, 2, j, random_cov(j, 61), random_cov(j, 62), 8);
        let k = Kernel::Learned(build_kx(&model, 2.0).unwrap());
        let mut rng = stream(7, 7);
        let a = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
        let g = gram(&k, a.view(), b.view()).unwrap();
        for i in 0..5 {
            for jj in 0..6 {
                let v = k.evaluate(a.row(i), b.row(jj)).unwrap();
                assert!((g[[i, jj]] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_recipes_produce_psd_grams() {
        let mut rng = stream(8, 8);
        for (i, alpha) in [0.5, 1.0, 2.0, 3.0].iter().enumerate() {
            let j = 4;
            let model = frozen_model(
                2,
                2,
                j,
                random_cov(j, 70 + i as u64),
                random_cov(j, 80 + i as u64),
                10 + i as u64,
            );
            let pts = Array2::from_shape_fn((60, 2), |_| rng.gen_range(-2.0..2.0));
            let kernels = [
                Kernel::Learned(build_kx(&model, *alpha).unwrap()),
                Kernel::Learned(build_kz(&model, *alpha).unwrap()),
                Kernel::Learned(build_alg1_pair(&model, *alpha).unwrap().0),
                Kernel::Learned(build_alg1_pair(&model, *alpha).unwrap().1),
                Kernel::Rbf(RbfKernel::new(*alpha + 0.3).unwrap()),
            ];
            for k in &kernels {
                let g = gram(k, pts.view(), pts.view()).unwrap();
                let eig = sym_eig(&SymMatrix::symmetrized(g).unwrap()).unwrap();
                let lmax = eig.values[0].max(1e-300);
                assert!(
                    eig.values.iter().all(|&l| l >= -1e-8 * lmax),
                    "alpha {alpha}: min eig {}",
                    eig.values[eig.values.len() - 1]
                );
            }
        }
    }

    #[test]
    fn kernel_doc_roundtrip() {
        let j = 3;
        let model = frozen_model(2, 2, j, random_cov(j, 91), random_cov(j, 92), 12);
        let k = product_kernel(
            Kernel::Rbf(RbfKernel::new(0.7).unwrap()),
            Kernel::Learned(build_kx(&model, 1.5).unwrap()),
            1,
        );
        let json = serde_json::to_string(&k.to_doc()).unwrap();
        let doc: KernelDoc = serde_json::from_str(&json).unwrap();
        let back = Kernel::from_doc(&doc).unwrap();
        let mut rng = stream(9, 9);
        let a = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let g1 = gram(&k, a.view(), a.view()).unwrap();
        let g2 = gram(&back, a.view(), a.view()).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(RbfKernel::new(0.0), Err(Error::InvalidInput(_))));
        let k = Kernel::Rbf(RbfKernel::new(1.0).unwrap());
        let a = Array2::<f64>::zeros((2, 2));
        let b = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            gram(&k, a.view(), b.view()),
            Err(Error::InvalidInput(_))
        ));
    }
}
