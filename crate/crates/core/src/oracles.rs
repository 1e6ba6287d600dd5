//! Analytic conditional-expectation-operator oracles and exact computation
//! of the theory-side quantities: singular systems, chi-squared divergences,
//! source-condition members, ill-posedness measures, variance-explained
//! gaps, and (regularized) moduli of continuity.
//!
//! Three oracle families are provided.
//!
//! - Gaussian pair with correlation rho: singular values `rho^j`, singular
//!   functions the normalized probabilists' Hermite polynomials, density
//!   ratio in closed form, chi-squared `rho^2 / (1 - rho^2)`. Integrals are
//!   evaluated by 200-node Gauss-Hermite quadrature.
//! - Torus convolution with coefficient decay `(1+j)^{-p}`: Fourier pairs
//!   (cos, sin) per frequency, each frequency's coefficient appearing twice
//!   in the singular values; 512-point periodic trapezoid quadrature.
//! - Finite discrete joint pmf: the operator is realized exactly as a
//!   whitened matrix and decomposed numerically, enabling brute-force
//!   verification of the loss/Hilbert-Schmidt/chi-squared identities.
//!
//! The constant function (singular value 1) is excluded from the Gaussian
//! and torus indexings, matching the mean-zero convention under which the
//! leading Gaussian singular value is `rho`. The discrete oracle keeps all
//! singular values including the trivial one, so its trace identity reads
//! `chi^2 + 1 = sum_j s_j^2`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd_full, sym_eig, SymMatrix};

const GAUSS_HERMITE_NODES: usize = 200;
const TORUS_GRID: usize = 512;
/// Torus density-ratio truncation: alias-free for the 512-point trapezoid.
const TORUS_H0_MAX_FREQ: usize = 256;

/// Which analytic family an oracle belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum OracleKind {
    Gaussian { rho: f64 },
    Torus { p: f64 },
    Discrete { mz: usize, mx: usize },
}

enum Inner {
    Gaussian {
        rho: f64,
        nodes: Array1<f64>,
        weights: Array1<f64>,
    },
    Torus {
        p: f64,
        nodes: Array1<f64>,
        weights: Array1<f64>,
    },
    Discrete {
        /// Left/right singular vectors of the whitened operator matrix.
        u: Array2<f64>,
        v: Array2<f64>,
        p_z: Array1<f64>,
        p_x: Array1<f64>,
        h0: Array2<f64>,
    },
}

/// An analytic truncated singular system of a conditional expectation
/// operator, with exact density ratio and chi-squared divergence.
pub struct OperatorOracle {
    pub kind: OracleKind,
    /// Truncated singular values, non-increasing.
    pub svals: Array1<f64>,
    /// Exact chi-squared divergence (`f64::INFINITY` when divergent).
    pub chi2: f64,
    inner: Inner,
}

/// Normalized probabilists' Hermite polynomial `He_n(x) / sqrt(n!)`.
pub fn hermite_normalized(n: usize, x: f64) -> f64 {
    let mut prev = 1.0; // psi_0
    if n == 0 {
        return prev;
    }
    let mut cur = x; // psi_1
    for k in 1..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// Gauss-Hermite nodes and weights for the standard normal weight, via
/// Golub-Welsch on the probabilists' Jacobi matrix.
fn gauss_hermite_standard(n: usize) -> Result<(Array1<f64>, Array1<f64>)> {
    let mut jac = Array2::zeros((n, n));
    for i in 1..n {
        let b = (i as f64).sqrt();
        jac[[i - 1, i]] = b;
        jac[[i, i - 1]] = b;
    }
    let eig = sym_eig(&SymMatrix::symmetrized(jac)?)?;
    // Ascending nodes read right-to-left from the descending eigenvalues.
    let mut nodes = Array1::zeros(n);
    let mut weights = Array1::zeros(n);
    for j in 0..n {
        let col = n - 1 - j;
        nodes[j] = eig.values[col];
        let first = eig.vectors[[0, col]];
        weights[j] = first * first;
    }
    Ok((nodes, weights))
}

impl OperatorOracle {
    /// Gaussian-pair oracle: `s_j = rho^j` (j = 1..K after dropping the
    /// constant direction), Hermite singular functions, Mehler density
    /// ratio, `chi2 = rho^2 / (1 - rho^2)`.
    pub fn gaussian(rho: f64, k: usize) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidInput(format!(
                "rho must be in (0, 1), got {rho}"
            )));
        }
        if k == 0 {
            return Err(Error::InvalidInput("truncation level must be >= 1".into()));
        }
        let svals = Array1::from_iter((1..=k).map(|j| rho.powi(j as i32)));
        let (nodes, weights) = gauss_hermite_standard(GAUSS_HERMITE_NODES)?;
        Ok(OperatorOracle {
            kind: OracleKind::Gaussian { rho },
            svals,
            chi2: rho * rho / (1.0 - rho * rho),
            inner: Inner::Gaussian {
                rho,
                nodes,
                weights,
            },
        })
    }

    /// Torus convolution oracle on `[0, 1)` with kernel Fourier
    /// coefficients `c_j = (1+j)^{-p}`; each positive frequency
    /// contributes a (cos, sin) pair so its coefficient appears twice
    /// among the singular values. Only `d_l = 1` is supported.
    pub fn torus(p: f64, d_l: usize, k: usize) -> Result<Self> {
        if d_l != 1 {
            return Err(Error::Unsupported(
                "torus oracle supports d_l = 1 only".into(),
            ));
        }
        if !(p > 0.0) {
            return Err(Error::InvalidInput(format!("p must be > 0, got {p}")));
        }
        if k == 0 {
            return Err(Error::InvalidInput("truncation level must be >= 1".into()));
        }
        let svals = Array1::from_iter((0..k).map(|idx| {
            let freq = idx / 2 + 1;
            torus_coefficient(p, freq)
        }));
        // chi2 = sum_{f >= 1} 2 c_f^2; divergent iff p <= 1/2.
        let chi2 = if p <= 0.5 {
            f64::INFINITY
        } else {
            let mut total = 0.0;
            for f in 1..10_000_000usize {
                let c = torus_coefficient(p, f);
                let term = 2.0 * c * c;
                total += term;
                if term < 1e-17 * total.max(1e-300) {
                    break;
                }
            }
            total
        };
        let nodes = Array1::from_iter((0..TORUS_GRID).map(|i| i as f64 / TORUS_GRID as f64));
        let weights = Array1::from_elem(TORUS_GRID, 1.0 / TORUS_GRID as f64);
        Ok(OperatorOracle {
            kind: OracleKind::Torus { p },
            svals,
            chi2,
            inner: Inner::Torus { p, nodes, weights },
        })
    }

    /// Discrete oracle from a joint pmf over an (mz x mx) grid. The
    /// operator is the whitened matrix `M[z][x] = p(z,x)/sqrt(p_z p_x)`;
    /// its full SVD (including the trivial constant direction, singular
    /// value 1) is computed numerically; the chi-squared divergence comes
    /// from the direct sum.
    pub fn discrete(pmf: ArrayView2<f64>) -> Result<Self> {
        let (mz, mx) = pmf.dim();
        if mz == 0 || mx == 0 {
            return Err(Error::InvalidInput("pmf must be non-empty".into()));
        }
        if pmf.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("pmf entries must be >= 0".into()));
        }
        let total = pmf.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "pmf sums to {total}, expected 1"
            )));
        }
        let p_z = pmf.sum_axis(Axis(1));
        let p_x = pmf.sum_axis(Axis(0));
        if p_z.iter().any(|&v| v <= 0.0) || p_x.iter().any(|&v| v <= 0.0) {
            return Err(Error::DegenerateInput(
                "pmf has a zero marginal; operator is not defined".into(),
            ));
        }
        let whitened = Array2::from_shape_fn((mz, mx), |(i, j)| {
            pmf[[i, j]] / (p_z[i] * p_x[j]).sqrt()
        });
        let (u, svals, v) = svd_full(&whitened.view())?;
        let h0 = Array2::from_shape_fn((mz, mx), |(i, j)| pmf[[i, j]] / (p_z[i] * p_x[j]));
        let mut chi2 = 0.0;
        for i in 0..mz {
            for j in 0..mx {
                let prod = p_z[i] * p_x[j];
                let diff = pmf[[i, j]] - prod;
                chi2 += diff * diff / prod;
            }
        }
        Ok(OperatorOracle {
            kind: OracleKind::Discrete { mz, mx },
            svals,
            chi2,
            inner: Inner::Discrete {
                u,
                v,
                p_z,
                p_x,
                h0,
            },
        })
    }

    pub fn truncation(&self) -> usize {
        self.svals.len()
    }

    /// Right singular function `psi_j` (0-based index into `svals`) at `x`.
    /// Discrete oracles evaluate at category indices.
    pub fn psi(&self, j: usize, x: f64) -> f64 {
        match &self.inner {
            Inner::Gaussian { .. } => hermite_normalized(j + 1, x),
            Inner::Torus { .. } => torus_basis(j, x),
            Inner::Discrete { v, p_x, .. } => {
                let i = x.round() as usize;
                v[[i, j]] / p_x[i].sqrt()
            }
        }
    }

    /// Left singular function `phi_j` at `z`.
    pub fn phi(&self, j: usize, z: f64) -> f64 {
        match &self.inner {
            Inner::Gaussian { .. } => hermite_normalized(j + 1, z),
            Inner::Torus { .. } => torus_basis(j, z),
            Inner::Discrete { u, p_z, .. } => {
                let i = z.round() as usize;
                u[[i, j]] / p_z[i].sqrt()
            }
        }
    }

    /// Exact density ratio `h0(z, x) = dP_zx / d(P_z x P_x)`.
    pub fn h0(&self, z: f64, x: f64) -> f64 {
        match &self.inner {
            Inner::Gaussian { rho, .. } => {
                let r2 = rho * rho;
                let denom = 1.0 - r2;
                ((2.0 * rho * z * x - r2 * (z * z + x * x)) / (2.0 * denom)).exp()
                    / denom.sqrt()
            }
            Inner::Torus { p, .. } => {
                let mut val = 1.0;
                for f in 1..=TORUS_H0_MAX_FREQ {
                    let c = torus_coefficient(*p, f);
                    val += 2.0 * c * (2.0 * std::f64::consts::PI * f as f64 * (x - z)).cos();
                    if c < 1e-16 {
                        break;
                    }
                }
                val
            }
            Inner::Discrete { h0, .. } => h0[[z.round() as usize, x.round() as usize]],
        }
    }

    /// Quadrature rule of the x-marginal: (nodes, weights). For discrete
    /// oracles the nodes are category indices and the weights the marginal.
    pub fn quadrature_x(&self) -> (Array1<f64>, Array1<f64>) {
        match &self.inner {
            Inner::Gaussian { nodes, weights, .. } | Inner::Torus { nodes, weights, .. } => {
                (nodes.clone(), weights.clone())
            }
            Inner::Discrete { p_x, .. } => (
                Array1::from_iter((0..p_x.len()).map(|i| i as f64)),
                p_x.clone(),
            ),
        }
    }

    /// Apply the operator to a right-side function given by its values at
    /// the x-quadrature nodes: `(E f)(z) = int h0(z, x) f(x) dP_x`.
    pub fn apply_e(&self, f_at_nodes: ArrayView1<f64>, z: f64) -> f64 {
        let (nodes, weights) = self.quadrature_x();
        let mut acc = 0.0;
        for q in 0..nodes.len() {
            acc += weights[q] * self.h0(z, nodes[q]) * f_at_nodes[q];
        }
        acc
    }

    /// Density ratio table of a discrete oracle.
    pub fn h0_table(&self) -> Option<ArrayView2<'_, f64>> {
        match &self.inner {
            Inner::Discrete { h0, .. } => Some(h0.view()),
            _ => None,
        }
    }

    /// Marginals of a discrete oracle.
    pub fn discrete_marginals(&self) -> Option<(ArrayView1<'_, f64>, ArrayView1<'_, f64>)> {
        match &self.inner {
            Inner::Discrete { p_z, p_x, .. } => Some((p_z.view(), p_x.view())),
            _ => None,
        }
    }
}

/// Fourier coefficient `(1 + j)^{-p}` of the torus transition kernel.
pub fn torus_coefficient(p: f64, freq: usize) -> f64 {
    (1.0 + freq as f64).powf(-p)
}

fn torus_basis(idx: usize, x: f64) -> f64 {
    let freq = (idx / 2 + 1) as f64;
    let arg = 2.0 * std::f64::consts::PI * freq * x;
    if idx % 2 == 0 {
        std::f64::consts::SQRT_2 * arg.cos()
    } else {
        std::f64::consts::SQRT_2 * arg.sin()
    }
}

/// A hypothesis subspace expressed in the oracle's singular coordinates:
/// columns of `basis` are span functions (K x J), optionally with an RKHS
/// metric matrix (K x K) defining `||f||_H^2 = f^T W f` in those
/// coordinates.
#[derive(Debug, Clone)]
pub struct HypothesisSpec {
    pub basis: Array2<f64>,
    pub metric: Option<Array2<f64>>,
}

impl HypothesisSpec {
    /// Plain span without an RKHS metric. Columns must be independent.
    pub fn span(basis: Array2<f64>) -> Result<Self> {
        orthonormalize(&basis.view())?;
        Ok(HypothesisSpec {
            basis,
            metric: None,
        })
    }

    /// Span of selected singular directions (0-based indices).
    pub fn from_indices(k: usize, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&i| i >= k) {
            return Err(Error::InvalidInput("index beyond truncation".into()));
        }
        let mut b = Array2::zeros((k, indices.len()));
        for (col, &i) in indices.iter().enumerate() {
            b[[i, col]] = 1.0;
        }
        HypothesisSpec::span(b)
    }
}

/// Modified Gram-Schmidt with re-orthogonalization; errors on dependent
/// columns.
fn orthonormalize(basis: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (k, j) = basis.dim();
    if j == 0 || j > k {
        return Err(Error::InvalidInput(format!(
            "basis must have between 1 and {k} columns, got {j}"
        )));
    }
    let mut q = basis.to_owned();
    for col in 0..j {
        for _pass in 0..2 {
            for prev in 0..col {
                let proj = {
                    let c = q.column(col);
                    let p = q.column(prev);
                    c.dot(&p)
                };
                let pcol = q.column(prev).to_owned();
                let mut c = q.column_mut(col);
                c.scaled_add(-proj, &pcol);
            }
        }
        let norm = q.column(col).dot(&q.column(col)).sqrt();
        if norm < 1e-10 {
            return Err(Error::InvalidInput(
                "basis columns are linearly dependent".into(),
            ));
        }
        q.column_mut(col).mapv_inplace(|v| v / norm);
    }
    Ok(q)
}

/// A member of the source class: `f0 = sum_j s_j^beta g_j psi_j`, carried
/// as coefficients in the singular basis together with its source norm
/// `||f0||_{H_beta} = ||g||_2`.
#[derive(Debug, Clone)]
pub struct SourceF0 {
    pub coeffs: Array1<f64>,
    pub norm: f64,
    pub beta: f64,
}

impl SourceF0 {
    /// Evaluate the function at a point through the oracle's basis.
    pub fn eval(&self, oracle: &OperatorOracle, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(j, &c)| c * oracle.psi(j, x))
            .sum()
    }
}

/// Build the source-condition member `f0 = sum_j s_j^beta g_j psi_j`.
pub fn source_f0(oracle: &OperatorOracle, beta: f64, g: ArrayView1<f64>) -> Result<SourceF0> {
    if g.len() != oracle.truncation() {
        return Err(Error::InvalidInput(format!(
            "coefficient length {} does not match truncation {}",
            g.len(),
            oracle.truncation()
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidInput("beta must be >= 0".into()));
    }
    let coeffs = Array1::from_iter(
        oracle
            .svals
            .iter()
            .zip(g.iter())
            .map(|(&s, &gj)| s.powf(beta) * gj),
    );
    Ok(SourceF0 {
        coeffs,
        norm: g.dot(&g).sqrt(),
        beta,
    })
}

/// Ill-posedness measure of a hypothesis span:
/// `sup { ||f||_2 / ||E f||_2 : f in H }`, i.e. the inverse of the smallest
/// singular value of `diag(s) Q` for an orthonormalized basis Q. Returns
/// `f64::INFINITY` when the span hits a null direction of the truncated
/// operator.
pub fn illposedness_measure(oracle: &OperatorOracle, spec: &HypothesisSpec) -> Result<f64> {
    let q = orthonormalize(&spec.basis.view())?;
    if q.nrows() != oracle.truncation() {
        return Err(Error::InvalidInput(
            "basis rows do not match oracle truncation".into(),
        ));
    }
    let sq = Array2::from_shape_fn(q.dim(), |(i, j)| oracle.svals[i] * q[[i, j]]);
    let gram = SymMatrix::symmetrized(sq.t().dot(&sq))?;
    let eig = sym_eig(&gram)?;
    let jdim = eig.values.len();
    let smax = eig.values[0].max(0.0);
    let smin = eig.values[jdim - 1].max(0.0);
    if smin <= 1e-32 * smax.max(1.0) {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / smin.sqrt())
}

/// Variance-explained suboptimality of a rank-J span:
/// `sum_{i<=J} s_i^2 - sum_i ||E psi_i||^2` over an orthonormalized basis;
/// non-negative for any span, zero exactly on the span of the leading J
/// singular directions.
pub fn variance_explained_gap(oracle: &OperatorOracle, spec: &HypothesisSpec) -> Result<f64> {
    let q = orthonormalize(&spec.basis.view())?;
    if q.nrows() != oracle.truncation() {
        return Err(Error::InvalidInput(
            "basis rows do not match oracle truncation".into(),
        ));
    }
    let j = q.ncols();
    let leading: f64 = oracle.svals.iter().take(j).map(|s| s * s).sum();
    let mut explained = 0.0;
    for col in 0..j {
        for row in 0..q.nrows() {
            let v = oracle.svals[row] * q[[row, col]];
            explained += v * v;
        }
    }
    Ok(leading - explained)
}

/// The ideal RKHS of order alpha: span of the positive singular directions
/// with metric `diag(s^{-2 alpha})` in singular coordinates.
pub fn build_ideal_rkhs(oracle: &OperatorOracle, alpha: f64) -> Result<HypothesisSpec> {
    if alpha < 0.0 {
        return Err(Error::InvalidInput("alpha must be >= 0".into()));
    }
    let k = oracle.truncation();
    let positive: Vec<usize> = (0..k).filter(|&j| oracle.svals[j] > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::DegenerateInput("operator has no positive spectrum".into()));
    }
    let mut basis = Array2::zeros((k, positive.len()));
    let mut metric = Array2::zeros((k, k));
    for (col, &j) in positive.iter().enumerate() {
        basis[[j, col]] = 1.0;
        metric[[j, j]] = oracle.svals[j].powf(-2.0 * alpha);
    }
    Ok(HypothesisSpec {
        basis,
        metric: Some(metric),
    })
}

/// Regularized modulus of continuity:
///
/// ```text
/// omega = sup { ||f - f0||_2 : f in H,
///               ||E(f - f0)||_2^2 + lambda ||f||_H^2 <= delta^2 }
/// ```
///
/// computed by a one-dimensional Lagrange-multiplier search over the
/// generalized eigenproblem of the two quadratics (bracketing plus
/// bisection to relative width 1e-10). `f0` is given by its coefficients in
/// the truncated singular basis. With `f0 = 0` and `lambda = 0` this equals
/// `delta` times the ill-posedness measure. Returns `f64::INFINITY` when
/// the supremum is unbounded, and `InfeasibleConstraint` when `delta^2`
/// is below the minimum attainable constraint value.
pub fn modulus_of_continuity(
    oracle: &OperatorOracle,
    spec: &HypothesisSpec,
    f0_coeffs: ArrayView1<f64>,
    delta: f64,
    lambda: f64,
) -> Result<f64> {
    let k = oracle.truncation();
    if f0_coeffs.len() != k {
        return Err(Error::InvalidInput(
            "f0 coefficients do not match truncation".into(),
        ));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidInput("delta must be positive".into()));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidInput("lambda must be >= 0".into()));
    }
    if lambda > 0.0 && spec.metric.is_none() {
        return Err(Error::InvalidInput(
            "lambda > 0 requires an RKHS metric on the hypothesis space".into(),
        ));
    }
    let q = orthonormalize(&spec.basis.view())?;
    if q.nrows() != k {
        return Err(Error::InvalidInput(
            "basis rows do not match oracle truncation".into(),
        ));
    }
    let jdim = q.ncols();
    let s2 = oracle.svals.mapv(|s| s * s);

    // Constraint quadratic G = Q^T S^2 Q + lambda Q^T W Q.
    let sq = Array2::from_shape_fn(q.dim(), |(i, j)| s2[i] * q[[i, j]]);
    let mut g_mat = q.t().dot(&sq);
    if lambda > 0.0 {
        let w = spec.metric.as_ref().unwrap();
        let wq = w.dot(&q);
        g_mat = g_mat + lambda * q.t().dot(&wq);
    }
    let g_sym = SymMatrix::symmetrized(g_mat)?;
    let eig = sym_eig(&g_sym)?;
    let m_max = eig.values[0].max(0.0);
    let m_min = eig.values[jdim - 1];
    let floor = 1e-14 * m_max.max(1e-300);

    let c = f0_coeffs;
    let s2c = Array1::from_iter(c.iter().zip(s2.iter()).map(|(&ci, &si)| si * ci));
    let bq_raw = q.t().dot(&s2c);
    let bp_raw = q.t().dot(&c);
    let r_q: f64 = c.iter().zip(s2.iter()).map(|(&ci, &si)| si * ci * ci).sum();
    let r_p: f64 = c.dot(&c);
    let bq = eig.vectors.t().dot(&bq_raw);
    let bp = eig.vectors.t().dot(&bp_raw);
    let m = &eig.values;

    let homogeneous = c.iter().all(|&v| v == 0.0);
    if homogeneous {
        if m_min <= floor {
            return Ok(f64::INFINITY);
        }
        return Ok(delta / m_min.sqrt());
    }

    if m_min <= floor {
        // A direction where the constraint quadratic vanishes: the modulus
        // is unbounded provided the constraint set is non-empty at all.
        let mut q_min = r_q;
        for i in 0..jdim {
            if m[i] > floor {
                q_min -= bq[i] * bq[i] / m[i];
            } else if bq[i].abs() > 1e-12 * (r_q.abs().sqrt() + 1.0) {
                // Linear escape direction: constraint reaches -infinity.
                return Ok(f64::INFINITY);
            }
        }
        if q_min > delta * delta * (1.0 + 1e-12) {
            return Err(Error::InfeasibleConstraint(format!(
                "minimum attainable constraint value {q_min:.6e} exceeds delta^2"
            )));
        }
        return Ok(f64::INFINITY);
    }

    // Strictly positive-definite constraint. Feasibility first.
    let mut q_min = r_q;
    for i in 0..jdim {
        q_min -= bq[i] * bq[i] / m[i];
    }
    let d2 = delta * delta;
    if q_min > d2 * (1.0 + 1e-12) && q_min > d2 + 1e-300 {
        return Err(Error::InfeasibleConstraint(format!(
            "minimum attainable constraint value {q_min:.6e} exceeds delta^2 = {d2:.6e}"
        )));
    }

    let a_of = |mu: f64| -> Array1<f64> {
        Array1::from_iter((0..jdim).map(|i| {
            let den = mu * m[i] - 1.0;
            if den.abs() < 1e-300 {
                0.0
            } else {
                (mu * bq[i] - bp[i]) / den
            }
        }))
    };
    let q_of = |a: &Array1<f64>| -> f64 {
        let mut v = r_q;
        for i in 0..jdim {
            v += m[i] * a[i] * a[i] - 2.0 * a[i] * bq[i];
        }
        v
    };
    let o_of = |a: &Array1<f64>| -> f64 {
        let mut v = r_p;
        for i in 0..jdim {
            v += a[i] * a[i] - 2.0 * a[i] * bp[i];
        }
        v
    };

    let pole = 1.0 / m_min;
    let mut mu_lo = pole * (1.0 + 1e-13);
    // Hard case: the stationary family stays inside the constraint even at
    // the pole; the maximizer adds a component along the minimal direction.
    if q_of(&a_of(mu_lo)) <= d2 {
        let mut a = a_of(mu_lo);
        // Zero out near-pole coordinates and re-solve the boundary crossing
        // along the minimal eigendirection.
        let i_min = jdim - 1;
        a[i_min] = 0.0;
        let qa = q_of(&a);
        // m tau^2 - 2 tau bq[i] + (qa - d2) = 0.
        let (aa, bb, cc) = (m[i_min], -2.0 * bq[i_min], qa - d2);
        let disc = (bb * bb - 4.0 * aa * cc).max(0.0).sqrt();
        let t1 = (-bb + disc) / (2.0 * aa);
        let t2 = (-bb - disc) / (2.0 * aa);
        let mut best = f64::NEG_INFINITY;
        for t in [t1, t2] {
            let mut cand = a.clone();
            cand[i_min] = t;
            best = best.max(o_of(&cand));
        }
        return Ok(best.max(0.0).sqrt());
    }
    let mut mu_hi = pole * 2.0 + 1.0;
    let mut guard = 0;
    while q_of(&a_of(mu_hi)) > d2 && guard < 2000 {
        mu_hi *= 2.0;
        guard += 1;
    }
    for _ in 0..300 {
        if (mu_hi - mu_lo) <= 1e-10 * mu_lo.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (mu_lo + mu_hi);
        if q_of(&a_of(mid)) > d2 {
            mu_lo = mid;
        } else {
            mu_hi = mid;
        }
    }
    let a = a_of(0.5 * (mu_lo + mu_hi));
    Ok(o_of(&a).max(0.0).sqrt())
}
