//! Dense symmetric linear algebra: eigendecomposition, fractional matrix
//! powers, regularized inverse square roots and PSD projection.
//!
//! Everything here targets the moderate sizes that appear in kernel middle
//! matrices and analytic oracles (tens to a few hundred rows). The
//! eigensolver is a cyclic Jacobi iteration: slower than tridiagonalization
//! for very large matrices but simple, branch-free and accurate to close to
//! machine precision, which the downstream reconstruction contracts rely on.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative floor used when clamping eigenvalues ahead of a negative power:
/// eigenvalues below `CLAMP_REL * lambda_max` are raised to the floor so that
/// pseudo-inverses of nearly rank-deficient covariances stay bounded.
pub const CLAMP_REL: f64 = 1e-10;


/// A dense real symmetric matrix, stored fully.
///
/// Construction validates symmetry entrywise:
/// `|A[i][j] - A[j][i]| <= 1e-12 * max(1, |A[i][j]|)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    /// Wrap a matrix, validating squareness, finiteness and symmetry.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (r, c) = data.dim();
        if r != c {
            return Err(Error::InvalidInput(format!(
                "symmetric matrix must be square, got {r}x{c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "matrix contains non-finite entries".into(),
            ));
        }
        for i in 0..r {
            for j in (i + 1)..r {
                let a = data[[i, j]];
                let b = data[[j, i]];
                if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                    return Err(Error::InvalidInput(format!(
                        "matrix not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(SymMatrix { data })
    }

    /// Wrap `(A + A^T) / 2`, absorbing round-off asymmetry from matrix
    /// products.
    pub fn symmetrized(data: Array2<f64>) -> Result<Self> {
        let (r, c) = data.dim();
        if r != c {
            return Err(Error::InvalidInput(format!(
                "symmetric matrix must be square, got {r}x{c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "matrix contains non-finite entries".into(),
            ));
        }
        let sym = 0.5 * (&data + &data.t());
        Ok(SymMatrix { data: sym })
    }

    /// Identity of dimension `n`.
    pub fn eye(n: usize) -> Self {
        SymMatrix {
            data: Array2::eye(n),
        }
    }

    /// Diagonal matrix from the given entries.
    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Array2::zeros((diag.len(), diag.len()));
        for (i, d) in diag.iter().enumerate() {
            m[[i, i]] = *d;
        }
        SymMatrix { data: m }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_array(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }
}

/// Eigendecomposition of a symmetric matrix: eigenvalues sorted descending,
/// eigenvectors as orthonormal columns in matching order.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

impl EigenDecomp {
    /// Reconstruct `V diag(f(lambda)) V^T`, symmetrized.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let n = self.values.len();
        let mut scaled = Array2::zeros((n, n));
        for (j, lam) in self.values.iter().enumerate() {
            let fl = f(*lam);
            for i in 0..n {
                scaled[[i, j]] = self.vectors[[i, j]] * fl;
            }
        }
        let m = scaled.dot(&self.vectors.t());
        0.5 * (&m + &m.t())
    }
}

/// Householder reduction of a symmetric matrix to tridiagonal form, with
/// the orthogonal transform accumulated in place (classic tred2 scheme).
/// Returns (diagonal, subdiagonal); on exit `a` holds Q with `Q^T A Q = T`.
fn tridiagonalize(a: &mut Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = a.nrows();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let mut scale = 0.0;
            for k in 0..=l {
                scale += a[[i, k]].abs();
            }
            if scale == 0.0 {
                e[i] = a[[i, l]];
            } else {
                for k in 0..=l {
                    a[[i, k]] /= scale;
                    h += a[[i, k]] * a[[i, k]];
                }
                let mut f = a[[i, l]];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[[i, l]] = f - g;
                f = 0.0;
                for j in 0..=l {
                    a[[j, i]] = a[[i, j]] / h;
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[[j, k]] * a[[i, k]];
                    }
                    for k in (j + 1)..=l {
                        g += a[[k, j]] * a[[i, k]];
                    }
                    e[j] = g / h;
                    f += e[j] * a[[i, j]];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let fj = a[[i, j]];
                    let gj = e[j] - hh * fj;
                    e[j] = gj;
                    for k in 0..=j {
                        a[[j, k]] -= fj * e[k] + gj * a[[i, k]];
                    }
                }
            }
        } else {
            e[i] = a[[i, l]];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let mut g = 0.0;
                for k in 0..i {
                    g += a[[i, k]] * a[[k, j]];
                }
                for k in 0..i {
                    a[[k, j]] -= g * a[[k, i]];
                }
            }
        }
        d[i] = a[[i, i]];
        a[[i, i]] = 1.0;
        for j in 0..i {
            a[[i, j]] = 0.0;
            a[[j, i]] = 0.0;
        }
    }
    (d, e)
}

/// Implicit-shift QL iteration on a tridiagonal matrix, rotating the rows
/// of `zt` (the transposed transform, so each rotation touches two
/// contiguous rows). Eigenvalues land in `d`.
fn ql_implicit(d: &mut [f64], e: &mut [f64], zt: &mut Array2<f64>) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 64 {
                return Err(Error::NumericalFailure(
                    "eigensolver QL iteration did not converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            let denom = g + if g >= 0.0 { r.abs() } else { -r.abs() };
            g = d[m] - d[l] + e[l] / denom;
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                // Rotate eigenvector rows i and i+1 of the transposed basis
                // (contiguous slices after splitting between the two rows).
                let (mut top, mut bottom) = zt.view_mut().split_at(ndarray::Axis(0), i + 1);
                let mut row_i = top.row_mut(i);
                let mut row_i1 = bottom.row_mut(0);
                let ri = row_i.as_slice_mut().unwrap();
                let r1 = row_i1.as_slice_mut().unwrap();
                for k in 0..ri.len() {
                    let fk = r1[k];
                    r1[k] = s * ri[k] + c * fk;
                    ri[k] = c * ri[k] - s * fk;
                }
                f = 0.0;
                let _ = f;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}


/// Eigendecomposition of a symmetric matrix: Householder tridiagonalization
/// followed by implicit-shift QL.
///
/// Post: descending eigenvalues; `V diag(lambda) V^T` reconstructs the input
/// to 1e-8 relative Frobenius error and `V^T V = I` to 1e-8.
pub fn sym_eig(a: &SymMatrix) -> Result<EigenDecomp> {
    let n = a.dim();
    if n == 0 {
        return Ok(EigenDecomp {
            values: Array1::zeros(0),
            vectors: Array2::zeros((0, 0)),
        });
    }
    let mut work = a.data.clone();
    let (mut d, mut e) = tridiagonalize(&mut work);
    // Rows of zt are the accumulated basis vectors (zt = Q^T), so QL
    // rotations act on contiguous memory. Copy into C layout explicitly.
    let mut zt = Array2::zeros((n, n));
    zt.assign(&work.t());
    ql_implicit(&mut d, &mut e, &mut zt)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap());
    let values = Array1::from_iter(order.iter().map(|&i| d[i]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            vectors[[r, col]] = zt[[i, r]];
        }
    }
    Ok(EigenDecomp { values, vectors })
}

/// Fractional power `A^a` of a symmetric PSD matrix.
///
/// Computed as `V diag(clamp(lambda)^a) V^T`. For `a >= 0` negative
/// round-off eigenvalues are clamped to zero; for `a < 0` eigenvalues below
/// `CLAMP_REL * lambda_max` are clamped to that floor so the inverse power
/// stays bounded on nearly rank-deficient input.
pub fn frac_power(a: &SymMatrix, power: f64) -> Result<SymMatrix> {
    let eig = sym_eig(a)?;
    let lam_max = eig.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if power < 0.0 {
        let floor = CLAMP_REL * lam_max;
        if !(floor > 0.0) {
            return Err(Error::DegenerateMatrix(format!(
                "all eigenvalues below clamp floor for negative power (lambda_max = {lam_max:.3e})"
            )));
        }
        let m = eig.reconstruct_with(|l| l.max(floor).powf(power));
        SymMatrix::symmetrized(m)
    } else {
        let m = eig.reconstruct_with(|l| l.max(0.0).powf(power));
        SymMatrix::symmetrized(m)
    }
}

/// Project a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues to zero. Already-PSD input is returned unchanged.
pub fn psd_project(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(a)?;
    if eig.values.iter().all(|&l| l >= 0.0) {
        return Ok(a.clone());
    }
    SymMatrix::symmetrized(eig.reconstruct_with(|l| l.max(0.0)))
}

/// Thin SVD of a small dense matrix `M` (mz x mx), returning
/// `(u, sigma, v)` with singular values sorted descending and **full**
/// orthonormal bases on both sides (null directions completed).
///
/// Intended for the discrete operator oracles; cost is one Jacobi
/// eigendecomposition of each Gram matrix.
pub fn svd_full(m: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    let (rows, cols) = m.dim();
    let mtm = SymMatrix::symmetrized(m.t().dot(m))?;
    let eig_v = sym_eig(&mtm)?;
    let k = rows.min(cols);
    let lam_max = eig_v.values.iter().cloned().fold(0.0f64, f64::max);
    let smax = lam_max.sqrt();
    // Eigenvalues of the Gram carry O(eps * lam_max) noise; below that
    // level a singular value is indistinguishable from zero and is
    // reported as exactly zero.
    let lam_floor = 1e-13 * lam_max;
    let mut sigma = Array1::zeros(k);
    for j in 0..k {
        let lam = eig_v.values[j];
        sigma[j] = if lam > lam_floor { lam.sqrt() } else { 0.0 };
    }
    let v = eig_v.vectors;

    // Left vectors for significantly nonzero singular values, then complete
    // the basis with modified Gram-Schmidt over the identity candidates.
    let mut u = Array2::zeros((rows, rows));
    let mut filled = 0;
    for j in 0..k {
        if sigma[j] > 1e-12 * smax.max(1e-300) {
            let col = m.dot(&v.column(j)) / sigma[j];
            for i in 0..rows {
                u[[i, filled]] = col[i];
            }
            filled += 1;
        }
    }
    let mut cand = 0;
    while filled < rows && cand < rows {
        let mut col = Array1::zeros(rows);
        col[cand] = 1.0;
        for j in 0..filled {
            let proj: f64 = (0..rows).map(|i| u[[i, j]] * col[i]).sum();
            for i in 0..rows {
                col[i] -= proj * u[[i, j]];
            }
        }
        let norm = col.dot(&col).sqrt();
        if norm > 1e-8 {
            for i in 0..rows {
                u[[i, filled]] = col[i] / norm;
            }
            filled += 1;
        }
        cand += 1;
    }
    if filled < rows {
        return Err(Error::NumericalFailure(
            "failed to complete left singular basis".into(),
        ));
    }
    Ok((u, sigma, v))
}

/// In-place blocked Cholesky factorization `A = L L^T` (lower triangle).
///
/// `A` must be symmetric positive definite up to the supplied diagonal
/// `jitter`, which is added once before factorization. Left-looking blocked
/// form: the dominant work is one GEMM per block column, which keeps the
/// dense saddle solver usable at a few thousand rows.
pub fn cholesky_in_place(a: &mut Array2<f64>, jitter: f64) -> Result<()> {
    let n = a.nrows();
    if jitter != 0.0 {
        for i in 0..n {
            a[[i, i]] += jitter;
        }
    }
    const B: usize = 160;
    let mut k0 = 0;
    while k0 < n {
        let k1 = (k0 + B).min(n);
        let kb = k1 - k0;
        if k0 > 0 {
            // A[k0:n, k0:k1] -= L[k0:n, 0:k0] * L[k0:k1, 0:k0]^T
            let (left, mut right) = a.view_mut().split_at(ndarray::Axis(1), k0);
            let lfull = left.slice(ndarray::s![k0..n, ..]);
            let lblock = left.slice(ndarray::s![k0..k1, ..]);
            let mut target = right.slice_mut(ndarray::s![k0..n, 0..kb]);
            ndarray::linalg::general_mat_mul(-1.0, &lfull, &lblock.t(), 1.0, &mut target);
        }
        // Factor the diagonal block (unblocked).
        for j in k0..k1 {
            let mut d = a[[j, j]];
            for p in k0..j {
                d -= a[[j, p]] * a[[j, p]];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "cholesky breakdown at pivot {j} (d = {d:.3e})"
                )));
            }
            let dj = d.sqrt();
            a[[j, j]] = dj;
            for i in (j + 1)..k1 {
                let mut s = a[[i, j]];
                for p in k0..j {
                    s -= a[[i, p]] * a[[j, p]];
                }
                a[[i, j]] = s / dj;
            }
        }
        if k1 < n {
            // Panel solve L21 = A21 * L11^{-T} via the explicit triangular
            // inverse, so the bulk of the work lands in one GEMM.
            let mut inv = Array2::zeros((kb, kb));
            for c in 0..kb {
                inv[[c, c]] = 1.0 / a[[k0 + c, k0 + c]];
                for r in (c + 1)..kb {
                    let mut s = 0.0;
                    for p in c..r {
                        s += a[[k0 + r, k0 + p]] * inv[[p, c]];
                    }
                    inv[[r, c]] = -s / a[[k0 + r, k0 + r]];
                }
            }
            let a21 = a.slice(ndarray::s![k1..n, k0..k1]).to_owned();
            let l21 = a21.dot(&inv.t());
            a.slice_mut(ndarray::s![k1..n, k0..k1]).assign(&l21);
        }
        k0 = k1;
    }
    // Zero the strict upper triangle so the factor is a clean L.
    for i in 0..n {
        for j in (i + 1)..n {
            a[[i, j]] = 0.0;
        }
    }
    Ok(())
}

/// Solve `L L^T x = b` given the Cholesky factor `L` (lower triangle).
pub fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for j in 0..i {
            s -= l[[i, j]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= l[[j, i]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Relative Frobenius distance `||a - b||_F / max(||b||_F, eps)`.
pub fn rel_frob_dist(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;
    use rand::Rng;

    fn random_psd(n: usize, seed: u64) -> SymMatrix {
        let mut rng = stream(seed, 0x11);
        let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        SymMatrix::symmetrized(b.t().dot(&b)).unwrap()
    }

    #[test]
    fn identity_eigenvalues_are_ones() {
        let eig = sym_eig(&SymMatrix::eye(3)).unwrap();
        for v in eig.values.iter() {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let vtv = eig.vectors.t().dot(&eig.vectors);
        assert!(rel_frob_dist(&vtv.view(), &Array2::eye(3).view()) < 1e-12);
    }

    #[test]
    fn diagonal_case_is_axis_aligned() {
        let eig = sym_eig(&SymMatrix::from_diag(&[4.0, 1.0])).unwrap();
        assert!((eig.values[0] - 4.0).abs() < 1e-14);
        assert!((eig.values[1] - 1.0).abs() < 1e-14);
        assert!((eig.vectors[[0, 0]].abs() - 1.0).abs() < 1e-14);
        assert!((eig.vectors[[1, 1]].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_psd_reconstructs() {
        let a = random_psd(5, 42);
        let eig = sym_eig(&a).unwrap();
        let rec = eig.reconstruct_with(|l| l);
        assert!(rel_frob_dist(&rec.view(), &a.as_array()) < 1e-8);
        let vtv = eig.vectors.t().dot(&eig.vectors);
        assert!(rel_frob_dist(&vtv.view(), &Array2::eye(5).view()) < 1e-8);
    }

    #[test]
    fn two_by_two_matches_characteristic_roots() {
        let mut rng = stream(3, 0x22);
        for _ in 0..20 {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            let c: f64 = rng.gen_range(-2.0..2.0);
            let m = SymMatrix::new(array![[a, b], [b, c]]).unwrap();
            let eig = sym_eig(&m).unwrap();
            let mid = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            assert!((eig.values[0] - (mid + rad)).abs() < 1e-10);
            assert!((eig.values[1] - (mid - rad)).abs() < 1e-10);
        }
    }

    #[test]
    fn frac_power_diagonal_sqrt() {
        let r = frac_power(&SymMatrix::from_diag(&[4.0, 1.0]), 0.5).unwrap();
        assert!((r.as_array()[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((r.as_array()[[1, 1]] - 1.0).abs() < 1e-12);
        assert!(r.as_array()[[0, 1]].abs() < 1e-12);
    }

    #[test]
    fn frac_power_identity_exponent() {
        let a = random_psd(6, 7);
        let r = frac_power(&a, 1.0).unwrap();
        assert!(rel_frob_dist(&r.as_array(), &a.as_array()) < 1e-10);
    }

    #[test]
    fn frac_power_sqrt_then_square_roundtrips() {
        for seed in 0..10 {
            let a = random_psd(5, seed);
            let r = frac_power(&frac_power(&a, 0.5).unwrap(), 2.0).unwrap();
            assert!(rel_frob_dist(&r.as_array(), &a.as_array()) < 1e-6);
        }
    }

    #[test]
    fn frac_power_semigroup_and_commutation() {
        let mut rng = stream(9, 0x33);
        for seed in 0..20 {
            let a = random_psd(4, 100 + seed);
            let (p, q) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
            let lhs = frac_power(&a, p + q).unwrap();
            let rhs = frac_power(&a, p)
                .unwrap()
                .as_array()
                .dot(&frac_power(&a, q).unwrap().as_array());
            assert!(rel_frob_dist(&lhs.as_array(), &rhs.view()) < 1e-6);

            let ap = frac_power(&a, p).unwrap();
            let left = ap.as_array().dot(&a.as_array());
            let right = a.as_array().dot(&ap.as_array());
            assert!(rel_frob_dist(&left.view(), &right.view()) < 1e-8);
        }
    }

    #[test]
    fn negative_power_clamps_and_degenerates() {
        // Rank-1 matrix: inverse sqrt must stay finite via clamping.
        let a = SymMatrix::from_diag(&[1.0, 0.0]);
        let r = frac_power(&a, -0.5).unwrap();
        assert!(r.as_array().iter().all(|v| v.is_finite()));
        // Zero matrix has no usable spectrum for a negative power.
        let z = SymMatrix::from_diag(&[0.0, 0.0]);
        assert!(matches!(
            frac_power(&z, -0.5),
            Err(Error::DegenerateMatrix(_))
        ));
    }

    #[test]
    fn psd_project_clips_and_fixes_nothing_else() {
        let r = psd_project(&SymMatrix::from_diag(&[1.0, -1e-15])).unwrap();
        assert_eq!(r.as_array()[[1, 1]], 0.0);
        assert_eq!(r.as_array()[[0, 0]], 1.0);

        let a = random_psd(4, 5);
        let fixed = psd_project(&a).unwrap();
        assert_eq!(fixed.as_array(), a.as_array());

        let c = psd_project(&SymMatrix::from_diag(&[2.0, -3.0])).unwrap();
        assert_eq!(c.as_array()[[0, 0]], 2.0);
        assert_eq!(c.as_array()[[1, 1]], 0.0);
    }

    #[test]
    fn rejects_non_finite_and_asymmetric() {
        let m = array![[1.0, f64::NAN], [f64::NAN, 1.0]];
        assert!(matches!(SymMatrix::new(m), Err(Error::InvalidInput(_))));
        let m = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(SymMatrix::new(m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn svd_full_recovers_rank_and_bases() {
        let m = array![[3.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let (u, s, v) = svd_full(&m.view()).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        let utu = u.t().dot(&u);
        assert!(rel_frob_dist(&utu.view(), &Array2::eye(3).view()) < 1e-10);
        let vtv = v.t().dot(&v);
        assert!(rel_frob_dist(&vtv.view(), &Array2::eye(2).view()) < 1e-10);
    }

    #[test]
    fn blocked_cholesky_solves_spd_system() {
        for n in [3usize, 64, 200] {
            let a = random_psd(n, 1000 + n as u64);
            let mut shifted = a.as_array().to_owned();
            for i in 0..n {
                shifted[[i, i]] += 0.5;
            }
            let mut rng = stream(n as u64, 0x44);
            let b = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
            let mut l = shifted.clone();
            cholesky_in_place(&mut l, 0.0).unwrap();
            let x = cholesky_solve(&l, &b);
            let resid = &shifted.dot(&x) - &b;
            assert!(resid.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-8);
        }
    }
}
