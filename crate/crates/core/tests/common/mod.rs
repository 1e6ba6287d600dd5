//! Shared helpers for integration tests: independent brute-force oracles
//! and a lock that serializes the heavyweight suites so wall-clock budgets
//! are measured under exclusive use of the machine.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use std::sync::{Mutex, MutexGuard, OnceLock};

static HEAVY: OnceLock<Mutex<()>> = OnceLock::new();

/// Serialize heavyweight tests; recovers from poisoning so one failure does
/// not cascade into unrelated tests.
pub fn heavy_lock() -> MutexGuard<'static, ()> {
    match HEAVY.get_or_init(|| Mutex::new(())).lock() {
        Ok(g) => g,
        Err(poisoned) => poisoned.into_inner(),
    }
}

/// Dense Gaussian elimination with partial pivoting; the independent linear
/// solver used by brute-force saddle verification (no eigendecompositions,
/// no clamping - a different route from the library implementation).
pub fn solve_dense(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = b.len();
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if m[[r, col]].abs() > m[[piv, col]].abs() {
                piv = r;
            }
        }
        if m[[piv, col]].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap([col, c], [piv, c]);
            }
            rhs.swap(col, piv);
        }
        let d = m[[col, col]];
        for r in (col + 1)..n {
            let f = m[[r, col]] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[[r, c]] -= f * m[[col, c]];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = Array1::zeros(n);
    for r in (0..n).rev() {
        let mut s = rhs[r];
        for c in (r + 1)..n {
            s -= m[[r, c]] * x[c];
        }
        x[r] = s / m[[r, r]];
    }
    Some(x)
}

/// Brute-force saddle of the empirical minimax objective via its joint
/// first-order system, solved with plain Gaussian elimination:
///
/// ```text
/// (2/n) Kx Kz beta + 2 lambda Kx gamma               = 0
/// (2/n) Kz (Kx gamma - y) - ((2/n) Kz^2 + 2 nu Kz) beta = 0
/// ```
pub fn brute_saddle(
    kx: ArrayView2<f64>,
    kz: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambda: f64,
    nu: f64,
) -> Option<(Array1<f64>, Array1<f64>)> {
    let n = y.len();
    let nf = n as f64;
    let mut big = Array2::zeros((2 * n, 2 * n));
    let mut rhs = Array1::zeros(2 * n);
    let kxkz = kx.dot(&kz);
    let kzkx = kz.dot(&kx);
    let kz2 = kz.dot(&kz);
    for i in 0..n {
        for j in 0..n {
            big[[i, j]] = 2.0 * lambda * kx[[i, j]];
            big[[i, n + j]] = (2.0 / nf) * kxkz[[i, j]];
            big[[n + i, j]] = (2.0 / nf) * kzkx[[i, j]];
            big[[n + i, n + j]] = -((2.0 / nf) * kz2[[i, j]] + 2.0 * nu * kz[[i, j]]);
        }
        rhs[n + i] = (2.0 / nf) * kz.row(i).dot(&y);
    }
    let sol = solve_dense(&big, &rhs)?;
    let gamma = Array1::from_iter((0..n).map(|i| sol[i]));
    let beta = Array1::from_iter((0..n).map(|i| sol[n + i]));
    Some((gamma, beta))
}

/// Median of a slice (sorted copy; midpoint average for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
