//! Small dense linear-algebra helpers built on nalgebra.

use nalgebra::{DMatrix, DVector};

/// Least-squares solve via SVD with a relative singular-value cutoff.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * 1e-13 * (a.nrows().max(a.ncols()) as f64);
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Nonnegative least squares `min ||A x - b|| s.t. x >= 0` by the
/// Lawson–Hanson active-set method.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let atb = a.transpose() * b;
    let tol = 1e-14 * (1.0 + atb.amax()) * (a.nrows().max(n) as f64);
    let max_outer = 3 * n + 10;
    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap());
        let Some(j) = cand else { break };
        passive[j] = true;
        let mut inner = 0;
        loop {
            inner += 1;
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let ap = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
            let sp = lstsq(&ap, b);
            let mut s = DVector::zeros(n);
            for (c, &i) in idx.iter().enumerate() {
                s[i] = sp[c];
            }
            if idx.iter().all(|&i| s[i] > 0.0) || inner > 3 * n + 10 {
                x = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &i in &idx {
                if s[i] <= 0.0 {
                    let d = x[i] - s[i];
                    if d > 0.0 {
                        alpha = alpha.min(x[i] / d);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            x = &x + (&s - &x) * alpha;
            for &i in &idx {
                if x[i] <= 1e-300 || (s[i] <= 0.0 && x[i] <= tol) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
        if passive.iter().all(|p| *p) {
            break;
        }
    }
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Largest eigenvalue of a symmetric positive semidefinite operator by power
/// iteration.
pub fn power_max(apply: impl Fn(&[f64]) -> Vec<f64>, n: usize, iters: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * ((i as f64) * 1.618).sin()).collect();
    let mut lam = 0.0;
    for _ in 0..iters {
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let av = apply(&v);
        let new = v.iter().zip(&av).map(|(a, b)| a * b).sum::<f64>();
        v = av;
        if (new - lam).abs() <= 1e-15 * new.abs().max(1e-300) {
            lam = new;
            break;
        }
        lam = new;
    }
    lam
}

/// Smallest eigenvalue of a symmetric matrix via power iteration on the
/// shifted matrix `lambda_max I - G`.
pub fn power_min_sym(g: &DMatrix<f64>, iters: usize) -> f64 {
    let n = g.nrows();
    let apply = |v: &[f64]| -> Vec<f64> {
        let x = DVector::from_column_slice(v);
        (g * x).iter().cloned().collect()
    };
    let lmax = power_max(apply, n, iters);
    let shift = lmax.abs() * 1.01 + 1e-300;
    let shifted = |v: &[f64]| -> Vec<f64> {
        let x = DVector::from_column_slice(v);
        let gx = g * &x;
        (0..n).map(|i| shift * x[i] - gx[i]).collect()
    };
    let top = power_max(shifted, n, iters);
    let mut lmin = shift - top;
    // Rayleigh refinement with inverse iteration when the matrix is invertible.
    if let Some(chol) = g.clone().cholesky() {
        let mut v = DVector::from_element(n, 1.0);
        for _ in 0..50 {
            let nv = v.norm();
            v /= nv;
            let nvv = chol.solve(&v);
            let rq = v.dot(&(g * &v));
            if nvv.norm() == 0.0 {
                break;
            }
            v = nvv;
            lmin = lmin.min(rq);
        }
        let nv = v.norm();
        v /= nv;
        lmin = lmin.min(v.dot(&(g * &v)));
    }
    lmin
}

/// Spectral norm of a general matrix via power iteration on `A^T A`.
pub fn spectral_norm(a: &DMatrix<f64>, iters: usize) -> f64 {
    let apply = |v: &[f64]| -> Vec<f64> {
        let x = DVector::from_column_slice(v);
        (a.transpose() * (a * x)).iter().cloned().collect()
    };
    power_max(apply, a.ncols(), iters).max(0.0).sqrt()
}
