#![allow(dead_code)]

use nalgebra::DMatrix;

/// One-sided Jacobi SVD. Returns `(u, sigma, v)` with sigma descending,
/// `u` of size m x k and `v` of size n x k, k = min(m, n).
pub fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    if a.nrows() < a.ncols() {
        let (u, s, v) = jacobi_svd(&a.transpose());
        return (v, s, u);
    }
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha: f64 = w.column(i).norm_squared();
                let beta: f64 = w.column(j).norm_squared();
                let gamma: f64 = w.column(i).dot(&w.column(j));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (x, y) = (w[(r, i)], w[(r, j)]);
                    w[(r, i)] = c * x - s * y;
                    w[(r, j)] = s * x + c * y;
                }
                for r in 0..n {
                    let (x, y) = (v[(r, i)], v[(r, j)]);
                    v[(r, i)] = c * x - s * y;
                    v[(r, j)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut u = DMatrix::zeros(m, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        sigma.push(norms[j]);
        if norms[j] > 0.0 {
            u.set_column(k, &(w.column(j) / norms[j]));
        }
        vs.set_column(k, &v.column(j));
    }
    (u, sigma, vs)
}

pub fn jacobi_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    jacobi_svd(a).1
}

/// Best rank-r approximation from the Jacobi factors.
pub fn jacobi_truncate(a: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let (u, s, v) = jacobi_svd(a);
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for k in 0..r.min(s.len()) {
        out += u.column(k) * v.column(k).transpose() * s[k];
    }
    out
}

/// Column-stacked `vec(X)` by explicit loops.
pub fn stack(x: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            out.push(x[(i, j)]);
        }
    }
    out
}

/// Dense `A vec(X)` by explicit loops.
pub fn matvec(a: &DMatrix<f64>, x: &DMatrix<f64>) -> Vec<f64> {
    let v = stack(x);
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|k| a[(i, k)] * v[k]).sum()).collect()
}
