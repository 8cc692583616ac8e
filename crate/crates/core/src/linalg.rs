//! Dense matrix primitives: exact SVD and the two spectral thresholding
//! operators (best rank-r truncation and singular value soft shrinkage).
//!
//! Matrices are `nalgebra::DMatrix<f64>`, stored column-major, so the
//! column-stacking vectorisation used by the sensing operators is a plain
//! reinterpretation of the storage slice.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Real dense matrix used for iterates, ground truths and operator forms.
pub type DenseMatrix = DMatrix<f64>;

/// Orthonormality tolerance per column for [`SvdFactors`] checks.
pub const ORTHO_TOL: f64 = 1e-8;

/// How many singular triples to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    Full,
    Top(usize),
}

/// A (possibly truncated) singular value decomposition `U diag(sigma) V^T`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `m x k`, orthonormal columns.
    pub u: DenseMatrix,
    /// Nonincreasing, nonnegative.
    pub sigma: Vec<f64>,
    /// `n x k`, orthonormal columns.
    pub v: DenseMatrix,
}

impl SvdFactors {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.nrows(), self.v.nrows())
    }

    /// `U diag(sigma) V^T`.
    pub fn recompose(&self) -> DenseMatrix {
        let (m, n) = self.shape();
        if self.is_empty() {
            return DenseMatrix::zeros(m, n);
        }
        let mut us = self.u.clone();
        for (j, &s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(s);
        }
        us * self.v.transpose()
    }

    /// Keeps the leading `r` triples (all of them if fewer exist).
    pub fn truncate(&self, r: usize) -> SvdFactors {
        let k = r.min(self.len());
        SvdFactors {
            u: self.u.columns(0, k).into_owned(),
            sigma: self.sigma[..k].to_vec(),
            v: self.v.columns(0, k).into_owned(),
        }
    }

    /// Soft shrinkage of the singular values, `(sigma - nu)_+`. Triples
    /// shrunk to zero are dropped.
    pub fn shrink(&self, nu: f64) -> SvdFactors {
        let keep = self.sigma.iter().take_while(|&&s| s - nu > 0.0).count();
        let mut out = self.truncate(keep);
        for s in &mut out.sigma {
            *s -= nu;
        }
        out
    }

    /// Number of singular values strictly above `rel_tol * sigma_1`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        match self.sigma.first() {
            Some(&s1) if s1 > 0.0 => self.sigma.iter().filter(|&&s| s > rel_tol * s1).count(),
            _ => 0,
        }
    }

    /// `(||U^T U - I||_F, ||V^T V - I||_F)`.
    pub fn orthonormality_defect(&self) -> (f64, f64) {
        let k = self.len();
        let eye = DenseMatrix::identity(k, k);
        ((self.u.tr_mul(&self.u) - &eye).norm(), (self.v.tr_mul(&self.v) - &eye).norm())
    }

    /// True when both factor defects are within `ORTHO_TOL * k`.
    pub fn is_orthonormal(&self) -> bool {
        let tol = ORTHO_TOL * (self.len().max(1) as f64);
        let (du, dv) = self.orthonormality_defect();
        du <= tol && dv <= tol
    }
}

/// Exact SVD of `x`, sorted by nonincreasing singular value.
///
/// Fails with [`Error::Numerical`] when the decomposition does not converge or
/// the input holds non-finite entries.
pub fn svd(x: &DenseMatrix, keep: Truncation) -> Result<SvdFactors> {
    let (m, n) = x.shape();
    if m == 0 || n == 0 {
        return Err(invalid("svd of an empty matrix"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("svd input has non-finite entries".into()));
    }
    let k_full = m.min(n);
    let k = match keep {
        Truncation::Full => k_full,
        Truncation::Top(k) if (1..=k_full).contains(&k) => k,
        Truncation::Top(k) => return Err(invalid(format!("truncation rank {k} outside 1..={k_full}"))),
    };
    // faer's divide-and-conquer SVD; nalgebra's QR sweep loses accuracy on
    // some rank-deficient inputs, which is exactly what the iterates are.
    let a = faer::Mat::<f64>::from_fn(m, n, |i, j| x[(i, j)]);
    let dec = a.thin_svd().map_err(|e| Error::Numerical(format!("svd did not converge: {e:?}")))?;
    let (fu, fv) = (dec.U(), dec.V());
    let sigma: Vec<f64> = dec.S().column_vector().iter().take(k).map(|s| s.max(0.0)).collect();
    let u = DMatrix::from_fn(m, k, |i, j| fu[(i, j)]);
    let v = DMatrix::from_fn(n, k, |i, j| fv[(i, j)]);
    Ok(SvdFactors { u, sigma, v })
}

/// Singular values only.
pub fn singular_values(x: &DenseMatrix) -> Result<Vec<f64>> {
    Ok(svd(x, Truncation::Full)?.sigma)
}

/// Best rank-`r` approximation in factored form.
pub fn hard_threshold_factors(y: &DenseMatrix, r: usize) -> Result<SvdFactors> {
    let k = y.nrows().min(y.ncols());
    if r == 0 || r > k {
        return Err(invalid(format!("rank {r} outside 1..={k}")));
    }
    svd(y, Truncation::Top(r))
}

/// Best rank-`r` approximation `R_r(Y)`; ties at the cut keep the first `r`
/// triples in decomposition order.
pub fn hard_threshold(y: &DenseMatrix, r: usize) -> Result<DenseMatrix> {
    Ok(hard_threshold_factors(y, r)?.recompose())
}

/// Singular value soft shrinkage `S_nu(X) = U diag((sigma - nu)_+) V^T`.
pub fn soft_shrink(x: &DenseMatrix, nu: f64) -> Result<DenseMatrix> {
    if !(nu >= 0.0) {
        return Err(invalid(format!("shrinkage threshold must be nonnegative, got {nu}")));
    }
    Ok(svd(x, Truncation::Full)?.shrink(nu).recompose())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub frobenius: f64,
    pub spectral: f64,
    pub nuclear: f64,
}

pub fn norms(x: &DenseMatrix) -> Result<Norms> {
    let sigma = singular_values(x)?;
    Ok(Norms { frobenius: x.norm(), spectral: sigma.first().copied().unwrap_or(0.0), nuclear: sigma.iter().sum() })
}

pub fn nuclear_norm(x: &DenseMatrix) -> Result<f64> {
    Ok(singular_values(x)?.iter().sum())
}

/// Trace inner product `<A, B> = Tr(A^T B)`.
pub fn inner(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.dot(b)
}

/// Column-stacking vectorisation.
pub fn vec(x: &DenseMatrix) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &DVector<f64>, m: usize, n: usize) -> DenseMatrix {
    DenseMatrix::from_column_slice(m, n, v.as_slice())
}

/// Number of singular values above `rel_tol * sigma_1`.
pub fn numerical_rank(x: &DenseMatrix, rel_tol: f64) -> Result<usize> {
    Ok(svd(x, Truncation::Full)?.rank(rel_tol))
}
