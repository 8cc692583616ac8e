//! Monte Carlo column-sampling approximation of the leading singular triples
//! (the "linear time SVD" scheme).
//!
//! `c_s` columns are drawn with replacement according to `probs`, rescaled by
//! `1/sqrt(c_s p_i)`, and the small Gram matrix `C^T C` is diagonalised
//! exactly. The left singular vectors of `C` stand in for those of `A`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, DenseMatrix, SvdFactors};
use crate::rng::seeded;

/// Singular values of `C` at or below `DROP_TOL * sigma_1(C)` are discarded.
pub const DROP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerParams {
    /// Number of sampled columns.
    pub c_s: usize,
    /// Target rank.
    pub k_s: usize,
    /// Column sampling probabilities, length `n`.
    pub probs: Vec<f64>,
    pub seed: u64,
}

impl SamplerParams {
    /// Uniform probabilities `1/n`.
    pub fn uniform(n: usize, c_s: usize, k_s: usize, seed: u64) -> Self {
        SamplerParams { c_s, k_s, probs: vec![1.0 / n as f64; n], seed }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(1 <= self.k_s && self.k_s <= self.c_s && self.c_s <= n) {
            return Err(invalid(format!("need 1 <= k_s ({}) <= c_s ({}) <= n ({n})", self.k_s, self.c_s)));
        }
        if self.probs.len() != n {
            return Err(invalid(format!("probability vector has length {}, expected {n}", self.probs.len())));
        }
        if self.probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(invalid("probabilities must be finite and nonnegative"));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Approximate leading left singular vectors and singular values.
#[derive(Debug, Clone)]
pub struct ApproxSvd {
    /// `m x k_eff`.
    pub h: DenseMatrix,
    /// `sigma_t(C)`, nonincreasing and positive.
    pub sigma: Vec<f64>,
    /// Sampled column indices, in draw order.
    pub sampled: Vec<usize>,
}

impl ApproxSvd {
    pub fn k_eff(&self) -> usize {
        self.sigma.len()
    }

    /// Every sampled column was zero; no factors were produced.
    pub fn is_degenerate(&self) -> bool {
        self.sigma.is_empty()
    }
}

/// Draws the column indices and assembles `C` with
/// `C[:, t] = A[:, i_t] / sqrt(c_s p_{i_t})`.
pub fn sample_columns(a: &DenseMatrix, params: &SamplerParams) -> Result<(DenseMatrix, Vec<usize>)> {
    params.validate(a.ncols())?;
    let dist = WeightedIndex::new(&params.probs).map_err(|e| invalid(format!("bad probabilities: {e}")))?;
    let mut rng = seeded(params.seed);
    let idx: Vec<usize> = (0..params.c_s).map(|_| dist.sample(&mut rng)).collect();
    let mut c = DenseMatrix::zeros(a.nrows(), params.c_s);
    for (t, &i) in idx.iter().enumerate() {
        let s = 1.0 / (params.c_s as f64 * params.probs[i]).sqrt();
        c.set_column(t, &(a.column(i) * s));
    }
    Ok((c, idx))
}

/// Approximate top-`k_s` left singular triple of `a`.
///
/// `sigma_t(C)` is taken as `||C y_t||_2`, which equals the square root of
/// the `t`-th eigenvalue of `C^T C` but keeps full relative accuracy for
/// small values.
pub fn linear_time_svd(a: &DenseMatrix, params: &SamplerParams) -> Result<ApproxSvd> {
    let (c, sampled) = sample_columns(a, params)?;
    let eig = SymmetricEigen::try_new(c.tr_mul(&c), 5.0 * f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("eigendecomposition of C^T C failed".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let mut cols = Vec::new();
    let mut sigma = Vec::new();
    let mut sigma1 = None;
    for &i in order.iter().take(params.k_s) {
        let cy = &c * eig.eigenvectors.column(i);
        let s = cy.norm();
        let s1 = *sigma1.get_or_insert(s);
        if s1 == 0.0 || s <= DROP_TOL * s1 {
            break;
        }
        cols.push(cy / s);
        sigma.push(s);
    }
    let h = if cols.is_empty() { DMatrix::zeros(a.nrows(), 0) } else { DMatrix::from_columns(&cols) };
    Ok(ApproxSvd { h, sigma, sampled })
}

/// `A_k = H diag(sigma) (A^T H diag(1/sigma))^T = H H^T A`.
pub fn reconstruct(approx: &ApproxSvd, a: &DenseMatrix) -> Result<DenseMatrix> {
    if approx.is_degenerate() {
        return Err(Error::Degenerate("approximate SVD returned no factors".into()));
    }
    if approx.h.nrows() != a.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rows", approx.h.nrows()),
            got: format!("{} rows", a.nrows()),
        });
    }
    Ok(&approx.h * approx.h.tr_mul(a))
}

/// Rank-`<= k_eff` factorisation of `H H^T A`: with `H^T A = W S Z^T`, the
/// factors are `(H W, S, Z)`. Only `k_eff x n` work beyond the projection.
pub fn reconstruct_factors(approx: &ApproxSvd, a: &DenseMatrix) -> Result<SvdFactors> {
    if approx.is_degenerate() {
        return Err(Error::Degenerate("approximate SVD returned no factors".into()));
    }
    let small = approx.h.tr_mul(a);
    let f = linalg::svd(&small, linalg::Truncation::Full)?;
    Ok(SvdFactors { u: &approx.h * f.u, sigma: f.sigma, v: f.v })
}
