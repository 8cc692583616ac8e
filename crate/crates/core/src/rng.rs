//! Seeded random streams.
//!
//! Every random quantity in the crate comes from a `ChaCha8Rng` seeded with a
//! 64-bit value. Child streams are derived with [`derive_seed`], a SplitMix64
//! fold over the parent seed and a list of integer labels, so a seed plus
//! labels always names the same stream on every platform.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed: `h = splitmix64(seed)`, then for each label
/// `h = splitmix64(h ^ label)`.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(splitmix64(seed), |h, &l| splitmix64(h ^ l))
}

/// i.i.d. N(0,1) entries, generated in column-major order.
pub fn gaussian_matrix(rng: &mut Rng, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vector(rng: &mut Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

/// `G H^T` with standard normal `G` (m x r) and `H` (n x r).
pub fn gaussian_low_rank(rng: &mut Rng, m: usize, n: usize, r: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, m, r);
    let h = gaussian_matrix(rng, n, r);
    g * h.transpose()
}

/// Rank-`r` matrix `G H^T / ||G H^T||_F`.
pub fn unit_low_rank(rng: &mut Rng, m: usize, n: usize, r: usize) -> DMatrix<f64> {
    let x = gaussian_low_rank(rng, m, n, r);
    let nrm = x.norm();
    x / nrm
}

/// `m x k` matrix with orthonormal columns (QR of a Gaussian matrix).
pub fn orthonormal_columns(rng: &mut Rng, m: usize, k: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, m, k).qr().q()
}
