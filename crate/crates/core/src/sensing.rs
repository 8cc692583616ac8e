//! Linear sensing operators `A: R^{m x n} -> R^p`, their adjoints, spectral
//! bounds, and restricted-isometry diagnostics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::rng::{self, derive_seed, seeded};

/// Relative tolerance of the power iteration behind [`spectral_upper_bound`].
pub const POWER_TOL: f64 = 1e-6;
/// Iteration cap of the power iteration.
pub const POWER_MAX_ITERS: usize = 20_000;
/// Seed of the power iteration's start vector.
const POWER_SEED: u64 = 0x5eed_0f_a11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    /// `p x mn` matrix with i.i.d. N(0, 1/p) entries regenerated from the seed.
    DenseGaussian,
    /// Vectorisation, `p = mn`.
    Identity,
    /// Samples `p` distinct entries (column-major positions) chosen from the seed.
    EntryMask,
    /// Caller-supplied `p x mn` matrix; cannot be serialised as a header.
    Dense,
}

/// Serialised form of an operator. The dense payload is never stored; it is
/// regenerated from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapHeader {
    pub kind: MapKind,
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

fn is_one(x: &f64) -> bool {
    *x == 1.0
}

#[derive(Debug, Clone)]
enum Payload {
    Matrix(DMatrix<f64>),
    Identity,
    Mask(Vec<usize>),
}

/// A linear measurement operator together with its construction data.
#[derive(Debug, Clone)]
pub struct LinearMap {
    kind: MapKind,
    m: usize,
    n: usize,
    p: usize,
    seed: u64,
    scale: f64,
    payload: Payload,
}

impl LinearMap {
    /// Dense Gaussian ensemble: row `i` of `A` is drawn after rows `0..i`,
    /// each entry `N(0,1)/sqrt(p)`, from `ChaCha8Rng::seed_from_u64(seed)`.
    pub fn gaussian(m: usize, n: usize, p: usize, seed: u64) -> Result<Self> {
        check_dims(m, n)?;
        if p == 0 {
            return Err(invalid("measurement count p must be positive"));
        }
        let mut rng = seeded(seed);
        let mn = m * n;
        let s = 1.0 / (p as f64).sqrt();
        // Row-major draw so a prefix of rows does not depend on p.
        let rows = rng::gaussian_matrix(&mut rng, mn, p);
        let a = rows.transpose() * s;
        Ok(LinearMap { kind: MapKind::DenseGaussian, m, n, p, seed, scale: 1.0, payload: Payload::Matrix(a) })
    }

    pub fn identity(m: usize, n: usize) -> Result<Self> {
        check_dims(m, n)?;
        Ok(LinearMap { kind: MapKind::Identity, m, n, p: m * n, seed: 0, scale: 1.0, payload: Payload::Identity })
    }

    /// Observes `p` distinct entries chosen uniformly at random.
    pub fn entry_mask(m: usize, n: usize, p: usize, seed: u64) -> Result<Self> {
        check_dims(m, n)?;
        if p == 0 || p > m * n {
            return Err(invalid(format!("mask size {p} outside 1..={}", m * n)));
        }
        let mut idx = rand::seq::index::sample(&mut seeded(seed), m * n, p).into_vec();
        idx.sort_unstable();
        Ok(LinearMap { kind: MapKind::EntryMask, m, n, p, seed, scale: 1.0, payload: Payload::Mask(idx) })
    }

    /// Wraps an explicit `p x mn` matrix acting on column-stacked inputs.
    pub fn from_matrix(m: usize, n: usize, a: DMatrix<f64>) -> Result<Self> {
        check_dims(m, n)?;
        if a.ncols() != m * n || a.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("p x {}", m * n),
                got: format!("{} x {}", a.nrows(), a.ncols()),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(invalid("operator matrix has non-finite entries"));
        }
        let p = a.nrows();
        Ok(LinearMap { kind: MapKind::Dense, m, n, p, seed: 0, scale: 1.0, payload: Payload::Matrix(a) })
    }

    pub fn from_header(h: &MapHeader) -> Result<Self> {
        let base = match h.kind {
            MapKind::DenseGaussian => Self::gaussian(h.m, h.n, h.p, h.seed)?,
            MapKind::Identity => {
                if h.p != h.m * h.n {
                    return Err(invalid("identity map requires p = m*n"));
                }
                Self::identity(h.m, h.n)?
            }
            MapKind::EntryMask => Self::entry_mask(h.m, h.n, h.p, h.seed)?,
            MapKind::Dense => return Err(invalid("explicit dense maps have no seed-based header")),
        };
        base.scaled(h.scale)
    }

    pub fn header(&self) -> Result<MapHeader> {
        if self.kind == MapKind::Dense {
            return Err(invalid("explicit dense maps have no seed-based header"));
        }
        Ok(MapHeader { kind: self.kind, m: self.m, n: self.n, p: self.p, seed: self.seed, scale: self.scale })
    }

    /// Multiplies the operator by `factor`.
    pub fn scaled(mut self, factor: f64) -> Result<Self> {
        if !factor.is_finite() {
            return Err(invalid("scale factor must be finite"));
        }
        self.scale *= factor;
        Ok(self)
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn measurements(&self) -> usize {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `A(X)`; for matrix-backed maps this is `A vec(X)`.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DVector<f64>> {
        if x.shape() != (self.m, self.n) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} x {}", self.m, self.n),
                got: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        Ok(self.apply_unchecked(x))
    }

    pub(crate) fn apply_unchecked(&self, x: &DenseMatrix) -> DVector<f64> {
        let flat = x.as_slice();
        let mut out = match &self.payload {
            Payload::Matrix(a) => a * DVector::from_column_slice(flat),
            Payload::Identity => DVector::from_column_slice(flat),
            Payload::Mask(idx) => DVector::from_iterator(idx.len(), idx.iter().map(|&i| flat[i])),
        };
        if self.scale != 1.0 {
            out *= self.scale;
        }
        out
    }

    /// `A*(y)`.
    pub fn adjoint(&self, y: &DVector<f64>) -> Result<DenseMatrix> {
        if y.len() != self.p {
            return Err(Error::ShapeMismatch {
                expected: format!("length {}", self.p),
                got: format!("length {}", y.len()),
            });
        }
        Ok(self.adjoint_unchecked(y))
    }

    pub(crate) fn adjoint_unchecked(&self, y: &DVector<f64>) -> DenseMatrix {
        let mut out = match &self.payload {
            Payload::Matrix(a) => linalg::unvec(&a.tr_mul(y), self.m, self.n),
            Payload::Identity => linalg::unvec(y, self.m, self.n),
            Payload::Mask(idx) => {
                let mut z = DenseMatrix::zeros(self.m, self.n);
                let flat = z.as_mut_slice();
                for (&i, &v) in idx.iter().zip(y.iter()) {
                    flat[i] = v;
                }
                z
            }
        };
        if self.scale != 1.0 {
            out *= self.scale;
        }
        out
    }

    /// `A*(A(X))`.
    pub fn normal(&self, x: &DenseMatrix) -> DenseMatrix {
        self.adjoint_unchecked(&self.apply_unchecked(x))
    }

    /// The explicit `p x mn` matrix, when the map is matrix-backed.
    pub fn matrix(&self) -> Option<DMatrix<f64>> {
        match &self.payload {
            Payload::Matrix(a) => Some(a * self.scale),
            _ => None,
        }
    }

    /// Lower bound on the smallest eigenvalue of `A*A`. Zero whenever `p < mn`.
    pub fn min_eigen_lower_bound(&self) -> f64 {
        let mn = self.m * self.n;
        let s2 = self.scale * self.scale;
        match &self.payload {
            Payload::Identity => s2,
            Payload::Mask(idx) => {
                if idx.len() == mn {
                    s2
                } else {
                    0.0
                }
            }
            Payload::Matrix(a) => {
                if self.p < mn {
                    return 0.0;
                }
                let gram = a.tr_mul(a) * s2;
                let eig = SymmetricEigen::new(gram).eigenvalues;
                let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = eig.iter().copied().fold(0.0, f64::max);
                (lo - 1e-12 * hi).max(0.0)
            }
        }
    }
}

fn check_dims(m: usize, n: usize) -> Result<()> {
    if m == 0 || n == 0 {
        return Err(invalid("matrix dimensions must be positive"));
    }
    Ok(())
}

/// Largest eigenvalue of `A*A`.
///
/// Identity and mask maps are handled in closed form. Matrix-backed maps use
/// power iteration from a fixed seeded start vector, stopping when the
/// eigen-residual falls below `POWER_TOL * lambda` or the Rayleigh quotient
/// stalls to `1e-3 * POWER_TOL` relative change.
pub fn spectral_upper_bound(map: &LinearMap) -> Result<f64> {
    let s2 = map.scale * map.scale;
    match &map.payload {
        Payload::Identity | Payload::Mask(_) => return Ok(s2),
        Payload::Matrix(_) => {}
    }
    let (m, n) = map.shape();
    let mut v = rng::gaussian_matrix(&mut seeded(POWER_SEED), m, n);
    v /= v.norm();
    let mut prev = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        let w = map.normal(&v);
        let lam = linalg::inner(&v, &w);
        let wn = w.norm();
        if wn == 0.0 || lam <= 0.0 {
            return Ok(0.0);
        }
        let res = (&w - &v * lam).norm();
        if res <= POWER_TOL * lam || ((lam - prev) / lam).abs() <= 1e-3 * POWER_TOL {
            return Ok(lam);
        }
        prev = lam;
        v = w / wn;
    }
    Err(Error::Numerical(format!("power iteration did not converge in {POWER_MAX_ITERS} iterations")))
}

/// Global certificate `delta_ub = max(lambda_max - 1, 1 - lambda_min_lb, 0)`,
/// valid as an upper bound on every `delta_r`. Power-iteration estimates are
/// inflated by `1 + POWER_TOL` first.
pub fn rip_certificate(map: &LinearMap) -> Result<f64> {
    let mut lam = spectral_upper_bound(map)?;
    if matches!(map.payload, Payload::Matrix(_)) {
        lam *= 1.0 + POWER_TOL;
    }
    let lo = map.min_eigen_lower_bound();
    Ok((lam - 1.0).max(1.0 - lo).max(0.0))
}

/// Sampled restricted isometry constant with a certified upper bound.
#[derive(Debug, Clone, Serialize)]
pub struct RipEstimate {
    pub r: usize,
    pub delta_lower: f64,
    pub delta_upper: f64,
    pub trials: usize,
    pub seed: u64,
    /// Unit-Frobenius matrix of rank `<= r` attaining `delta_lower`.
    #[serde(skip)]
    pub witness: DenseMatrix,
}

/// Lower-bounds `delta_r` by sampling unit-Frobenius matrices of rank `<= r`.
///
/// Trial `t` draws Gaussian factor columns `g_s`, `h_s` in pairs from seed
/// `derive_seed(seed, [t])` and scores every prefix `sum_{i<=s} g_i h_i^T`,
/// `s = 1..=r`. The samples for rank `r` therefore contain those for every
/// smaller rank, which makes the estimate nondecreasing in `r`.
pub fn estimate_rip(map: &LinearMap, r: usize, trials: usize, seed: u64) -> Result<RipEstimate> {
    let (m, n) = map.shape();
    if r == 0 || r > m.min(n) {
        return Err(invalid(format!("rank {r} outside 1..={}", m.min(n))));
    }
    if trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    let mut best = -1.0;
    let mut witness = DenseMatrix::zeros(m, n);
    for t in 0..trials {
        let mut rng = seeded(derive_seed(seed, &[t as u64]));
        let mut x = DenseMatrix::zeros(m, n);
        for _ in 0..r {
            let g = rng::gaussian_matrix(&mut rng, m, 1);
            let h = rng::gaussian_matrix(&mut rng, n, 1);
            x += g * h.transpose();
            let nrm = x.norm();
            if nrm == 0.0 {
                continue;
            }
            let xs = &x / nrm;
            let dev = (map.apply_unchecked(&xs).norm_squared() - 1.0).abs();
            if dev > best {
                best = dev;
                witness = xs;
            }
        }
    }
    let delta_upper = rip_certificate(map)?;
    Ok(RipEstimate { r, delta_lower: best.max(0.0), delta_upper, trials, seed, witness })
}

/// Max over `trials` random pairs of `|<A X, y> - <X, A* y>| / (||X||_F ||y||_2)`.
pub fn adjoint_defect(map: &LinearMap, trials: usize, seed: u64) -> f64 {
    let (m, n) = map.shape();
    let mut rng = seeded(seed);
    (0..trials)
        .map(|_| {
            let x = rng::gaussian_matrix(&mut rng, m, n);
            let y = rng::gaussian_vector(&mut rng, map.measurements());
            let lhs = map.apply_unchecked(&x).dot(&y);
            let rhs = linalg::inner(&x, &map.adjoint_unchecked(&y));
            (lhs - rhs).abs() / (x.norm() * y.norm())
        })
        .fold(0.0, f64::max)
}

/// Orthonormal basis, in the trace inner product, of the span of a set of
/// matrices.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    elems: Vec<DenseMatrix>,
}

impl SubspaceBasis {
    /// Modified Gram-Schmidt with one reorthogonalisation pass. Members whose
    /// residual falls below `1e-10` of their original norm are dropped.
    pub fn orthonormalize(set: &[DenseMatrix]) -> Self {
        let mut elems: Vec<DenseMatrix> = Vec::with_capacity(set.len());
        for x in set {
            let orig = x.norm();
            if orig == 0.0 {
                continue;
            }
            let mut q = x.clone();
            for _ in 0..2 {
                for e in &elems {
                    let c = linalg::inner(e, &q);
                    q -= e * c;
                }
            }
            let nrm = q.norm();
            if nrm > 1e-10 * orig {
                elems.push(q / nrm);
            }
        }
        SubspaceBasis { elems }
    }

    /// Rank-one SVD basis `{u_i v_i^T}` of `x` for singular values above
    /// `1e-12 * sigma_1`.
    pub fn svd_basis(x: &DenseMatrix) -> Result<Self> {
        let f = linalg::svd(x, linalg::Truncation::Full)?;
        let k = f.rank(1e-12);
        let elems = (0..k).map(|i| f.u.column(i) * f.v.column(i).transpose()).collect();
        Ok(SubspaceBasis { elems })
    }

    /// Basis of the span of both sets.
    pub fn union(&self, other: &SubspaceBasis) -> Self {
        let all: Vec<DenseMatrix> = self.elems.iter().chain(other.elems.iter()).cloned().collect();
        Self::orthonormalize(&all)
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn elements(&self) -> &[DenseMatrix] {
        &self.elems
    }

    /// `P(X) = sum_i <gamma_i, X> gamma_i`.
    pub fn project(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(x.nrows(), x.ncols());
        for e in &self.elems {
            out += e * linalg::inner(e, x);
        }
        out
    }

    /// `(I - P)(X)`.
    pub fn project_complement(&self, x: &DenseMatrix) -> DenseMatrix {
        x - self.project(x)
    }
}

/// Minimum margin (`rhs - lhs`, unit-norm inputs) of each projected-RIP
/// inequality over the sampled trials. A negative margin is a violation.
#[derive(Debug, Clone, Serialize)]
pub struct IsometryMarginReport {
    pub r: usize,
    pub trials: usize,
    pub delta_ub: f64,
    /// `||P A* b||_F <= sqrt(1 + delta) ||b||_2`.
    pub adjoint_projection: f64,
    /// `||P A*A P X||_F <= (1 + delta) ||P X||_F`.
    pub restricted_upper: f64,
    /// `(1 - delta) ||P X||_F <= ||P A*A P X||_F`.
    pub restricted_lower: f64,
    /// `||P A*A (I - P) X||_F <= delta ||(I - P) X||_F` for `X` in the span of a second set.
    pub cross_term: f64,
    /// `||A X||_2 <= sqrt(1 + delta) (||X||_F + ||X||_* / sqrt(r))`.
    pub nuclear_bound: f64,
}

/// Tolerance on a margin before it counts as a violation.
pub const MARGIN_TOL: f64 = 1e-9;

impl IsometryMarginReport {
    pub fn margins(&self) -> [(&'static str, f64); 5] {
        [
            ("adjoint_projection", self.adjoint_projection),
            ("restricted_upper", self.restricted_upper),
            ("restricted_lower", self.restricted_lower),
            ("cross_term", self.cross_term),
            ("nuclear_bound", self.nuclear_bound),
        ]
    }

    pub fn violations(&self) -> usize {
        self.margins().iter().filter(|(_, m)| *m < -MARGIN_TOL).count()
    }
}

fn random_rank_one_set(rng: &mut rng::Rng, m: usize, n: usize, count: usize) -> Vec<DenseMatrix> {
    (0..count).map(|_| rng::gaussian_matrix(rng, m, 1) * rng::gaussian_matrix(rng, n, 1).transpose()).collect()
}

/// Checks the projected-RIP inequalities using the global certificate from
/// [`rip_certificate`] in place of `delta_r`.
///
/// Per trial: `Psi` is the orthonormalised span of `r` random rank-one
/// matrices. For the cross-term inequality `Psi` and `Psi'` hold `ceil(r/2)`
/// and `r - ceil(r/2)` members so their union stays within rank `r`; when
/// `r = 1` both hold one member.
pub fn check_isometry_margins(map: &LinearMap, r: usize, trials: usize, seed: u64) -> Result<IsometryMarginReport> {
    let (m, n) = map.shape();
    if r == 0 || r > m.min(n) {
        return Err(invalid(format!("rank {r} outside 1..={}", m.min(n))));
    }
    if trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    let delta = rip_certificate(map)?;
    let up = (1.0 + delta).sqrt();
    let r1 = r.div_ceil(2);
    let r2 = (r - r1).max(1);
    let mut rep = IsometryMarginReport {
        r,
        trials,
        delta_ub: delta,
        adjoint_projection: f64::INFINITY,
        restricted_upper: f64::INFINITY,
        restricted_lower: f64::INFINITY,
        cross_term: f64::INFINITY,
        nuclear_bound: f64::INFINITY,
    };
    for t in 0..trials {
        let mut rng = seeded(derive_seed(seed, &[t as u64]));
        let psi = SubspaceBasis::orthonormalize(&random_rank_one_set(&mut rng, m, n, r));

        let mut b = rng::gaussian_vector(&mut rng, map.measurements());
        b /= b.norm();
        let lhs = psi.project(&map.adjoint_unchecked(&b)).norm();
        rep.adjoint_projection = rep.adjoint_projection.min(up - lhs);

        let mut x = rng::gaussian_matrix(&mut rng, m, n);
        x /= x.norm();
        let px = psi.project(&x);
        let pap = psi.project(&map.normal(&px)).norm();
        let pxn = px.norm();
        rep.restricted_upper = rep.restricted_upper.min((1.0 + delta) * pxn - pap);
        rep.restricted_lower = rep.restricted_lower.min(pap - (1.0 - delta) * pxn);

        let psi_a = SubspaceBasis::orthonormalize(&random_rank_one_set(&mut rng, m, n, r1));
        let psi_b = SubspaceBasis::orthonormalize(&random_rank_one_set(&mut rng, m, n, r2));
        let z = rng::gaussian_matrix(&mut rng, m, n);
        let mut xb = psi_b.project(&z);
        xb /= xb.norm();
        let comp = psi_a.project_complement(&xb);
        let lhs = psi_a.project(&map.normal(&comp)).norm();
        rep.cross_term = rep.cross_term.min(delta * comp.norm() - lhs);

        let mut xa = rng::gaussian_matrix(&mut rng, m, n);
        xa /= xa.norm();
        let nuc = linalg::nuclear_norm(&xa)?;
        let ax = map.apply_unchecked(&xa).norm();
        rep.nuclear_bound = rep.nuclear_bound.min(up * (1.0 + nuc / (r as f64).sqrt()) - ax);
    }
    Ok(rep)
}

/// Margin of the best-rank projection inequality
/// `||P_B X - P_B Y||_F <= ||P_B X_r - P_B Y||_F`, where `X = R_r(Y)` and
/// `B` spans the SVD bases of `X` and `X_r`. Returns `rhs - lhs`.
pub fn best_rank_projection_margin(y: &DenseMatrix, x_r: &DenseMatrix, r: usize) -> Result<f64> {
    let x = linalg::hard_threshold(y, r)?;
    let basis = SubspaceBasis::svd_basis(&x)?.union(&SubspaceBasis::svd_basis(x_r)?);
    let py = basis.project(y);
    let lhs = (basis.project(&x) - &py).norm();
    let rhs = (basis.project(x_r) - &py).norm();
    Ok(rhs - lhs)
}
