//! Low-rank matrix recovery from affine measurements.
//!
//! Recovers `X` of low rank from `b = A(X)` with iterative hard thresholding
//! (IHT), hard thresholding with matrix shrinkage (IHTMS), fixed-point
//! continuation (FPC, FPCAr, FPCA), optionally backed by a Monte Carlo
//! column-sampling SVD. Also provides restricted-isometry diagnostics and a
//! benchmark harness for random recovery experiments.

pub mod approx_svd;
pub mod bench;
pub mod error;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod sensing;
pub mod solvers;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, SvdFactors};
pub use sensing::LinearMap;
pub use solvers::{Problem, SolveTrace, SolverConfig, SolverKind};
