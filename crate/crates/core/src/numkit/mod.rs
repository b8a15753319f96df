//! Dense matrices, seeded randomness, small linear algebra and radial kernels.

pub mod kernel;
pub mod linalg;
pub mod matrix;
pub mod rng;

pub use kernel::{kernel_normalizer, unit_sphere_area, KernelProfile, RadialKernel};
pub use linalg::{
    cholesky, cholesky_solve, haar_orthogonal, householder_qr, min_norm_solve, spd_inverse,
    sym_lambda_max, sym_lambda_min, MinNormSolution, MinNormSolver,
};
pub use matrix::{axpy, dot, max_abs_diff, norm, norm_sq, sub, Matrix};
pub use rng::Rng;
