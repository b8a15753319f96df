use crate::error::{Error, Result};

use super::matrix::{dot, norm, Matrix};
use super::rng::Rng;

/// Iteration cap for [`sym_lambda_max`].
pub const POWER_ITERATION_CAP: usize = 10_000;
/// Default tolerance for [`sym_lambda_max`].
pub const POWER_ITERATION_TOL: f64 = 1e-8;

/// Householder QR of an `m x n` matrix with `m >= n`: returns the full
/// orthogonal `Q` (`m x m`) and upper-triangular `R` (`m x n`).
pub fn householder_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::Shape(format!("QR needs rows >= cols, got {m}x{n}")));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n);
    for k in 0..n.min(m.saturating_sub(1)) {
        let x: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        let xnorm = norm(&x);
        if xnorm == 0.0 {
            continue;
        }
        let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = norm(&v);
        if vnorm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|vi| *vi /= vnorm);
        for j in k..n {
            let s: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
            for i in k..m {
                r[(i, j)] -= 2.0 * v[i - k] * s;
            }
        }
        for i in (k + 1)..m {
            r[(i, k)] = 0.0;
        }
        reflectors.push((k, v));
    }
    let mut q = Matrix::identity(m);
    for (k, v) in reflectors.iter().rev() {
        let k = *k;
        for j in 0..m {
            let s: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
            if s != 0.0 {
                for i in k..m {
                    q[(i, j)] -= 2.0 * v[i - k] * s;
                }
            }
        }
    }
    Ok((q, r))
}

/// Haar-distributed `m x m` orthogonal matrix: QR of a standard Gaussian
/// matrix with columns of `Q` flipped so that `R` has a positive diagonal.
pub fn haar_orthogonal(m: usize, rng: &mut Rng) -> Result<Matrix> {
    if m == 0 {
        return Err(Error::InvalidDimension("haar_orthogonal needs m >= 1".into()));
    }
    let g = Matrix::new(m, m, rng.normal_vec(m * m))?;
    let (mut q, r) = householder_qr(&g)?;
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

/// Cholesky factor `L` (lower triangular) of a symmetric positive-definite
/// matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "cholesky needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let scale = a.diag().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let floor = scale * 1e-13;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(d > floor) {
            return Err(Error::Singular(format!(
                "pivot {j} is {d:e} (matrix scale {scale:e})"
            )));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.rows();
    if b.len() != n {
        return Err(Error::Shape("cholesky_solve rhs".into()));
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - dot(&l.row(i)[..i], &y[..i])) / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let n = a.rows();
    let mut cols = Vec::with_capacity(n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        cols.push(cholesky_solve(&l, &e)?);
        e[j] = 0.0;
    }
    // columns of a symmetric inverse are its rows
    Matrix::from_rows(&cols)?.symmetrized()
}

/// Result of [`min_norm_solve`].
#[derive(Clone, Debug)]
pub struct MinNormSolution {
    pub x: Vec<f64>,
    /// `||W x − y||₂`
    pub residual: f64,
}

fn gram_system(w: &Matrix, ridge: f64) -> Result<Matrix> {
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::Config(format!("ridge must be >= 0, got {ridge}")));
    }
    let (p, q) = w.shape();
    let mut g = if p <= q { w.matmul_t(w)? } else { w.t_matmul(w)? };
    for i in 0..g.rows() {
        g[(i, i)] += ridge;
    }
    g.symmetrized()
}

/// Minimum-norm (ridge-regularised) least-squares solution of `W x = y`.
///
/// For `p <= q` this is `Wᵀ(WWᵀ + ridge·I)⁻¹ y`, otherwise the normal
/// equations `(WᵀW + ridge·I)⁻¹ Wᵀ y`.
pub fn min_norm_solve(w: &Matrix, y: &[f64], ridge: f64) -> Result<MinNormSolution> {
    let (p, q) = w.shape();
    if y.len() != p {
        return Err(Error::Shape(format!(
            "rhs of length {} for a {p}x{q} system",
            y.len()
        )));
    }
    let g = gram_system(w, ridge)?;
    let l = cholesky(&g)?;
    let x = if p <= q {
        let a = cholesky_solve(&l, y)?;
        w.t_matvec(&a)?
    } else {
        cholesky_solve(&l, &w.t_matvec(y)?)?
    };
    let wx = w.matvec(&x)?;
    let residual = norm(&super::matrix::sub(&wx, y));
    Ok(MinNormSolution { x, residual })
}

/// Precomputed solution operator for repeated [`min_norm_solve`] calls with
/// the same system matrix.
#[derive(Clone, Debug)]
pub struct MinNormSolver {
    system: Matrix,
    operator: Matrix,
}

impl MinNormSolver {
    pub fn new(w: &Matrix, ridge: f64) -> Result<Self> {
        let (p, q) = w.shape();
        let g_inv = spd_inverse(&gram_system(w, ridge)?)?;
        let operator = if p <= q {
            w.t_matmul(&g_inv)?
        } else {
            g_inv.matmul_t(w)?
        };
        Ok(Self {
            system: w.clone(),
            operator,
        })
    }

    pub fn system(&self) -> &Matrix {
        &self.system
    }

    /// The `q x p` solution operator.
    pub fn operator(&self) -> &Matrix {
        &self.operator
    }

    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.operator.matvec(y)
    }

    /// Solves for every column of `ys` (`p x n`) at once.
    pub fn solve_columns(&self, ys: &Matrix) -> Result<Matrix> {
        self.operator.matmul(ys)
    }
}

/// Largest (signed) eigenvalue of a symmetric matrix by shifted power
/// iteration.
///
/// The input is symmetrized first. The shift `c` is the largest absolute row
/// sum, which bounds the spectral radius, so `M + cI` is positive
/// semi-definite and its dominant eigenvalue is `λ_max + c`.
pub fn sym_lambda_max(m: &Matrix, tol: f64) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "eigenvalue of a non-square {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    if n == 0 {
        return Err(Error::InvalidDimension("empty matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let s = m.symmetrized()?;
    let shift = (0..n)
        .map(|i| s.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    if shift == 0.0 {
        return Ok(0.0);
    }
    let mut b = s;
    for i in 0..n {
        b[(i, i)] += shift;
    }

    // fixed start vector: deterministic and almost surely not orthogonal to
    // the dominant eigenspace
    let mut v = Rng::new(0x5eed_1a3b, n as u64).unit_vector(n);
    let mut rho = f64::NAN;
    let mut prev_delta = f64::NAN;
    for _ in 0..POWER_ITERATION_CAP {
        let w = b.matvec(&v)?;
        let next_rho = dot(&v, &w);
        let wn = norm(&w);
        if wn == 0.0 {
            return Ok(-shift);
        }
        v = w.into_iter().map(|x| x / wn).collect();
        let delta = (next_rho - rho).abs();
        rho = next_rho;
        let scale = (rho - shift).abs().max(1.0);
        if delta == 0.0 {
            return Ok(rho - shift);
        }
        if prev_delta.is_finite() {
            // geometric tail estimate of the remaining error
            let q = delta / prev_delta;
            if q < 1.0 && delta * q / (1.0 - q) <= 0.1 * tol * scale && delta <= tol * scale {
                return Ok(rho - shift);
            }
        }
        prev_delta = delta;
    }
    Err(Error::Convergence {
        iterations: POWER_ITERATION_CAP,
        last_estimate: rho - shift,
        last_vector: v,
    })
}

/// Smallest eigenvalue of a symmetric matrix, `−λ_max(−M)`.
pub fn sym_lambda_min(m: &Matrix, tol: f64) -> Result<f64> {
    Ok(-sym_lambda_max(&m.scale(-1.0), tol)?)
}
