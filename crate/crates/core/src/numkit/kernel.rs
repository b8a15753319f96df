use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::rng::Rng;

/// Number of cells in the rejection-sampling envelope.
pub const ENVELOPE_CELLS: usize = 1024;
/// Default shape parameter of the truncated Gaussian profile.
pub const DEFAULT_SIGMA: f64 = 1.0 / 3.0;

const QUADRATURE_TOL: f64 = 1e-11;

/// Radial profile `k(ρ)` on `[0, 1)`; zero outside the unit ball.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum KernelProfile {
    /// `exp(−ρ² / (2σ²))`
    TruncatedGaussian { sigma: f64 },
    /// `1 − ρ²`
    Epanechnikov,
    /// `1`
    Uniform,
    #[serde(skip)]
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Default for KernelProfile {
    fn default() -> Self {
        KernelProfile::TruncatedGaussian {
            sigma: DEFAULT_SIGMA,
        }
    }
}

impl fmt::Debug for KernelProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelProfile::TruncatedGaussian { sigma } => {
                write!(f, "TruncatedGaussian {{ sigma: {sigma} }}")
            }
            KernelProfile::Epanechnikov => write!(f, "Epanechnikov"),
            KernelProfile::Uniform => write!(f, "Uniform"),
            KernelProfile::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl PartialEq for KernelProfile {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (KernelProfile::TruncatedGaussian { sigma: a }, KernelProfile::TruncatedGaussian { sigma: b }) => a == b,
            (KernelProfile::Epanechnikov, KernelProfile::Epanechnikov) | (KernelProfile::Uniform, KernelProfile::Uniform) => true,
            (KernelProfile::Custom(a), KernelProfile::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl KernelProfile {
    #[inline]
    pub fn eval(&self, rho: f64) -> f64 {
        match self {
            KernelProfile::TruncatedGaussian { sigma } => (-rho * rho / (2.0 * sigma * sigma)).exp(),
            KernelProfile::Epanechnikov => 1.0 - rho * rho,
            KernelProfile::Uniform => 1.0,
            KernelProfile::Custom(f) => f(rho),
        }
    }

    fn validate(&self) -> Result<()> {
        if let KernelProfile::TruncatedGaussian { sigma } = self {
            if !(*sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::Config(format!("kernel sigma must be positive, got {sigma}")));
            }
        }
        for i in 0..=256 {
            let rho = i as f64 / 256.0 * (1.0 - 1e-12);
            let v = self.eval(rho);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "kernel profile must be finite and nonnegative, k({rho}) = {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Surface area of the unit sphere `S^{m-1}` in `R^m`.
pub fn unit_sphere_area(m: usize) -> f64 {
    match m {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => 2.0 * std::f64::consts::PI / (m as f64 - 2.0) * unit_sphere_area(m - 2),
    }
}

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    // split into panels first so narrow features are not skipped
    let panels = 16;
    let h = (b - a) / panels as f64;
    let rough: f64 = (0..panels)
        .map(|i| {
            let lo = a + i as f64 * h;
            let hi = lo + h;
            simpson(f(lo), f(0.5 * (lo + hi)), f(hi), lo, hi)
        })
        .sum();
    let abs_tol = (tol * rough.abs()).max(1e-300) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + i as f64 * h;
            let hi = lo + h;
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            recurse(f, lo, hi, fa, fm, fb, simpson(fa, fm, fb, lo, hi), abs_tol, 40)
        })
        .sum()
}

/// Normalizing constant `c` of a radial profile in dimension `m`:
/// `Vol(S^{m−1}) · ∫₀¹ c·k(ρ) ρ^{m−1} dρ = 1`.
pub fn kernel_normalizer(profile: &KernelProfile, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidDimension("kernel dimension must be >= 1".into()));
    }
    profile.validate()?;
    let radial = |rho: f64| profile.eval(rho) * rho.powi(m as i32 - 1);
    let mass = unit_sphere_area(m) * integrate(&radial, 0.0, 1.0, QUADRATURE_TOL);
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::DegenerateKernel(mass));
    }
    Ok(1.0 / mass)
}

/// A normalized, rotation-invariant kernel with support in the unit ball.
///
/// With bandwidth `h` its density is
/// `k_h(z₀, z) = c / h^m · k(||z − z₀|| / h) · 1{||z − z₀|| < h}`.
#[derive(Clone)]
pub struct RadialKernel {
    profile: KernelProfile,
    dim: usize,
    normalizer: f64,
    envelope: Vec<f64>,
    cumulative: Vec<f64>,
}

impl fmt::Debug for RadialKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RadialKernel")
            .field("profile", &self.profile)
            .field("dim", &self.dim)
            .field("normalizer", &self.normalizer)
            .finish()
    }
}

impl RadialKernel {
    pub fn new(profile: KernelProfile, dim: usize) -> Result<Self> {
        let normalizer = kernel_normalizer(&profile, dim)?;
        let radial = |rho: f64| profile.eval(rho) * rho.powi(dim as i32 - 1);
        let width = 1.0 / ENVELOPE_CELLS as f64;
        let mut envelope = Vec::with_capacity(ENVELOPE_CELLS);
        let mut cumulative = Vec::with_capacity(ENVELOPE_CELLS);
        let mut total = 0.0;
        for i in 0..ENVELOPE_CELLS {
            let lo = i as f64 * width;
            let peak = (0..=4)
                .map(|j| radial((lo + j as f64 * width / 4.0).min(1.0)))
                .fold(0.0f64, f64::max);
            let height = peak * 1.02;
            envelope.push(height);
            total += height * width;
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::DegenerateKernel(total));
        }
        Ok(Self {
            profile,
            dim,
            normalizer,
            envelope,
            cumulative,
        })
    }

    /// Truncated Gaussian profile with the default `σ = 1/3`.
    pub fn truncated_gaussian(dim: usize) -> Result<Self> {
        Self::new(KernelProfile::default(), dim)
    }

    pub fn profile(&self) -> &KernelProfile {
        &self.profile
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// `k_h(center, z)`.
    pub fn density(&self, center: &[f64], z: &[f64], h: f64) -> f64 {
        debug_assert_eq!(center.len(), z.len());
        let dist = center
            .iter()
            .zip(z)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let r = dist / h;
        if r < 1.0 {
            self.normalizer * self.profile.eval(r) / h.powi(self.dim as i32)
        } else {
            0.0
        }
    }

    /// Radius `ρ ∈ (0, 1]` drawn with density proportional to `k(ρ) ρ^{m−1}`.
    pub fn sample_radial(&self, rng: &mut Rng) -> Result<f64> {
        let width = 1.0 / ENVELOPE_CELLS as f64;
        let total = *self.cumulative.last().expect("non-empty envelope");
        let mut attempts = 0usize;
        loop {
            attempts += 1;
            let target = rng.uniform() * total;
            let cell = self
                .cumulative
                .partition_point(|&c| c <= target)
                .min(ENVELOPE_CELLS - 1);
            let lo = cell as f64 * width;
            let rho = lo + (1.0 - rng.uniform()) * width;
            let f = self.profile.eval(rho) * rho.powi(self.dim as i32 - 1);
            if rng.uniform() * self.envelope[cell] < f {
                return Ok(rho);
            }
            if attempts >= 10_000 {
                return Err(Error::PathologicalProfile {
                    rate: 1.0 / attempts as f64,
                    attempts,
                });
            }
        }
    }

    /// Offset `h·ρ·u` with `u` uniform on the sphere: one draw from
    /// `k_h(0, ·)`.
    pub fn sample_offset(&self, h: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        let rho = self.sample_radial(rng)?;
        let u = rng.unit_vector(self.dim);
        Ok(u.into_iter().map(|x| h * rho * x).collect())
    }

    /// Second moment `τ₂ = ∫ ||z||² k₁(0, z) dz`.
    pub fn second_moment(&self) -> f64 {
        let m = self.dim as i32;
        let f = |rho: f64| self.profile.eval(rho) * rho.powi(m + 1);
        self.normalizer * unit_sphere_area(self.dim) * integrate(&f, 0.0, 1.0, QUADRATURE_TOL)
    }

    /// Roughness `β = ∫ k₁(0, z)² dz`.
    pub fn roughness(&self) -> f64 {
        let m = self.dim as i32;
        let f = |rho: f64| self.profile.eval(rho).powi(2) * rho.powi(m - 1);
        self.normalizer.powi(2)
            * unit_sphere_area(self.dim)
            * integrate(&f, 0.0, 1.0, QUADRATURE_TOL)
    }
}
