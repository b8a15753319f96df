//! Feature robustness: loss change under multiplicative feature
//! perturbations `φ → (I + A)φ`, its Haar and kernel-induced averages, and
//! numeric checks of the identities that tie it to relative flatness.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::{Label, LabeledSet, PlantedDistribution};
use crate::error::{Error, Result};
use crate::flatness::{kappa_max_from_blocks, kappa_tr_double_sum};
use crate::hessian::{hessian_summary, HeadHessianMode};
use crate::net::FeatureSplit;
use crate::numkit::linalg::POWER_ITERATION_TOL;
use crate::numkit::{haar_orthogonal, norm, sym_lambda_max, KernelProfile, Matrix, RadialKernel, Rng};
use crate::parallel::{tree_sum, try_map_indexed};

/// Draws per deterministic chunk in the Monte-Carlo loops.
const CHUNK: usize = 1024;

/// Labels of perturbed feature vectors.
#[derive(Clone, Default)]
pub enum LabelOracle {
    /// Keep the training label of the unperturbed point.
    #[default]
    HoldFixed,
    Function(Arc<dyn Fn(&[f64]) -> Result<Label> + Send + Sync>),
}

impl fmt::Debug for LabelOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelOracle::HoldFixed => f.write_str("HoldFixed"),
            LabelOracle::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl LabelOracle {
    pub fn from_fn(f: impl Fn(&[f64]) -> Result<Label> + Send + Sync + 'static) -> Self {
        LabelOracle::Function(Arc::new(f))
    }

    /// The Bayes label of a planted distribution.
    pub fn planted(dist: &PlantedDistribution) -> Self {
        let dist = dist.clone();
        Self::from_fn(move |z| dist.oracle(z).map(Label::Class))
    }

    /// Label at `z`; `fallback` is the training label of the unperturbed point.
    pub fn label(&self, z: &[f64], fallback: &Label) -> Result<Label> {
        match self {
            LabelOracle::HoldFixed => Ok(fallback.clone()),
            LabelOracle::Function(f) => f(z).map_err(|_| Error::Oracle { feature: z.to_vec() }),
        }
    }
}

/// Law of the perturbation matrix `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum PerturbationLaw {
    Fixed { matrix: Matrix },
    /// `αO` with `O` Haar-distributed on `O(m)`.
    Haar { alpha: f64 },
    /// `δρO` with `ρ` the radial part of a kernel.
    Kernel { delta: f64, profile: KernelProfile },
}

impl PerturbationLaw {
    pub fn validate(&self, m: usize) -> Result<()> {
        match self {
            PerturbationLaw::Fixed { matrix } => {
                if matrix.shape() != (m, m) {
                    return Err(Error::Shape(format!("{:?} perturbation for m = {m}", matrix.shape())));
                }
                let op = sym_lambda_max(&matrix.t_matmul(matrix)?, POWER_ITERATION_TOL)?;
                if op > 1.0 + 1e-8 {
                    return Err(Error::Config(format!("perturbation with ||A||² = {op} > 1")));
                }
            }
            PerturbationLaw::Haar { alpha } => {
                if !(*alpha >= 0.0) || !alpha.is_finite() {
                    return Err(Error::Config(format!("Haar scale {alpha}")));
                }
            }
            PerturbationLaw::Kernel { delta, .. } => {
                if !(*delta > 0.0) || !delta.is_finite() {
                    return Err(Error::Config(format!("kernel scale delta = {delta}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub law: PerturbationLaw,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = tree_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (tree_sum(&dev) / ((n - 1) * n) as f64).sqrt())
}

/// Features of a dataset under a fixed split, with the unperturbed losses.
#[derive(Clone, Debug)]
pub struct FeatureContext<'a> {
    split: &'a FeatureSplit,
    features: LabeledSet,
    base: Vec<f64>,
}

impl<'a> FeatureContext<'a> {
    pub fn new(split: &'a FeatureSplit, data: &LabeledSet) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("empty dataset".into()));
        }
        let features = split.feature_set(data)?;
        let base = batch_losses(split, features.inputs(), features.labels())?;
        Ok(Self { split, features, base })
    }

    pub fn split(&self) -> &FeatureSplit {
        self.split
    }

    pub fn features(&self) -> &LabeledSet {
        &self.features
    }

    /// Per-sample losses `ℓ(f(x_i), y_i)`.
    pub fn base_losses(&self) -> &[f64] {
        &self.base
    }

    pub fn empirical_loss(&self) -> f64 {
        tree_sum(&self.base) / self.base.len() as f64
    }

    /// `(1/|S|) Σ_i ℓ(g(w(I + αA)φ_i), y_i') − ℓ(f(x_i), y_i)`.
    pub fn robustness(&self, a: &Matrix, alpha: f64, oracle: &LabelOracle) -> Result<f64> {
        let m = self.split.m();
        if a.shape() != (m, m) {
            return Err(Error::Shape(format!("{:?} perturbation for m = {m}", a.shape())));
        }
        let mut t = Matrix::identity(m);
        t.add_scaled(alpha, a)?;
        let moved = self.features.inputs().matmul_t(&t)?;
        let labels = match oracle {
            LabelOracle::HoldFixed => self.features.labels().to_vec(),
            _ => (0..moved.rows())
                .map(|i| oracle.label(moved.row(i), self.features.label(i)))
                .collect::<Result<Vec<_>>>()?,
        };
        let losses = batch_losses(self.split, &moved, &labels)?;
        let diff: Vec<f64> = losses.iter().zip(&self.base).map(|(a, b)| a - b).collect();
        Ok(tree_sum(&diff) / diff.len() as f64)
    }
}

fn batch_losses(split: &FeatureSplit, feats: &Matrix, labels: &[Label]) -> Result<Vec<f64>> {
    let u = feats.matmul_t(split.w())?;
    let out = split.head_output_batch(&u)?;
    let head = split.head_loss();
    (0..out.rows()).map(|i| head.loss(out.row(i), &labels[i])).collect()
}

/// Feature robustness of `split` on `data` for the single perturbation `αA`.
pub fn feature_robustness(
    split: &FeatureSplit,
    data: &LabeledSet,
    a: &Matrix,
    alpha: f64,
    oracle: &LabelOracle,
) -> Result<f64> {
    FeatureContext::new(split, data)?.robustness(a, alpha, oracle)
}

/// `A = δρO` with `ρ` from the kernel's radial law and `O` Haar.
pub fn sample_feature_matrix(delta: f64, kernel: &RadialKernel, m: usize, rng: &mut Rng) -> Result<Matrix> {
    if kernel.dim() != m {
        return Err(Error::Shape(format!("kernel of dimension {} for m = {m}", kernel.dim())));
    }
    let rho = kernel.sample_radial(rng)?;
    let o = haar_orthogonal(m, rng)?;
    Ok(o.scale(delta * rho))
}

/// Monte-Carlo average of feature robustness over `law`, deterministic per
/// seed and independent of `workers`.
pub fn robustness_average(
    ctx: &FeatureContext,
    law: &PerturbationLaw,
    n_samples: usize,
    oracle: &LabelOracle,
    seed: u64,
    workers: usize,
) -> Result<RobustnessEstimate> {
    let m = ctx.split.m();
    law.validate(m)?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let kernel = match law {
        PerturbationLaw::Kernel { profile, .. } => Some(RadialKernel::new(profile.clone(), m)?),
        _ => None,
    };
    let root = Rng::new(seed, 0x726f_6275);
    let values = try_map_indexed(n_samples, workers, |j| {
        let mut rng = root.substream(j as u64);
        match law {
            PerturbationLaw::Fixed { matrix } => ctx.robustness(matrix, 1.0, oracle),
            PerturbationLaw::Haar { alpha } => {
                if *alpha == 0.0 {
                    return Ok(0.0);
                }
                let o = haar_orthogonal(m, &mut rng)?;
                ctx.robustness(&o, *alpha, oracle)
            }
            PerturbationLaw::Kernel { delta, .. } => {
                let a = sample_feature_matrix(*delta, kernel.as_ref().expect("kernel law"), m, &mut rng)?;
                ctx.robustness(&a, 1.0, oracle)
            }
        }
    })?;
    let (mean, stderr) = mean_stderr(&values);
    Ok(RobustnessEstimate {
        mean,
        stderr,
        samples: n_samples,
        law: law.clone(),
    })
}

/// Feature robustness averaged over `A = δO`, `O` Haar.
pub fn haar_average_robustness(
    split: &FeatureSplit,
    data: &LabeledSet,
    delta: f64,
    n_samples: usize,
    oracle: &LabelOracle,
    seed: u64,
    workers: usize,
) -> Result<RobustnessEstimate> {
    if n_samples < 2 {
        return Err(Error::Config("Haar averaging needs at least 2 samples".into()));
    }
    let ctx = FeatureContext::new(split, data)?;
    robustness_average(&ctx, &PerturbationLaw::Haar { alpha: delta }, n_samples, oracle, seed, workers)
}

/// Gradient of the empirical risk with respect to the feature-layer weights.
pub fn feature_layer_gradient(ctx: &FeatureContext) -> Result<Matrix> {
    let split = ctx.split;
    let feats = ctx.features();
    let mut g = Matrix::zeros(split.d(), split.m());
    for i in 0..feats.len() {
        let z = feats.input(i);
        let u = split.w().matvec(z)?;
        let (_, du) = split.head_loss_grad(&u, feats.label(i))?;
        g = g.add(&Matrix::outer(&du, z))?;
    }
    Ok(g.scale(1.0 / feats.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem5Report {
    pub deltas: Vec<f64>,
    pub estimates: Vec<RobustnessEstimate>,
    pub fitted_c2: f64,
    pub fitted_c3: Option<f64>,
    pub kappa_tr: f64,
    /// `κ_Tr / (2m)`
    pub predicted: f64,
    pub rel_error: f64,
    pub grad_norm: f64,
    /// Gradient norm above `1e-3`: the point is not a minimum.
    pub grad_warning: bool,
}

/// Weighted least squares of `y ≈ Σ_k c_k x^{p_k}` for up to two powers.
fn wls_powers(x: &[f64], y: &[f64], sigma: &[f64], powers: &[i32]) -> Result<Vec<f64>> {
    let q = powers.len();
    let mut a = Matrix::zeros(q, q);
    let mut b = vec![0.0; q];
    for ((xi, yi), si) in x.iter().zip(y).zip(sigma) {
        let w = 1.0 / (si * si);
        let basis: Vec<f64> = powers.iter().map(|p| xi.powi(*p)).collect();
        for r in 0..q {
            b[r] += w * basis[r] * yi;
            for c in 0..q {
                a[(r, c)] += w * basis[r] * basis[c];
            }
        }
    }
    match q {
        1 => Ok(vec![b[0] / a[(0, 0)]]),
        2 => {
            let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
            if det.abs() <= 1e-14 * (a[(0, 0)] * a[(1, 1)]).abs() {
                return Err(Error::Numeric("degenerate least-squares fit".into()));
            }
            Ok(vec![
                (b[0] * a[(1, 1)] - b[1] * a[(0, 1)]) / det,
                (a[(0, 0)] * b[1] - a[(1, 0)] * b[0]) / det,
            ])
        }
        _ => unreachable!("at most two powers"),
    }
}

/// Fit `E_F(δ) ≈ c₂δ² (+ c₃δ³)` to Haar averages over `deltas`, using the
/// same Haar draws at every `δ`, and compare `c₂` with `κ_Tr/(2m)`.
#[allow(clippy::too_many_arguments)]
pub fn verify_theorem5(
    split: &FeatureSplit,
    data: &LabeledSet,
    deltas: &[f64],
    n_samples: usize,
    cubic: bool,
    mode: HeadHessianMode,
    seed: u64,
    workers: usize,
) -> Result<Theorem5Report> {
    if deltas.len() < 2 {
        return Err(Error::Config("fitting needs at least two delta values".into()));
    }
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Config("deltas must be positive".into()));
    }
    let ctx = FeatureContext::new(split, data)?;
    let oracle = LabelOracle::HoldFixed;
    let estimates = deltas
        .iter()
        .map(|d| robustness_average(&ctx, &PerturbationLaw::Haar { alpha: *d }, n_samples, &oracle, seed, workers))
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = estimates.iter().map(|e| e.mean).collect();
    let sigma: Vec<f64> = estimates
        .iter()
        .zip(deltas)
        .map(|(e, d)| e.stderr.max(1e-12 * e.mean.abs().max(d * d)).max(1e-300))
        .collect();
    let coef = if cubic {
        wls_powers(deltas, &y, &sigma, &[2, 3])?
    } else {
        wls_powers(deltas, &y, &sigma, &[2])?
    };
    let summary = hessian_summary(split, data, mode, false, workers)?;
    let kappa_tr = kappa_tr_double_sum(split.w(), &summary.trace_matrix)?;
    let predicted = kappa_tr / (2.0 * split.m() as f64);
    let grad_norm = feature_layer_gradient(&ctx)?.frobenius_norm();
    Ok(Theorem5Report {
        deltas: deltas.to_vec(),
        estimates,
        fitted_c2: coef[0],
        fitted_c3: coef.get(1).copied(),
        kappa_tr,
        predicted,
        rel_error: (coef[0] - predicted).abs() / predicted.abs().max(f64::MIN_POSITIVE),
        grad_norm,
        grad_warning: grad_norm > 1e-3,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HutchinsonCheck {
    pub target: Matrix,
    pub mean: Matrix,
    pub max_deviation: f64,
    /// Standard error of the entry with the largest deviation.
    pub stderr_at_max: f64,
    /// Largest `|deviation| / stderr` over entries with positive stderr.
    pub max_z: f64,
    pub samples: usize,
}

/// Monte-Carlo check of `E_O[(ω_t O)ᵀ(ω_s O)] = (⟨ω_s, ω_t⟩/m) I`.
pub fn hutchinson_identity_check(ws: &[f64], wt: &[f64], n_samples: usize, seed: u64, workers: usize) -> Result<HutchinsonCheck> {
    let m = ws.len();
    if wt.len() != m {
        return Err(Error::Shape(format!("vectors of lengths {m} and {}", wt.len())));
    }
    if n_samples < 2 {
        return Err(Error::Config("n_samples must be >= 2".into()));
    }
    let root = Rng::new(seed, 0x6875_7463);
    let chunks = n_samples.div_ceil(CHUNK);
    let parts = try_map_indexed(chunks, workers, |c| {
        let mut rng = root.substream(c as u64);
        let mut sum = Matrix::zeros(m, m);
        let mut sq = Matrix::zeros(m, m);
        for _ in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
            let o = haar_orthogonal(m, &mut rng)?;
            let a = o.t_matvec(wt)?;
            let b = o.t_matvec(ws)?;
            for r in 0..m {
                for s in 0..m {
                    let v = a[r] * b[s];
                    sum[(r, s)] += v;
                    sq[(r, s)] += v * v;
                }
            }
        }
        Ok((sum, sq))
    })?;
    let mut sum = Matrix::zeros(m, m);
    let mut sq = Matrix::zeros(m, m);
    for (s, q) in &parts {
        sum = sum.add(s)?;
        sq = sq.add(q)?;
    }
    let n = n_samples as f64;
    let mean = sum.scale(1.0 / n);
    let dot: f64 = ws.iter().zip(wt).map(|(a, b)| a * b).sum();
    let target = Matrix::identity(m).scale(dot / m as f64);
    let (mut max_dev, mut se_at, mut max_z) = (0.0f64, 0.0, 0.0f64);
    for r in 0..m {
        for s in 0..m {
            let mu = mean[(r, s)];
            let var = ((sq[(r, s)] / n - mu * mu) * n / (n - 1.0)).max(0.0);
            let se = (var / n).sqrt();
            let dev = (mu - target[(r, s)]).abs();
            if dev >= max_dev {
                max_dev = dev;
                se_at = se;
            }
            if se > 0.0 {
                max_z = max_z.max(dev / se);
            } else if dev > 0.0 {
                max_z = f64::INFINITY;
            }
        }
    }
    Ok(HutchinsonCheck {
        target,
        mean,
        max_deviation: max_dev,
        stderr_at_max: se_at,
        max_z,
        samples: n_samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerEquivalence {
    pub matrix_mean: f64,
    pub matrix_stderr: f64,
    pub kernel_mean: f64,
    pub kernel_stderr: f64,
    /// `|difference| / combined stderr`
    pub z: f64,
}

/// Two estimates of the same local average of `f` around `z0`: once through
/// `z0 + Az0` with `A = δρO`, once through `z0 + ζ` with `ζ` drawn from the
/// kernel with bandwidth `δ||z0||`.
pub fn sampler_equivalence(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    z0: &[f64],
    delta: f64,
    kernel: &RadialKernel,
    n_samples: usize,
    seed: u64,
    workers: usize,
) -> Result<SamplerEquivalence> {
    let m = z0.len();
    let h = delta * norm(z0);
    let root = Rng::new(seed, 0x7072_6f70);
    let chunks = n_samples.div_ceil(CHUNK);
    let parts = try_map_indexed(chunks, workers, |c| {
        let mut ra = root.substream(2 * c as u64);
        let mut rk = root.substream(2 * c as u64 + 1);
        let mut va = Vec::new();
        let mut vk = Vec::new();
        for _ in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
            let a = sample_feature_matrix(delta, kernel, m, &mut ra)?;
            let az = a.matvec(z0)?;
            let p: Vec<f64> = z0.iter().zip(&az).map(|(z, d)| z + d).collect();
            va.push(f(&p));
            let xi = kernel.sample_offset(h, &mut rk)?;
            let q: Vec<f64> = z0.iter().zip(&xi).map(|(z, d)| z + d).collect();
            vk.push(f(&q));
        }
        Ok((va, vk))
    })?;
    let va: Vec<f64> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
    let vk: Vec<f64> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
    let (ma, sa) = mean_stderr(&va);
    let (mk, sk) = mean_stderr(&vk);
    let comb = (sa * sa + sk * sk).sqrt();
    Ok(SamplerEquivalence {
        matrix_mean: ma,
        matrix_stderr: sa,
        kernel_mean: mk,
        kernel_stderr: sk,
        z: if comb > 0.0 {
            (ma - mk).abs() / comb
        } else if ma == mk {
            0.0
        } else {
            f64::INFINITY
        },
    })
}

/// I.i.d. labeled samples from a distribution on feature space.
pub trait FeatureDistribution: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut Rng) -> Result<(Vec<f64>, Label)>;
}

/// Planted features labeled by the Bayes oracle, so that the labeling is a
/// function of the feature vector.
impl FeatureDistribution for PlantedDistribution {
    fn dim(&self) -> usize {
        self.feature_dim()
    }

    fn sample(&self, rng: &mut Rng) -> Result<(Vec<f64>, Label)> {
        let (z, _) = self.sample_point(rng)?;
        let y = self.oracle(&z)?;
        Ok((z, Label::Class(y)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditStderr {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "E_Rep")]
    pub e_rep: f64,
    #[serde(rename = "E_F")]
    pub e_f: f64,
    /// Paired standard error of the residual.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionAudit {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "E_emp")]
    pub e_emp: f64,
    #[serde(rename = "E_Rep")]
    pub e_rep: f64,
    #[serde(rename = "E_F")]
    pub e_f: f64,
    pub residual: f64,
    pub stderr: AuditStderr,
    /// Fraction of perturbed points whose oracle label differs from the
    /// training label.
    pub label_flip_rate: f64,
    pub delta: f64,
    pub n_mc: usize,
    pub seed: u64,
}

impl DecompositionAudit {
    pub fn generalization_gap(&self) -> f64 {
        self.e - self.e_emp
    }
}

/// True risk, local-mixture risk and perturbed-feature risk of a split,
/// assembled into `E = E_emp + E_Rep + E_F`. `E_Rep` and `E_F` are estimated
/// independently, so the residual measures how well the two agree.
#[allow(clippy::too_many_arguments)]
pub fn decomposition_audit(
    split: &FeatureSplit,
    data: &LabeledSet,
    delta: f64,
    kernel: &RadialKernel,
    dist: &dyn FeatureDistribution,
    oracle: &LabelOracle,
    n_mc: usize,
    seed: u64,
    workers: usize,
) -> Result<DecompositionAudit> {
    let m = split.m();
    if kernel.dim() != m || dist.dim() != m {
        return Err(Error::Shape(format!(
            "kernel of dimension {} and distribution of dimension {} for m = {m}",
            kernel.dim(),
            dist.dim()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::Config("delta must be positive".into()));
    }
    if n_mc < 2 {
        return Err(Error::Config("n_mc must be >= 2".into()));
    }
    let ctx = FeatureContext::new(split, data)?;
    let feats = ctx.features();
    let n = feats.len();
    if let Some(i) = (0..n).find(|&i| norm(feats.input(i)) == 0.0) {
        return Err(Error::Applicability(format!("training point {i} has a zero feature vector")));
    }
    let e_emp = ctx.empirical_loss();
    let root = Rng::new(seed, crate::representativeness::AUDIT_STREAM);
    let chunks = n_mc.div_ceil(CHUNK);
    let loss_at = |z: &[f64], y: &Label| split.head_apply(split.w(), z, y).map(|r| r.1);
    let parts = try_map_indexed(chunks, workers, |c| {
        let mut r_true = root.substream(3 * c as u64);
        let mut r_kernel = root.substream(3 * c as u64 + 1);
        let mut r_mat = root.substream(3 * c as u64 + 2);
        let mut out = (Vec::new(), Vec::new(), Vec::new(), 0usize);
        for j in c * CHUNK..((c + 1) * CHUNK).min(n_mc) {
            let (z, y) = dist.sample(&mut r_true)?;
            out.0.push(loss_at(&z, &y)?);
            let i = j % n;
            let phi = feats.input(i);
            let yi = feats.label(i);
            let xi = kernel.sample_offset(delta * norm(phi), &mut r_kernel)?;
            let zk: Vec<f64> = phi.iter().zip(&xi).map(|(a, b)| a + b).collect();
            let lk = loss_at(&zk, &oracle.label(&zk, yi)?)?;
            let a = sample_feature_matrix(delta, kernel, m, &mut r_mat)?;
            let az = a.matvec(phi)?;
            let za: Vec<f64> = phi.iter().zip(&az).map(|(a, b)| a + b).collect();
            let ya = oracle.label(&za, yi)?;
            if &ya != yi {
                out.3 += 1;
            }
            let la = loss_at(&za, &ya)?;
            out.1.push(lk);
            out.2.push(la);
        }
        Ok(out)
    })?;
    let true_losses: Vec<f64> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
    let kernel_losses: Vec<f64> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
    let matrix_losses: Vec<f64> = parts.iter().flat_map(|p| p.2.iter().copied()).collect();
    let flips: usize = parts.iter().map(|p| p.3).sum();
    let paired: Vec<f64> = kernel_losses.iter().zip(&matrix_losses).map(|(k, a)| k - a).collect();
    let (e, se_e) = mean_stderr(&true_losses);
    let (local_kernel, se_k) = mean_stderr(&kernel_losses);
    let (local_matrix, se_a) = mean_stderr(&matrix_losses);
    let (_, se_pair) = mean_stderr(&paired);
    let e_rep = e - local_kernel;
    let e_f = local_matrix - e_emp;
    Ok(DecompositionAudit {
        e,
        e_emp,
        e_rep,
        e_f,
        residual: e - (e_emp + e_rep + e_f),
        stderr: AuditStderr {
            e: se_e,
            e_rep: (se_e * se_e + se_k * se_k).sqrt(),
            e_f: se_a,
            residual: se_pair,
        },
        label_flip_rate: flips as f64 / n_mc as f64,
        delta,
        n_mc,
        seed,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialFamily {
    pub projections: usize,
    pub haar: usize,
    pub psd: usize,
    pub rank_one: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformBoundReport {
    pub delta: f64,
    pub max_ef: f64,
    pub bound: f64,
    pub slack: f64,
    pub kappa_max: f64,
    pub d: usize,
    pub c3: f64,
    /// `(δ_j, max E_F(δ_j A))` on the smaller scales the cubic term is fit on.
    pub sweep: Vec<(f64, f64)>,
    pub family: AdversarialFamily,
    /// Sampled matrices whose robustness exceeds the bound.
    pub violations: usize,
}

/// Unit-norm test matrices: all single-coordinate projections, then Haar
/// orthogonal matrices, random PSD contractions and rank-one maps in turn.
pub fn adversarial_matrices(m: usize, n: usize, rng: &mut Rng) -> Result<(Vec<Matrix>, AdversarialFamily)> {
    let mut out = Vec::with_capacity(n.max(m));
    let mut fam = AdversarialFamily::default();
    for j in 0..m.min(n) {
        let mut p = Matrix::zeros(m, m);
        p[(j, j)] = 1.0;
        out.push(p);
        fam.projections += 1;
    }
    let mut k = 0;
    while out.len() < n {
        let a = match k % 3 {
            0 => {
                fam.haar += 1;
                haar_orthogonal(m, rng)?
            }
            1 => {
                fam.psd += 1;
                let g = Matrix::new(m, m, rng.normal_vec(m * m))?;
                let b = g.matmul_t(&g)?;
                let top = sym_lambda_max(&b, 1e-12)?;
                b.scale(1.0 / top)
            }
            _ => {
                fam.rank_one += 1;
                Matrix::outer(&rng.unit_vector(m), &rng.unit_vector(m))
            }
        };
        out.push(a);
        k += 1;
    }
    Ok((out, fam))
}

/// Largest feature robustness over sampled `δA`, `||A|| = 1`, against
/// `(δ²d/2)κ_max + c₃δ³`, with `c₃` the smallest value that covers the
/// same family at `δ/2`, `δ/4` and `δ/8`.
pub fn uniform_bound_check(
    split: &FeatureSplit,
    data: &LabeledSet,
    delta: f64,
    n_adversarial: usize,
    mode: HeadHessianMode,
    seed: u64,
    workers: usize,
) -> Result<UniformBoundReport> {
    if !(delta >= 0.0) {
        return Err(Error::Config("delta must be nonnegative".into()));
    }
    let ctx = FeatureContext::new(split, data)?;
    let m = split.m();
    let d = split.d();
    let summary = hessian_summary(split, data, mode, true, workers)?;
    let kappa_max = kappa_max_from_blocks(split.w(), summary.diag_blocks.as_deref().expect("blocks requested"))?;
    let mut rng = Rng::new(seed, 0x756e_6966);
    let (family, counts) = adversarial_matrices(m, n_adversarial, &mut rng)?;
    let oracle = LabelOracle::HoldFixed;
    let sweep_values = |dl: f64| -> Result<Vec<f64>> {
        try_map_indexed(family.len(), workers, |j| ctx.robustness(&family[j], dl, &oracle))
    };
    let quad = |dl: f64| dl * dl * d as f64 / 2.0 * kappa_max;
    let mut sweep = Vec::new();
    let mut c3 = 0.0f64;
    if delta > 0.0 {
        for k in 1..=3 {
            let dl = delta / f64::from(1 << k);
            let max = sweep_values(dl)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
            c3 = c3.max((max - quad(dl)) / dl.powi(3));
            sweep.push((dl, max));
        }
    }
    let values = sweep_values(delta)?;
    let bound = quad(delta) + c3 * delta.powi(3);
    let max_ef = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let violations = values.iter().filter(|v| **v > bound).count();
    Ok(UniformBoundReport {
        delta,
        max_ef,
        bound,
        slack: bound - max_ef,
        kappa_max,
        d,
        c3,
        sweep,
        family: counts,
        violations,
    })
}
