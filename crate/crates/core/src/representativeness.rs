//! Kernel density estimates over feature vectors and the representativeness
//! of a training sample, exact (with a known distribution) and approximated
//! by cross-validation.

use serde::{Deserialize, Serialize};

use crate::datasets::{Label, LabeledSet};
use crate::error::{Error, Result};
use crate::flatness::kappa_tr_double_sum;
use crate::hessian::{hessian_summary, HeadHessianMode};
use crate::net::FeatureSplit;
use crate::numkit::{norm, Matrix, RadialKernel, Rng};
use crate::parallel::{tree_sum, try_map_indexed};
use crate::robustness::{FeatureContext, FeatureDistribution, LabelOracle};

const CHUNK: usize = 1024;
/// Stream shared with [`crate::robustness::decomposition_audit`], so both
/// see the same true-risk and kernel draws for a seed.
pub(crate) const AUDIT_STREAM: u64 = 0x6175_6469;

/// Bandwidth scale `δ = |S|^{−1/(4+m)}`.
pub fn delta_rule(n: usize, m: usize) -> f64 {
    (n as f64).powf(-1.0 / (4.0 + m as f64))
}

/// Mixture of kernels centred at feature vectors with bandwidths
/// `h_i = δ||center_i||`.
#[derive(Clone, Debug)]
pub struct KdeModel {
    centers: Matrix,
    bandwidths: Vec<f64>,
    kernel: RadialKernel,
    delta: f64,
}

impl KdeModel {
    pub fn new(centers: Matrix, delta: f64, kernel: RadialKernel) -> Result<Self> {
        if centers.rows() == 0 {
            return Err(Error::EmptyInput("no centers".into()));
        }
        if kernel.dim() != centers.cols() {
            return Err(Error::Shape(format!(
                "kernel of dimension {} for centers of dimension {}",
                kernel.dim(),
                centers.cols()
            )));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Config(format!("delta = {delta}")));
        }
        let mut bandwidths = Vec::with_capacity(centers.rows());
        for i in 0..centers.rows() {
            let h = delta * norm(centers.row(i));
            if !(h > 0.0) {
                return Err(Error::Applicability(format!(
                    "center {i} has zero norm, so its bandwidth vanishes"
                )));
            }
            bandwidths.push(h);
        }
        Ok(Self {
            centers,
            bandwidths,
            kernel,
            delta,
        })
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn kernel(&self) -> &RadialKernel {
        &self.kernel
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }
}

/// Mixture density at `z`.
pub fn kde_eval(model: &KdeModel, z: &[f64]) -> Result<f64> {
    if z.len() != model.dim() {
        return Err(Error::Shape(format!("point of dimension {} for a {}-dimensional estimate", z.len(), model.dim())));
    }
    let terms: Vec<f64> = (0..model.centers.rows())
        .map(|i| model.kernel.density(model.centers.row(i), z, model.bandwidths[i]))
        .collect();
    Ok(tree_sum(&terms) / terms.len() as f64)
}

/// One draw: a uniformly chosen center plus a kernel offset.
pub fn kde_sample(model: &KdeModel, rng: &mut Rng) -> Result<Vec<f64>> {
    let i = rng.below(model.centers.rows());
    let xi = model.kernel.sample_offset(model.bandwidths[i], rng)?;
    Ok(model.centers.row(i).iter().zip(&xi).map(|(c, x)| c + x).collect())
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = tree_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (tree_sum(&dev) / ((n - 1.0) * n)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepEstimate {
    pub value: f64,
    pub stderr: f64,
    pub true_risk: f64,
    pub local_risk: f64,
}

/// True risk under `dist` minus the risk of the local kernel mixture around
/// the training features, labels from `oracle`.
#[allow(clippy::too_many_arguments)]
pub fn rep_exact(
    split: &FeatureSplit,
    data: &LabeledSet,
    delta: f64,
    kernel: &RadialKernel,
    dist: &dyn FeatureDistribution,
    oracle: &LabelOracle,
    n_mc: usize,
    seed: u64,
    workers: usize,
) -> Result<RepEstimate> {
    let m = split.m();
    if kernel.dim() != m || dist.dim() != m {
        return Err(Error::Shape(format!(
            "kernel of dimension {} and distribution of dimension {} for m = {m}",
            kernel.dim(),
            dist.dim()
        )));
    }
    if n_mc < 2 {
        return Err(Error::Config("n_mc must be >= 2".into()));
    }
    let ctx = FeatureContext::new(split, data)?;
    let feats = ctx.features();
    let n = feats.len();
    let loss_at = |z: &[f64], y: &Label| split.head_apply(split.w(), z, y).map(|r| r.1);
    let root = Rng::new(seed, AUDIT_STREAM);
    let parts = try_map_indexed(n_mc.div_ceil(CHUNK), workers, |c| {
        let mut r_true = root.substream(3 * c as u64);
        let mut r_kernel = root.substream(3 * c as u64 + 1);
        let mut out = (Vec::new(), Vec::new());
        for j in c * CHUNK..((c + 1) * CHUNK).min(n_mc) {
            let (z, y) = dist.sample(&mut r_true)?;
            out.0.push(loss_at(&z, &y)?);
            let i = j % n;
            let phi = feats.input(i);
            let xi = kernel.sample_offset(delta * norm(phi), &mut r_kernel)?;
            let zk: Vec<f64> = phi.iter().zip(&xi).map(|(a, b)| a + b).collect();
            out.1.push(loss_at(&zk, &oracle.label(&zk, feats.label(i))?)?);
        }
        Ok(out)
    })?;
    let t: Vec<f64> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
    let k: Vec<f64> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
    let (true_risk, se_t) = mean_stderr(&t);
    let (local_risk, se_k) = mean_stderr(&k);
    Ok(RepEstimate {
        value: true_risk - local_risk,
        stderr: (se_t * se_t + se_k * se_k).sqrt(),
        true_risk,
        local_risk,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRep {
    pub test_risk: f64,
    pub local_risk: f64,
    pub local_stderr: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepApprox {
    pub value: f64,
    pub folds: Vec<FoldRep>,
}

/// Cross-validated representativeness: per fold, the model's risk on the
/// held-out fold minus its expected loss under the local kernels around the
/// remaining points (labels held at `y_i`, `n_mc` draws per point), averaged
/// over folds.
#[allow(clippy::too_many_arguments)]
pub fn rep_approx(
    split: &FeatureSplit,
    data: &LabeledSet,
    delta: f64,
    kernel: &RadialKernel,
    folds: usize,
    n_mc: usize,
    seed: u64,
    workers: usize,
) -> Result<RepApprox> {
    if folds < 2 {
        return Err(Error::Config("rep_approx needs at least 2 folds".into()));
    }
    if data.len() < 2 * folds {
        return Err(Error::Config(format!("{} samples are too few for {folds} folds", data.len())));
    }
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be >= 1".into()));
    }
    if kernel.dim() != split.m() {
        return Err(Error::Shape(format!("kernel of dimension {} for m = {}", kernel.dim(), split.m())));
    }
    let ctx = FeatureContext::new(split, data)?;
    let feats = ctx.features();
    let n = feats.len();
    if let Some(i) = (0..n).find(|&i| norm(feats.input(i)) == 0.0) {
        return Err(Error::Applicability(format!("point {i} has a zero feature vector")));
    }
    let root = Rng::new(seed, 0x7265_7061);
    let mut order: Vec<usize> = (0..n).collect();
    root.substream(0).shuffle(&mut order);
    let fold_of = |pos: usize| pos * folds / n;
    let loss_at = |z: &[f64], y: &Label| split.head_apply(split.w(), z, y).map(|r| r.1);
    // expected local loss of every point, each with its own substream
    let local = try_map_indexed(n, workers, |i| {
        let mut rng = root.substream(1 + i as u64);
        let phi = feats.input(i);
        let h = delta * norm(phi);
        let mut vals = Vec::with_capacity(n_mc);
        for _ in 0..n_mc {
            let xi = kernel.sample_offset(h, &mut rng)?;
            let z: Vec<f64> = phi.iter().zip(&xi).map(|(a, b)| a + b).collect();
            vals.push(loss_at(&z, feats.label(i))?);
        }
        Ok(tree_sum(&vals) / n_mc as f64)
    })?;
    let base = ctx.base_losses();
    let mut out = Vec::with_capacity(folds);
    for k in 0..folds {
        let mut test = Vec::new();
        let mut train = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            if fold_of(pos) == k {
                test.push(base[i]);
            } else {
                train.push(local[i]);
            }
        }
        let test_risk = tree_sum(&test) / test.len() as f64;
        let (local_risk, local_stderr) = mean_stderr(&train);
        out.push(FoldRep {
            test_risk,
            local_risk,
            local_stderr,
            value: test_risk - local_risk,
        });
    }
    let value = out.iter().map(|f| f.value).sum::<f64>() / folds as f64;
    Ok(RepApprox { value, folds: out })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub run_id: String,
    pub delta: f64,
    /// `δ` was given explicitly instead of following [`delta_rule`].
    pub delta_overridden: bool,
    pub m: usize,
    pub n: usize,
    pub rep_approx: f64,
    pub kappa_tr: f64,
    /// `(δ²/(2m))κ_Tr`
    pub flatness_term: f64,
    /// `|rep_approx| + flatness_term`
    pub bound: f64,
    pub gen_gap: Option<f64>,
}

pub const BOUND_COLUMNS: [&str; 6] = ["run_id", "delta", "rep_approx", "flatness_term", "bound", "gen_gap"];

impl BoundReport {
    pub fn csv_record(&self) -> Vec<String> {
        use crate::flatness::cell;
        vec![
            self.run_id.clone(),
            cell(Some(self.delta)),
            cell(Some(self.rep_approx)),
            cell(Some(self.flatness_term)),
            cell(Some(self.bound)),
            cell(self.gen_gap),
        ]
    }

    pub fn covers_gap(&self) -> Option<bool> {
        self.gen_gap.map(|g| self.bound >= g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConfig {
    pub folds: usize,
    /// Kernel draws per training point.
    pub n_mc: usize,
    pub delta: Option<f64>,
    pub mode: Option<HeadHessianMode>,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            n_mc: 32,
            delta: None,
            mode: None,
        }
    }
}

/// `|rep_approx| + (δ²/(2m))κ_Tr` with `δ = |S|^{−1/(4+m)}` unless
/// overridden, and the generalization gap on `test` when given.
#[allow(clippy::too_many_arguments)]
pub fn gen_bound_approx(
    run_id: &str,
    split: &FeatureSplit,
    data: &LabeledSet,
    test: Option<&LabeledSet>,
    cfg: &BoundConfig,
    seed: u64,
    workers: usize,
) -> Result<BoundReport> {
    let m = split.m();
    let n = data.len();
    let delta = cfg.delta.unwrap_or_else(|| delta_rule(n, m));
    let kernel = RadialKernel::truncated_gaussian(m)?;
    let rep = rep_approx(split, data, delta, &kernel, cfg.folds, cfg.n_mc, seed, workers)?;
    let mode = cfg.mode.unwrap_or_else(|| HeadHessianMode::best_for(split));
    let summary = hessian_summary(split, data, mode, false, workers)?;
    let kappa_tr = kappa_tr_double_sum(split.w(), &summary.trace_matrix)?;
    let flatness_term = delta * delta / (2.0 * m as f64) * kappa_tr;
    let gen_gap = match test {
        Some(t) => {
            let model = split.model();
            Some(model.empirical_loss(t)? - model.empirical_loss(data)?)
        }
        None => None,
    };
    Ok(BoundReport {
        run_id: run_id.to_string(),
        delta,
        delta_overridden: cfg.delta.is_some(),
        m,
        n,
        rep_approx: rep.value,
        kappa_tr,
        flatness_term,
        bound: rep.value.abs() + flatness_term,
        gen_gap,
    })
}
