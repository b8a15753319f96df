//! Relative flatness and the baseline measures it is compared against.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledSet;
use crate::error::{Error, Result};
use crate::hessian::{hessian_summary, HeadHessianMode, HessianSummary};
use crate::net::{split_at, softmax, FeatureSplit, HeadLoss, Mlp};
use crate::numkit::linalg::POWER_ITERATION_TOL;
use crate::numkit::{dot, norm_sq, sym_lambda_max, Matrix, Rng};

/// `Σ_{s,s'} ⟨w_s, w_{s'}⟩ T[s,s']` as an explicit double sum.
pub fn kappa_tr_double_sum(w: &Matrix, t: &Matrix) -> Result<f64> {
    let d = w.rows();
    if t.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "{:?} trace matrix for {d} neurons",
            t.shape()
        )));
    }
    let mut total = 0.0;
    for s in 0..d {
        for s2 in 0..d {
            total += dot(w.row(s), w.row(s2)) * t[(s, s2)];
        }
    }
    Ok(total)
}

/// `Tr((w wᵀ) T)` by matrix products.
pub fn kappa_tr_contraction(w: &Matrix, t: &Matrix) -> Result<f64> {
    let gram = w.matmul_t(w)?;
    Ok(gram.matmul(t)?.trace())
}

/// `Σ_s ||w_s||² λ_max(H_{s,s})`.
pub fn kappa_max_from_blocks(w: &Matrix, blocks: &[Matrix]) -> Result<f64> {
    if blocks.len() != w.rows() {
        return Err(Error::Shape(format!(
            "{} blocks for {} neurons",
            blocks.len(),
            w.rows()
        )));
    }
    let mut total = 0.0;
    for (s, b) in blocks.iter().enumerate() {
        let n = norm_sq(w.row(s));
        if n == 0.0 {
            continue;
        }
        total += n * sym_lambda_max(b, POWER_ITERATION_TOL)?;
    }
    Ok(total)
}

/// Relative flatness `κ_Tr`.
pub fn relative_flatness_trace(
    split: &FeatureSplit,
    data: &LabeledSet,
    mode: HeadHessianMode,
) -> Result<f64> {
    let h = hessian_summary(split, data, mode, false, 1)?;
    kappa_tr_double_sum(split.w(), &h.trace_matrix)
}

/// Maximal relative flatness `κ_max`.
pub fn relative_flatness_max(
    split: &FeatureSplit,
    data: &LabeledSet,
    mode: HeadHessianMode,
) -> Result<f64> {
    let h = hessian_summary(split, data, mode, true, 1)?;
    kappa_max_from_blocks(split.w(), h.diag_blocks.as_deref().expect("blocks requested"))
}

/// Both relative flatness measures from one pass over the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeFlatness {
    pub kappa_tr: f64,
    pub kappa_max: f64,
    pub summary: HessianSummary,
}

pub fn relative_flatness(
    split: &FeatureSplit,
    data: &LabeledSet,
    mode: HeadHessianMode,
    workers: usize,
) -> Result<RelativeFlatness> {
    let summary = hessian_summary(split, data, mode, true, workers)?;
    let kappa_tr = kappa_tr_double_sum(split.w(), &summary.trace_matrix)?;
    let kappa_max = kappa_max_from_blocks(split.w(), summary.diag_blocks.as_deref().expect("blocks requested"))?;
    Ok(RelativeFlatness {
        kappa_tr,
        kappa_max,
        summary,
    })
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = crate::parallel::tree_sum(xs) / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr,
            samples: n,
        }
    }
}

/// Hutchinson estimate of `Tr(∇²F)` at `theta` with Rademacher probes and
/// central differences of `grad` for the Hessian-vector products.
pub fn hutchinson_trace(
    grad: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    probes: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<Estimate> {
    if probes == 0 {
        return Err(Error::Config("probes must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(probes);
    for _ in 0..probes {
        let v: Vec<f64> = (0..theta.len()).map(|_| rng.rademacher()).collect();
        let plus: Vec<f64> = theta.iter().zip(&v).map(|(t, v)| t + step * v).collect();
        let minus: Vec<f64> = theta.iter().zip(&v).map(|(t, v)| t - step * v).collect();
        let gp = grad(&plus)?;
        let gm = grad(&minus)?;
        let q: f64 = v
            .iter()
            .zip(gp.iter().zip(&gm))
            .map(|(vi, (a, b))| vi * (a - b) / (2.0 * step))
            .sum();
        if !q.is_finite() {
            return Err(Error::NonFinite("Hessian-vector product".into()));
        }
        samples.push(q);
    }
    Ok(Estimate::from_samples(&samples))
}

pub const DEFAULT_TRACE_PROBES: usize = 64;
const TRACE_STEP: f64 = 1e-4;

/// Trace of the full-parameter Hessian of the empirical risk.
pub fn classical_trace(model: &Mlp, data: &LabeledSet, probes: usize, rng: &mut Rng) -> Result<Estimate> {
    let grad = |p: &[f64]| -> Result<Vec<f64>> {
        let (_, g) = model.with_parameters(p)?.loss_and_flat_grad(data)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(g)
    };
    hutchinson_trace(&grad, &model.parameters(), probes, TRACE_STEP, rng)
}

/// Euclidean norm over all weights and biases.
pub fn weight_norm(model: &Mlp) -> f64 {
    norm_sq(&model.parameters()).sqrt()
}

/// Empirical Fisher-Rao norm
/// `L · sqrt(mean_i (Σ_c (p_c − 1{c = y_i}) f_c(x_i))²)` with logits `f`,
/// `p = softmax(f)` and `L` the number of layers.
pub fn fisher_rao(model: &Mlp, data: &LabeledSet) -> Result<f64> {
    if model.head_loss() != HeadLoss::SoftmaxCrossEntropy {
        return Err(Error::Mode("Fisher-Rao norm needs a softmax cross-entropy head".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("empty dataset".into()));
    }
    let logits = model.predict_batch(data.inputs())?;
    let mut acc = 0.0;
    for i in 0..data.len() {
        let f = logits.row(i);
        let y = data
            .label(i)
            .class()
            .ok_or_else(|| Error::Mode("Fisher-Rao norm needs class labels".into()))?;
        let p = softmax(f);
        let inner: f64 = (0..f.len())
            .map(|c| (p[c] - if c == y { 1.0 } else { 0.0 }) * f[c])
            .sum();
        acc += inner * inner;
    }
    Ok(model.depth() as f64 * (acc / data.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PacBayesConfig {
    pub target_deviation: f64,
    /// Noise draws per σ (shared across σ).
    pub mc_samples: usize,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    /// Stop when `σ_hi / σ_lo < 1 + tol`.
    pub tol: f64,
}

impl Default for PacBayesConfig {
    fn default() -> Self {
        Self {
            target_deviation: 0.1,
            mc_samples: 16,
            sigma_lo: 1e-6,
            sigma_hi: 10.0,
            tol: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacBayesResult {
    pub sigma: f64,
    /// `1/σ²`
    pub measure: f64,
    pub hit_upper: bool,
}

/// Largest `σ` such that the mean of `F(θ + σu) − F(θ)` over fixed Gaussian
/// draws `u` stays within the target deviation, found by bisection in
/// `log σ`.
pub fn pacbayes_sigma(
    objective: &dyn Fn(&[f64]) -> Result<f64>,
    theta: &[f64],
    cfg: &PacBayesConfig,
    rng: &mut Rng,
) -> Result<PacBayesResult> {
    if !(cfg.target_deviation > 0.0) {
        return Err(Error::Config("target deviation must be positive".into()));
    }
    if cfg.mc_samples == 0 || !(cfg.sigma_lo > 0.0) || cfg.sigma_hi <= cfg.sigma_lo {
        return Err(Error::Config("invalid PAC-Bayes search configuration".into()));
    }
    let base = objective(theta)?;
    let noise: Vec<Vec<f64>> = (0..cfg.mc_samples).map(|_| rng.normal_vec(theta.len())).collect();
    let deviation = |sigma: f64| -> Result<f64> {
        let mut total = 0.0;
        for u in &noise {
            let p: Vec<f64> = theta.iter().zip(u).map(|(t, u)| t + sigma * u).collect();
            total += objective(&p)?;
        }
        let dev = total / noise.len() as f64 - base;
        Ok(if dev.is_finite() { dev } else { f64::INFINITY })
    };
    let (mut lo, mut hi) = (cfg.sigma_lo, cfg.sigma_hi);
    if deviation(lo)? > cfg.target_deviation {
        return Err(Error::Bracket { lo, hi });
    }
    if deviation(hi)? <= cfg.target_deviation {
        return Ok(PacBayesResult {
            sigma: hi,
            measure: 1.0 / (hi * hi),
            hit_upper: true,
        });
    }
    while hi / lo > 1.0 + cfg.tol {
        let mid = (lo * hi).sqrt();
        if deviation(mid)? <= cfg.target_deviation {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(PacBayesResult {
        sigma: lo,
        measure: 1.0 / (lo * lo),
        hit_upper: false,
    })
}

/// σ-search sharpness of the empirical risk around the model's parameters.
pub fn pacbayes_sharpness(
    model: &Mlp,
    data: &LabeledSet,
    cfg: &PacBayesConfig,
    rng: &mut Rng,
) -> Result<PacBayesResult> {
    let objective = |p: &[f64]| -> Result<f64> {
        let params: Vec<f64> = p.iter().map(|v| if v.is_finite() { *v } else { f64::MAX }).collect();
        model.with_parameters(&params)?.empirical_loss(data)
    };
    pacbayes_sigma(&objective, &model.parameters(), cfg, rng)
}

/// Which measures [`measure_model`] computes beyond the two relative
/// flatness values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasureConfig {
    /// Split layer; the last layer when absent.
    pub layer: Option<usize>,
    pub mode: Option<HeadHessianMode>,
    pub trace_probes: usize,
    pub classical_trace: bool,
    pub fisher_rao: bool,
    pub pacbayes: bool,
    pub pacbayes_cfg: PacBayesConfig,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            layer: None,
            mode: None,
            trace_probes: DEFAULT_TRACE_PROBES,
            classical_trace: true,
            fisher_rao: true,
            pacbayes: true,
            pacbayes_cfg: PacBayesConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasureMeta {
    pub seed: u64,
    pub layer_index: usize,
    pub mode: Option<HeadHessianMode>,
    pub trace_stderr: Option<f64>,
    pub trace_probes: usize,
    pub pacbayes_sigma: Option<f64>,
    pub pacbayes_mc_samples: usize,
    pub kink_samples: usize,
    /// Measures that failed numerically and are reported as missing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<String>,
}

/// All measures of one trained model. Measures that do not apply (e.g. the
/// Fisher-Rao norm of a regression head) are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub run_id: String,
    pub kappa_tr: f64,
    pub kappa_max: f64,
    pub trace: Option<f64>,
    pub weight_norm: f64,
    pub fisher_rao: Option<f64>,
    pub pacbayes: Option<f64>,
    pub emp_loss: f64,
    pub test_loss: Option<f64>,
    pub gen_gap: Option<f64>,
    pub meta: MeasureMeta,
}

pub const MEASURE_COLUMNS: [&str; 10] = [
    "run_id",
    "kappa_tr",
    "kappa_max",
    "trace",
    "weight_norm",
    "fisher_rao",
    "pacbayes",
    "emp_loss",
    "test_loss",
    "gen_gap",
];

pub(crate) fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl MeasureReport {
    /// Fields in [`MEASURE_COLUMNS`] order.
    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.run_id.clone(),
            cell(Some(self.kappa_tr)),
            cell(Some(self.kappa_max)),
            cell(self.trace),
            cell(Some(self.weight_norm)),
            cell(self.fisher_rao),
            cell(self.pacbayes),
            cell(Some(self.emp_loss)),
            cell(self.test_loss),
            cell(self.gen_gap),
        ]
    }

    /// Value of a numeric column by name.
    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            "kappa_tr" => Some(self.kappa_tr),
            "kappa_max" => Some(self.kappa_max),
            "trace" => self.trace,
            "weight_norm" => Some(self.weight_norm),
            "fisher_rao" => self.fisher_rao,
            "pacbayes" => self.pacbayes,
            "emp_loss" => Some(self.emp_loss),
            "test_loss" => self.test_loss,
            "gen_gap" => self.gen_gap,
            _ => None,
        }
    }
}

/// Compute every configured measure for `model` on `train`, with losses on
/// `test` when given.
pub fn measure_model(
    run_id: &str,
    model: &Mlp,
    train: &LabeledSet,
    test: Option<&LabeledSet>,
    cfg: &MeasureConfig,
    seed: u64,
    workers: usize,
) -> Result<MeasureReport> {
    let layer = cfg.layer.unwrap_or(model.depth());
    let split = split_at(model, layer)?;
    let mode = cfg.mode.unwrap_or_else(|| HeadHessianMode::best_for(&split));
    let rel = relative_flatness(&split, train, mode, workers)?;
    let root = Rng::new(seed, 0x6d65_6173);
    let mut failed = Vec::new();
    let trace = if cfg.classical_trace {
        soft(classical_trace(model, train, cfg.trace_probes, &mut root.substream(0)), "trace", &mut failed)?
    } else {
        None
    };
    let fr = if cfg.fisher_rao && model.head_loss() == HeadLoss::SoftmaxCrossEntropy {
        Some(fisher_rao(model, train)?)
    } else {
        None
    };
    let pb = if cfg.pacbayes {
        soft(pacbayes_sharpness(model, train, &cfg.pacbayes_cfg, &mut root.substream(1)), "pacbayes", &mut failed)?
    } else {
        None
    };
    let emp_loss = model.empirical_loss(train)?;
    let test_loss = test.map(|t| model.empirical_loss(t)).transpose()?;
    Ok(MeasureReport {
        run_id: run_id.to_string(),
        kappa_tr: rel.kappa_tr,
        kappa_max: rel.kappa_max,
        trace: trace.map(|t| t.mean),
        weight_norm: weight_norm(model),
        fisher_rao: fr,
        pacbayes: pb.map(|p| p.measure),
        emp_loss,
        test_loss,
        gen_gap: test_loss.map(|t| t - emp_loss),
        meta: MeasureMeta {
            seed,
            layer_index: layer,
            mode: Some(mode),
            trace_stderr: trace.map(|t| t.stderr),
            trace_probes: if cfg.classical_trace { cfg.trace_probes } else { 0 },
            pacbayes_sigma: pb.map(|p| p.sigma),
            pacbayes_mc_samples: if cfg.pacbayes { cfg.pacbayes_cfg.mc_samples } else { 0 },
            kink_samples: rel.summary.kink_samples,
            failed,
        },
    })
}

/// Bracketing and non-finite failures of a single measure become a missing
/// value, recorded by name; anything else propagates.
fn soft<T>(r: Result<T>, name: &str, failed: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Bracket { .. } | Error::NonFinite(_) | Error::Divergence { .. }) => {
            failed.push(name.to_string());
            Ok(None)
        }
        Err(e) => Err(e),
    }
}
