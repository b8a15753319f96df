//! Feature-layer Hessians.
//!
//! The loss depends on the feature-layer weights `w` only through
//! `u = wφ(x)`, so the Hessian block for neurons `(s, s')` factors as
//! `[∇²_u L]_{s,s'} · φ(x)φ(x)ᵀ`. Everything here is built from the `d × d`
//! head Hessian `∇²_u L` and the features.

use serde::{Deserialize, Serialize};

use crate::datasets::{Label, LabeledSet};
use crate::error::{Error, Result};
use crate::net::{Activation, FeatureSplit, Mlp};
use crate::numkit::{norm_sq, Matrix};
use crate::parallel::{try_map_indexed, tree_sum_matrices};

pub const DEFAULT_FD_STEP: f64 = 1e-4;
/// Largest `d·m` accepted by [`fd_oracle`].
pub const FD_ORACLE_BUDGET: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HeadHessianMode {
    /// Closed form; only for a split at the last layer with identity output.
    Analytic,
    /// Central differences of the backpropagated `∇_u L`.
    FiniteDifference { step: f64 },
}

impl Default for HeadHessianMode {
    fn default() -> Self {
        HeadHessianMode::FiniteDifference {
            step: DEFAULT_FD_STEP,
        }
    }
}

impl HeadHessianMode {
    /// Analytic when the split allows it, finite differences otherwise.
    pub fn best_for(split: &FeatureSplit) -> Self {
        if analytic_applies(split) {
            HeadHessianMode::Analytic
        } else {
            HeadHessianMode::default()
        }
    }
}

fn analytic_applies(split: &FeatureSplit) -> bool {
    split.is_last_layer()
        && split.model().layers()[split.layer_index() - 1].activation == Activation::Identity
}

/// Summary of the feature-layer Hessian over a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianSummary {
    /// `T[s,s'] = Tr(H_{s,s'})`.
    pub trace_matrix: Matrix,
    /// `H_{s,s}` for every neuron `s`, when requested.
    pub diag_blocks: Option<Vec<Matrix>>,
    pub sample_count: usize,
    pub layer_index: usize,
    /// Samples whose finite-difference stencil crossed a ReLU kink.
    pub kink_samples: usize,
}

fn relu_pattern(split: &FeatureSplit, u: &[f64]) -> Result<Vec<bool>> {
    let layers = &split.model().layers()[split.layer_index() - 1..];
    let mut pattern = Vec::new();
    let mut z: Vec<f64> = u.iter().zip(split.bias()).map(|(a, b)| a + b).collect();
    for (k, layer) in layers.iter().enumerate() {
        if k > 0 {
            z = layer.preactivate(&z)?;
        }
        if layer.activation == Activation::Relu {
            pattern.extend(z.iter().map(|v| *v > 0.0));
        }
        z = layer.activate(&z);
    }
    Ok(pattern)
}

/// `∇²_u L` at `u`, plus whether the stencil crossed a ReLU kink.
pub fn head_hessian_at(
    split: &FeatureSplit,
    u: &[f64],
    y: &Label,
    mode: HeadHessianMode,
) -> Result<(Matrix, bool)> {
    match mode {
        HeadHessianMode::Analytic => {
            if !analytic_applies(split) {
                return Err(Error::Mode(format!(
                    "analytic head Hessian needs a split at the last layer with identity output, got layer {} of {}",
                    split.layer_index(),
                    split.model().depth()
                )));
            }
            let out = split.head_output(u)?;
            Ok((split.head_loss().output_hessian(&out, y)?, false))
        }
        HeadHessianMode::FiniteDifference { step } => {
            if !(step > 0.0) {
                return Err(Error::Config(format!("fd step must be positive, got {step}")));
            }
            let d = u.len();
            let base = relu_pattern(split, u)?;
            let mut kink = false;
            let mut h = Matrix::zeros(d, d);
            let mut probe = u.to_vec();
            for j in 0..d {
                probe[j] = u[j] + step;
                let (_, gp) = split.head_loss_grad(&probe, y)?;
                kink |= !base.is_empty() && relu_pattern(split, &probe)? != base;
                probe[j] = u[j] - step;
                let (_, gm) = split.head_loss_grad(&probe, y)?;
                kink |= !base.is_empty() && relu_pattern(split, &probe)? != base;
                probe[j] = u[j];
                for i in 0..d {
                    h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
                }
            }
            if !h.is_finite() {
                return Err(Error::NonFinite("head Hessian".into()));
            }
            Ok((h.symmetrized()?, kink))
        }
    }
}

/// `∇²_u L(u)` at `u = wφ(x)` for one sample in the split's input space.
pub fn head_hessian(
    split: &FeatureSplit,
    x: &[f64],
    y: &Label,
    mode: HeadHessianMode,
) -> Result<Matrix> {
    let u = split.w().matvec(&split.features(x)?)?;
    Ok(head_hessian_at(split, &u, y, mode)?.0)
}

struct PerSample {
    head: Matrix,
    feature: Vec<f64>,
    kink: bool,
}

fn per_sample(
    split: &FeatureSplit,
    data: &LabeledSet,
    mode: HeadHessianMode,
    workers: usize,
) -> Result<Vec<PerSample>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("Hessian over an empty sample".into()));
    }
    let features = split.feature_set(data)?;
    try_map_indexed(features.len(), workers, |i| {
        let phi = features.input(i);
        let u = split.w().matvec(phi)?;
        let (head, kink) = head_hessian_at(split, &u, features.label(i), mode)?;
        Ok(PerSample {
            head,
            feature: phi.to_vec(),
            kink,
        })
    })
}

/// Trace matrix and, optionally, all diagonal blocks, averaged over `data`
/// with the `1/|S|` convention of the empirical risk.
pub fn hessian_summary(
    split: &FeatureSplit,
    data: &LabeledSet,
    mode: HeadHessianMode,
    with_blocks: bool,
    workers: usize,
) -> Result<HessianSummary> {
    let samples = per_sample(split, data, mode, workers)?;
    let n = samples.len() as f64;
    let (d, m) = (split.d(), split.m());
    let terms: Vec<Matrix> = samples
        .iter()
        .map(|p| p.head.scale(norm_sq(&p.feature) / n))
        .collect();
    let trace_matrix = tree_sum_matrices(&terms)?
        .expect("non-empty sample")
        .symmetrized()?;
    let diag_blocks = if with_blocks {
        // H_ss = Φᵀ diag(c_s / n) Φ
        let mut phi = Matrix::zeros(samples.len(), m);
        for (i, p) in samples.iter().enumerate() {
            phi.row_mut(i).copy_from_slice(&p.feature);
        }
        let mut blocks = Vec::with_capacity(d);
        for s in 0..d {
            let mut scaled = phi.clone();
            for (i, p) in samples.iter().enumerate() {
                let c = p.head[(s, s)] / n;
                scaled.row_mut(i).iter_mut().for_each(|v| *v *= c);
            }
            blocks.push(scaled.t_matmul(&phi)?.symmetrized()?);
        }
        Some(blocks)
    } else {
        None
    };
    Ok(HessianSummary {
        trace_matrix,
        diag_blocks,
        sample_count: samples.len(),
        layer_index: split.layer_index(),
        kink_samples: samples.iter().filter(|p| p.kink).count(),
    })
}

/// `T[s,s'] = (1/|S|) Σ_i [∇²_u L_i]_{s,s'} ||φ(x_i)||²`.
pub fn trace_matrix(split: &FeatureSplit, data: &LabeledSet, mode: HeadHessianMode) -> Result<HessianSummary> {
    hessian_summary(split, data, mode, false, 1)
}

/// `H_{s,s} = (1/|S|) Σ_i [∇²_u L_i]_{s,s} φ(x_i)φ(x_i)ᵀ` for neuron `s`
/// (0-based).
pub fn diag_block(
    split: &FeatureSplit,
    data: &LabeledSet,
    s: usize,
    mode: HeadHessianMode,
) -> Result<Matrix> {
    if s >= split.d() {
        return Err(Error::Index(format!("neuron {s} of {}", split.d())));
    }
    let samples = per_sample(split, data, mode, 1)?;
    let n = samples.len() as f64;
    let m = split.m();
    let terms: Vec<Matrix> = samples
        .iter()
        .map(|p| Matrix::outer(&p.feature, &p.feature).scale(p.head[(s, s)] / n))
        .collect();
    debug_assert!(terms.iter().all(|t| t.shape() == (m, m)));
    tree_sum_matrices(&terms)?
        .expect("non-empty sample")
        .symmetrized()
}

/// Full Hessian of the empirical risk with respect to the weights of layer
/// `l`, by central second differences. Row/column `s·m + t` is weight
/// `w[s][t]`.
pub fn fd_oracle(model: &Mlp, l: usize, data: &LabeledSet, step: f64) -> Result<Matrix> {
    let w = model.layer(l)?.weights.clone();
    let (d, m) = w.shape();
    let n = d * m;
    if n > FD_ORACLE_BUDGET {
        return Err(Error::Budget(format!(
            "d·m = {n} exceeds the oracle budget {FD_ORACLE_BUDGET}"
        )));
    }
    if !(step > 0.0) {
        return Err(Error::Config(format!("fd step must be positive, got {step}")));
    }
    let eval = |shifts: &[(usize, f64)]| -> Result<f64> {
        let mut wp = w.clone();
        for &(k, delta) in shifts {
            wp.as_mut_slice()[k] += delta;
        }
        model.with_layer_weights(l, wp)?.empirical_loss(data)
    };
    let f0 = eval(&[])?;
    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        let fp = eval(&[(i, step)])?;
        let fm = eval(&[(i, -step)])?;
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (step * step);
        for j in 0..i {
            let fpp = eval(&[(i, step), (j, step)])?;
            let fpm = eval(&[(i, step), (j, -step)])?;
            let fmp = eval(&[(i, -step), (j, step)])?;
            let fmm = eval(&[(i, -step), (j, -step)])?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

/// Block `(s, s')` (`m × m`) of a full layer Hessian.
pub fn block(full: &Matrix, m: usize, s: usize, s2: usize) -> Matrix {
    let mut b = Matrix::zeros(m, m);
    for t in 0..m {
        for t2 in 0..m {
            b[(t, t2)] = full[(s * m + t, s2 * m + t2)];
        }
    }
    b
}

/// `Tr(H_{s,s'})` for all neuron pairs of a full layer Hessian.
pub fn block_traces(full: &Matrix, d: usize, m: usize) -> Matrix {
    let mut t = Matrix::zeros(d, d);
    for s in 0..d {
        for s2 in 0..d {
            t[(s, s2)] = (0..m).map(|k| full[(s * m + k, s2 * m + k)]).sum();
        }
    }
    t
}
