//! Function-preserving rescalings of networks with positively homogeneous
//! activations.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledSet;
use crate::error::{Error, Result};
use crate::net::{split_at, Activation, Mlp};
use crate::numkit::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReparamSpec {
    /// Multiply layer `l` by `alpha`, divide layer `k` by `alpha`.
    Layerwise { l: usize, k: usize, alpha: f64 },
    /// Multiply the incoming weights of neuron `s` in layer `l` by `lambda`
    /// and its outgoing weights by `1/lambda`.
    Neuronwise { l: usize, s: usize, lambda: f64 },
}

impl ReparamSpec {
    pub fn apply(&self, model: &Mlp) -> Result<Mlp> {
        match *self {
            ReparamSpec::Layerwise { l, k, alpha } => apply_layerwise(model, l, k, alpha),
            ReparamSpec::Neuronwise { l, s, lambda } => apply_neuronwise(model, l, s, lambda),
        }
    }
}

/// Apply a sequence of reparameterizations in order.
pub fn apply_all(model: &Mlp, specs: &[ReparamSpec]) -> Result<Mlp> {
    let mut m = model.clone();
    for spec in specs {
        m = spec.apply(&m)?;
    }
    Ok(m)
}

fn check_factor(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn check_layer(model: &Mlp, l: usize) -> Result<()> {
    if l == 0 || l > model.depth() {
        return Err(Error::Index(format!("layer {l} of a {}-layer network", model.depth())));
    }
    Ok(())
}

/// `W^l ← αW^l`, `b^j ← αb^j` for `l ≤ j < k`, `W^k ← W^k/α`. With `l > k`
/// the roles swap and the factor inverts, so the result is the same map.
pub fn apply_layerwise(model: &Mlp, l: usize, k: usize, alpha: f64) -> Result<Mlp> {
    check_factor("alpha", alpha)?;
    check_layer(model, l)?;
    check_layer(model, k)?;
    if l == k {
        return Err(Error::Config(format!("layer-wise reparameterization needs l != k, got {l}")));
    }
    if l > k {
        return apply_layerwise(model, k, l, 1.0 / alpha);
    }
    for j in l..k {
        let act = model.layers()[j - 1].activation;
        if !act.is_positively_homogeneous() {
            return Err(Error::Applicability(format!(
                "activation {act:?} of layer {j} is not positively homogeneous"
            )));
        }
    }
    let mut out = model.clone();
    let layers = out.layers_mut();
    layers[l - 1].weights.scale_in_place(alpha);
    for j in l..k {
        layers[j - 1].bias.iter_mut().for_each(|b| *b *= alpha);
    }
    layers[k - 1].weights.scale_in_place(1.0 / alpha);
    Ok(out)
}

/// Row `s` of `W^l` and `b^l_s` times `λ`, column `s` of `W^{l+1}` over `λ`.
pub fn apply_neuronwise(model: &Mlp, l: usize, s: usize, lambda: f64) -> Result<Mlp> {
    check_factor("lambda", lambda)?;
    check_layer(model, l)?;
    if l == model.depth() {
        return Err(Error::Index(format!(
            "neuron-wise reparameterization needs a following layer; {l} is the last"
        )));
    }
    let layer = &model.layers()[l - 1];
    if s >= layer.out_dim() {
        return Err(Error::Index(format!("neuron {s} of a {}-neuron layer", layer.out_dim())));
    }
    if !layer.activation.is_positively_homogeneous() {
        return Err(Error::Applicability(format!(
            "activation {:?} of layer {l} is not positively homogeneous",
            layer.activation
        )));
    }
    let mut out = model.clone();
    let layers = out.layers_mut();
    layers[l - 1].weights.row_mut(s).iter_mut().for_each(|w| *w *= lambda);
    layers[l - 1].bias[s] *= lambda;
    let next = &mut layers[l].weights;
    for r in 0..next.rows() {
        next.row_mut(r)[s] /= lambda;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub model: Mlp,
    /// Per-coordinate standard deviations before normalization, after flooring.
    pub scales: Vec<f64>,
    /// Coordinates whose deviation fell below the floor.
    pub floored: usize,
}

/// Rescale the features `φ^l(x)` to unit standard deviation over `data` by
/// moving `V = diag(σ)` across the ReLU of layer `l−1`:
/// `W^{l−1} ← V⁻¹W^{l−1}`, `b^{l−1} ← V⁻¹b^{l−1}`, `W^l ← W^l V`.
pub fn variance_normalize(model: &Mlp, l: usize, data: &LabeledSet, eps_floor: f64) -> Result<Normalized> {
    check_layer(model, l)?;
    if l < 2 {
        return Err(Error::Index("variance normalization needs a layer before the split".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("empty dataset".into()));
    }
    if !(eps_floor > 0.0) {
        return Err(Error::Config("eps_floor must be positive".into()));
    }
    let act = model.layers()[l - 2].activation;
    if act != Activation::Relu {
        return Err(Error::Applicability(format!(
            "variance normalization moves a diagonal across layer {}, whose activation is {act:?}",
            l - 1
        )));
    }
    let feats = split_at(model, l)?.feature_set(data)?;
    let scales = feature_std(feats.inputs());
    let mut floored = 0;
    let scales: Vec<f64> = scales
        .into_iter()
        .map(|s| {
            if s < eps_floor {
                floored += 1;
                eps_floor
            } else {
                s
            }
        })
        .collect();
    let mut out = model.clone();
    let layers = out.layers_mut();
    let prev = &mut layers[l - 2];
    for (i, s) in scales.iter().enumerate() {
        prev.weights.row_mut(i).iter_mut().for_each(|w| *w /= s);
        prev.bias[i] /= s;
    }
    let cur = &mut layers[l - 1].weights;
    for r in 0..cur.rows() {
        for (w, s) in cur.row_mut(r).iter_mut().zip(&scales) {
            *w *= s;
        }
    }
    Ok(Normalized { model: out, scales, floored })
}

/// Population standard deviation of each column.
pub fn feature_std(x: &Matrix) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let mean = (0..x.rows()).map(|i| x[(i, j)]).sum::<f64>() / n;
            ((0..x.rows()).map(|i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Largest `||f₁(x) − f₂(x)||∞` over standard normal probes.
pub fn max_function_deviation(m1: &Mlp, m2: &Mlp, probes: usize, rng: &mut Rng) -> Result<f64> {
    if m1.input_dim() != m2.input_dim() || m1.output_dim() != m2.output_dim() {
        return Err(Error::Shape(format!(
            "networks {}→{} and {}→{}",
            m1.input_dim(),
            m1.output_dim(),
            m2.input_dim(),
            m2.output_dim()
        )));
    }
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let x = rng.normal_vec(m1.input_dim());
        let a = m1.predict(&x)?;
        let b = m2.predict(&x)?;
        for (u, v) in a.iter().zip(&b) {
            let d = (u - v).abs();
            if !d.is_finite() {
                return Err(Error::NonFinite("network output".into()));
            }
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// [`max_function_deviation`], failing with `FunctionMismatch` above `tol`.
pub fn assert_function_equal(m1: &Mlp, m2: &Mlp, probes: usize, rng: &mut Rng, tol: f64) -> Result<f64> {
    let deviation = max_function_deviation(m1, m2, probes, rng)?;
    if deviation > tol {
        return Err(Error::FunctionMismatch { deviation, tolerance: tol });
    }
    Ok(deviation)
}

/// A random layer-wise or neuron-wise rescaling of `model` with factor drawn
/// log-uniformly from `[1/max_factor, max_factor]`. Only homogeneous-safe
/// choices are made; `None` when the network admits none.
pub fn random_reparam(model: &Mlp, max_factor: f64, rng: &mut Rng) -> Option<ReparamSpec> {
    let depth = model.depth();
    let homogeneous: Vec<bool> = model.layers().iter().map(|l| l.activation.is_positively_homogeneous()).collect();
    let mut options = Vec::new();
    for l in 1..depth {
        if homogeneous[l - 1] {
            options.push((l, true));
            options.push((l, false));
        }
    }
    if options.is_empty() {
        return None;
    }
    let (l, layerwise) = options[rng.below(options.len())];
    let factor = (max_factor.ln() * rng.uniform_in(-1.0, 1.0)).exp();
    Some(if layerwise {
        ReparamSpec::Layerwise { l, k: l + 1, alpha: factor }
    } else {
        let s = rng.below(model.layers()[l - 1].out_dim());
        ReparamSpec::Neuronwise { l, s, lambda: factor }
    })
}
