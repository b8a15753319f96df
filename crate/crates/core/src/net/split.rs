use crate::datasets::{Label, LabeledSet, Space};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

use super::mlp::{rows_matrix, HeadLoss, Mlp};

/// A network factored at layer `l` as `f(x) = g(w φ(x))`.
///
/// `φ` is layers `1..l−1`, `w` is the weight matrix of layer `l` (`d × m`) and
/// the head `g` is the bias and activation of layer `l` followed by layers
/// `l+1..L` and the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSplit {
    model: Mlp,
    layer: usize,
}

/// Factor `model` at layer `l` (1-based).
pub fn split_at(model: &Mlp, l: usize) -> Result<FeatureSplit> {
    FeatureSplit::new(model.clone(), l)
}

impl FeatureSplit {
    pub fn new(model: Mlp, l: usize) -> Result<Self> {
        model.layer(l)?;
        Ok(Self { model, layer: l })
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn into_model(self) -> Mlp {
        self.model
    }

    pub fn layer_index(&self) -> usize {
        self.layer
    }

    pub fn is_last_layer(&self) -> bool {
        self.layer == self.model.depth()
    }

    /// Feature-layer weights `w` (`d × m`).
    pub fn w(&self) -> &Matrix {
        &self.model.layers()[self.layer - 1].weights
    }

    /// Bias `b^l` of the split layer (part of the head).
    pub fn bias(&self) -> &[f64] {
        &self.model.layers()[self.layer - 1].bias
    }

    /// Feature dimension `m`.
    pub fn m(&self) -> usize {
        self.w().cols()
    }

    /// Number of feature-layer neurons `d`.
    pub fn d(&self) -> usize {
        self.w().rows()
    }

    pub fn head_loss(&self) -> HeadLoss {
        self.model.head_loss()
    }

    /// `φ(x)`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.model.input_dim() {
            return Err(Error::Shape(format!(
                "input of length {} for a network taking {}",
                x.len(),
                self.model.input_dim()
            )));
        }
        let mut a = x.to_vec();
        for layer in &self.model.layers()[..self.layer - 1] {
            a = layer.activate(&layer.preactivate(&a)?);
        }
        Ok(a)
    }

    /// `φ` applied to each row.
    pub fn features_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.model.input_dim() {
            return Err(Error::Shape(format!(
                "inputs of dimension {} for a network taking {}",
                x.cols(),
                self.model.input_dim()
            )));
        }
        if self.layer == 1 {
            return Ok(x.clone());
        }
        self.model.forward_range_batch(x, 1, self.layer - 1)
    }

    /// The feature set `φ(S)` with the labels of `data`. Input-space sets are
    /// mapped through `φ`; feature-space sets are returned as they are.
    pub fn feature_set(&self, data: &LabeledSet) -> Result<LabeledSet> {
        match data.space() {
            Space::Feature => {
                if data.dim() != self.m() {
                    return Err(Error::Shape(format!(
                        "features of dimension {} for a split with m = {}",
                        data.dim(),
                        self.m()
                    )));
                }
                Ok(data.clone())
            }
            Space::Input => {
                let all: Vec<usize> = (0..data.len()).collect();
                let x = rows_matrix(data, &all)?;
                data.with_inputs(self.features_batch(&x)?, Space::Feature)
            }
        }
    }

    /// `g(u)`: network output for feature-layer product `u = wφ(x)`.
    pub fn head_output(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.d() {
            return Err(Error::Shape(format!(
                "u of length {} for d = {}",
                u.len(),
                self.d()
            )));
        }
        let layers = self.model.layers();
        let split = &layers[self.layer - 1];
        let mut z = u.to_vec();
        for (zi, bi) in z.iter_mut().zip(&split.bias) {
            *zi += bi;
        }
        let mut a = split.activate(&z);
        for layer in &layers[self.layer..] {
            a = layer.activate(&layer.preactivate(&a)?);
        }
        Ok(a)
    }

    /// `g` applied to each row of `u`.
    pub fn head_output_batch(&self, u: &Matrix) -> Result<Matrix> {
        if u.cols() != self.d() {
            return Err(Error::Shape(format!(
                "u of dimension {} for d = {}",
                u.cols(),
                self.d()
            )));
        }
        let layers = self.model.layers();
        let split = &layers[self.layer - 1];
        let mut a = u.clone();
        for r in 0..a.rows() {
            for (v, b) in a.row_mut(r).iter_mut().zip(&split.bias) {
                *v = split.activation.apply(*v + b);
            }
        }
        if self.layer < self.model.depth() {
            a = self
                .model
                .forward_range_batch(&a, self.layer + 1, self.model.depth())?;
        }
        Ok(a)
    }

    /// `L(u) = ℓ(g(u), y)`.
    pub fn head_loss_at(&self, u: &[f64], y: &Label) -> Result<f64> {
        self.head_loss().loss(&self.head_output(u)?, y)
    }

    /// `L(u)` and `∇_u L(u)`, by backpropagation through the head.
    pub fn head_loss_grad(&self, u: &[f64], y: &Label) -> Result<(f64, Vec<f64>)> {
        if u.len() != self.d() {
            return Err(Error::Shape(format!(
                "u of length {} for d = {}",
                u.len(),
                self.d()
            )));
        }
        let layers = &self.model.layers()[self.layer - 1..];
        let mut pre = Vec::with_capacity(layers.len());
        let mut acts = Vec::with_capacity(layers.len());
        let mut z = u.to_vec();
        for (zi, bi) in z.iter_mut().zip(&layers[0].bias) {
            *zi += bi;
        }
        acts.push(layers[0].activate(&z));
        pre.push(z);
        for layer in &layers[1..] {
            let z = layer.preactivate(acts.last().expect("non-empty"))?;
            acts.push(layer.activate(&z));
            pre.push(z);
        }
        let (loss, mut delta) = self
            .head_loss()
            .loss_grad(acts.last().expect("non-empty"), y)?;
        for k in (0..layers.len()).rev() {
            for ((d, z), a) in delta.iter_mut().zip(&pre[k]).zip(&acts[k]) {
                *d *= layers[k].activation.derivative(*z, *a);
            }
            if k > 0 {
                delta = layers[k].weights.t_matvec(&delta)?;
            }
        }
        Ok((loss, delta))
    }

    /// `g(w_alt z)` and `ℓ(g(w_alt z), y)`.
    pub fn head_apply(&self, w_alt: &Matrix, z: &[f64], y: &Label) -> Result<(Vec<f64>, f64)> {
        if w_alt.shape() != self.w().shape() {
            return Err(Error::Shape(format!(
                "{:?} weights for a {:?} feature layer",
                w_alt.shape(),
                self.w().shape()
            )));
        }
        if z.len() != self.m() {
            return Err(Error::Shape(format!(
                "feature of length {} for m = {}",
                z.len(),
                self.m()
            )));
        }
        let u = w_alt.matvec(z)?;
        let out = self.head_output(&u)?;
        let loss = self.head_loss().loss(&out, y)?;
        Ok((out, loss))
    }

    /// Same split with the feature-layer weights replaced.
    pub fn with_w(&self, w: Matrix) -> Result<FeatureSplit> {
        Ok(Self {
            model: self.model.with_layer_weights(self.layer, w)?,
            layer: self.layer,
        })
    }

    /// The network `g(wφ(·))` reassembled.
    pub fn reassemble(&self) -> Mlp {
        self.model.clone()
    }
}
