use serde::{Deserialize, Serialize};

use crate::datasets::{Label, LabeledSet};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

/// Rows per block when evaluating a whole dataset.
const EVAL_BLOCK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// `σ'(z)` given the pre-activation `z` and the output `a = σ(z)`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    /// `σ(αz) = ασ(z)` for every `α > 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadLoss {
    /// `Σ_j (ŷ_j − y_j)²`. Class labels are coded as `+1` for the true class
    /// and `−1` elsewhere.
    #[serde(rename = "mse")]
    Mse,
    /// `−log softmax(ŷ)_y`.
    #[serde(rename = "softmax-cross-entropy")]
    SoftmaxCrossEntropy,
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl HeadLoss {
    fn target(&self, out_dim: usize, y: &Label) -> Result<Vec<f64>> {
        match y {
            Label::Target(t) if t.len() == out_dim => Ok(t.clone()),
            Label::Target(t) => Err(Error::Shape(format!(
                "target of length {} for {out_dim} outputs",
                t.len()
            ))),
            Label::Class(c) if *c < out_dim => Ok((0..out_dim)
                .map(|j| if j == *c { 1.0 } else { -1.0 })
                .collect()),
            Label::Class(c) => Err(Error::Index(format!("class {c} with {out_dim} outputs"))),
        }
    }

    fn class(&self, out_dim: usize, y: &Label) -> Result<usize> {
        match y {
            Label::Class(c) if *c < out_dim => Ok(*c),
            Label::Class(c) => Err(Error::Index(format!("class {c} with {out_dim} outputs"))),
            Label::Target(_) => Err(Error::Mode(
                "softmax cross-entropy needs class labels".into(),
            )),
        }
    }

    pub fn loss(&self, out: &[f64], y: &Label) -> Result<f64> {
        match self {
            HeadLoss::Mse => {
                let t = self.target(out.len(), y)?;
                Ok(out.iter().zip(&t).map(|(o, t)| (o - t) * (o - t)).sum())
            }
            HeadLoss::SoftmaxCrossEntropy => {
                let c = self.class(out.len(), y)?;
                Ok(log_sum_exp(out) - out[c])
            }
        }
    }

    /// Loss and its gradient with respect to the network output.
    pub fn loss_grad(&self, out: &[f64], y: &Label) -> Result<(f64, Vec<f64>)> {
        match self {
            HeadLoss::Mse => {
                let t = self.target(out.len(), y)?;
                let r: Vec<f64> = out.iter().zip(&t).map(|(o, t)| o - t).collect();
                let loss = r.iter().map(|v| v * v).sum();
                Ok((loss, r.into_iter().map(|v| 2.0 * v).collect()))
            }
            HeadLoss::SoftmaxCrossEntropy => {
                let c = self.class(out.len(), y)?;
                let mut p = softmax(out);
                let loss = log_sum_exp(out) - out[c];
                p[c] -= 1.0;
                Ok((loss, p))
            }
        }
    }

    /// Hessian of the loss with respect to the network output.
    pub fn output_hessian(&self, out: &[f64], y: &Label) -> Result<Matrix> {
        let n = out.len();
        match self {
            HeadLoss::Mse => {
                self.target(n, y)?;
                Ok(Matrix::identity(n).scale(2.0))
            }
            HeadLoss::SoftmaxCrossEntropy => {
                self.class(n, y)?;
                let p = softmax(out);
                let mut h = Matrix::outer(&p, &p).scale(-1.0);
                for i in 0..n {
                    h[(i, i)] += p[i];
                }
                Ok(h)
            }
        }
    }

    /// Predicted class (argmax of the output).
    pub fn predict_class(out: &[f64]) -> usize {
        let mut best = 0;
        for (i, v) in out.iter().enumerate() {
            if *v > out[best] {
                best = i;
            }
        }
        best
    }
}

/// One affine map followed by an elementwise activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape(format!(
                "bias of length {} for {}x{} weights",
                bias.len(),
                weights.rows(),
                weights.cols()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// `W a + b` (product first, then bias).
    #[inline]
    pub fn preactivate(&self, a: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weights.matvec(a)?;
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        Ok(z)
    }

    pub fn activate(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.activation.apply(v)).collect()
    }

    fn forward_batch(&self, a: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut z = a.matmul_t(&self.weights)?;
        for r in 0..z.rows() {
            for (zi, bi) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *zi += bi;
            }
        }
        let mut out = z.clone();
        for v in out.as_mut_slice() {
            *v = self.activation.apply(*v);
        }
        Ok((z, out))
    }
}

/// Gradient of a scalar with respect to one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Output of [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Vec<f64>,
    /// `activations[k]` is the input of layer `k + 1`: `activations[0] = x`
    /// and `activations[L]` is the output. Equivalently `activations[l − 1] =
    /// φ^l(x)`.
    pub activations: Vec<Vec<f64>>,
    pub preactivations: Vec<Vec<f64>>,
}

/// A dense feed-forward network with a loss attached to its output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    head_loss: HeadLoss,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>, head_loss: HeadLoss) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("network without layers".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} but layer {} takes {}",
                    k + 1,
                    pair[0].out_dim(),
                    k + 2,
                    pair[1].in_dim()
                )));
            }
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!("bias length of layer {}", k + 1)));
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {}", k + 1)));
            }
        }
        Ok(Self { layers, head_loss })
    }

    /// Glorot-uniform weights, zero biases. `dims` lists the layer widths from
    /// input to output; `activations` has one entry per layer.
    pub fn glorot(
        dims: &[usize],
        activations: &[Activation],
        head_loss: HeadLoss,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Shape(format!(
                "{} widths need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidDimension("zero layer width".into()));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_in(-limit, limit))
                    .collect();
                Layer::new(Matrix::new(fan_out, fan_in, data)?, vec![0.0; fan_out], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, head_loss)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> Result<&Layer> {
        if l == 0 || l > self.layers.len() {
            return Err(Error::Index(format!(
                "layer {l} of a {}-layer network",
                self.layers.len()
            )));
        }
        Ok(&self.layers[l - 1])
    }

    /// Mutable access without re-validation; callers keep parameters finite
    /// and shapes unchanged.
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head_loss(&self) -> HeadLoss {
        self.head_loss
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input of length {} for a network taking {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut preactivations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for layer in &self.layers {
            let z = layer.preactivate(activations.last().expect("non-empty"))?;
            activations.push(layer.activate(&z));
            preactivations.push(z);
        }
        Ok(Forward {
            output: activations.last().expect("non-empty").clone(),
            activations,
            preactivations,
        })
    }

    /// `f(x)`.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input of length {} for a network taking {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut a = x.to_vec();
        for layer in &self.layers {
            a = layer.activate(&layer.preactivate(&a)?);
        }
        Ok(a)
    }

    /// Outputs of layers `from..=to` (1-based) applied to the rows of `x`.
    pub fn forward_range_batch(&self, x: &Matrix, from: usize, to: usize) -> Result<Matrix> {
        let mut a = x.clone();
        for layer in &self.layers[from - 1..to] {
            a = layer.forward_batch(&a)?.1;
        }
        Ok(a)
    }

    /// Row-wise `f` on a batch. Uses blocked matrix products, so results may
    /// differ from [`Mlp::predict`] in the last bits.
    pub fn predict_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs of dimension {} for a network taking {}",
                x.cols(),
                self.input_dim()
            )));
        }
        self.forward_range_batch(x, 1, self.depth())
    }

    pub fn loss(&self, x: &[f64], y: &Label) -> Result<f64> {
        self.head_loss.loss(&self.predict(x)?, y)
    }

    /// Mean loss over a dataset.
    pub fn empirical_loss(&self, data: &LabeledSet) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("empty dataset".into()));
        }
        let mut total = 0.0;
        for block in blocks(data.len()) {
            let x = rows_matrix(data, &block)?;
            let out = self.predict_batch(&x)?;
            for (r, &i) in block.iter().enumerate() {
                total += self.head_loss.loss(out.row(r), data.label(i))?;
            }
        }
        Ok(total / data.len() as f64)
    }

    /// Fraction of samples whose argmax output equals the class label.
    pub fn accuracy(&self, data: &LabeledSet) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("empty dataset".into()));
        }
        let mut hits = 0usize;
        for block in blocks(data.len()) {
            let x = rows_matrix(data, &block)?;
            let out = self.predict_batch(&x)?;
            for (r, &i) in block.iter().enumerate() {
                let c = data.label(i).class().ok_or_else(|| {
                    Error::Mode("accuracy needs class labels".into())
                })?;
                if HeadLoss::predict_class(out.row(r)) == c {
                    hits += 1;
                }
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Mean loss over the rows `indices` of `data` and its gradient with
    /// respect to every parameter.
    pub fn loss_and_grad(&self, data: &LabeledSet, indices: &[usize]) -> Result<(f64, Vec<LayerGrad>)> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        if data.dim() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs of dimension {} for a network taking {}",
                data.dim(),
                self.input_dim()
            )));
        }
        let n = indices.len() as f64;
        let x = rows_matrix(data, indices)?;
        let mut pre = Vec::with_capacity(self.depth());
        let mut acts = Vec::with_capacity(self.depth() + 1);
        acts.push(x);
        for layer in &self.layers {
            let (z, a) = layer.forward_batch(acts.last().expect("non-empty"))?;
            pre.push(z);
            acts.push(a);
        }
        let out = acts.last().expect("non-empty");
        let mut delta = Matrix::zeros(out.rows(), out.cols());
        let mut loss = 0.0;
        for (r, &i) in indices.iter().enumerate() {
            let (l, g) = self.head_loss.loss_grad(out.row(r), data.label(i))?;
            loss += l;
            for (d, gv) in delta.row_mut(r).iter_mut().zip(g) {
                *d = gv / n;
            }
        }
        let mut grads = Vec::with_capacity(self.depth());
        for k in (0..self.depth()).rev() {
            let layer = &self.layers[k];
            let (z, a) = (&pre[k], &acts[k + 1]);
            for ((d, zv), av) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(z.as_slice())
                .zip(a.as_slice())
            {
                *d *= layer.activation.derivative(*zv, *av);
            }
            let gw = delta.t_matmul(&acts[k])?;
            let mut gb = vec![0.0; layer.out_dim()];
            for r in 0..delta.rows() {
                for (b, d) in gb.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            if k > 0 {
                delta = delta.matmul(&layer.weights)?;
            }
            grads.push(LayerGrad {
                weights: gw,
                bias: gb,
            });
        }
        grads.reverse();
        Ok((loss / n, grads))
    }

    /// Mean loss and gradient over the whole dataset, as one flat vector in
    /// [`Mlp::parameters`] order.
    pub fn loss_and_flat_grad(&self, data: &LabeledSet) -> Result<(f64, Vec<f64>)> {
        let all: Vec<usize> = (0..data.len()).collect();
        let (loss, grads) = self.loss_and_grad(data, &all)?;
        Ok((loss, flatten_grads(&grads)))
    }

    /// All parameters: for each layer, weights row-major then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(l.weights.as_slice());
            p.extend_from_slice(&l.bias);
        }
        p
    }

    /// Copy of `self` with parameters replaced (same order as
    /// [`Mlp::parameters`]).
    pub fn with_parameters(&self, params: &[f64]) -> Result<Mlp> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.num_params()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in out.layers.iter_mut() {
            let nw = l.weights.rows() * l.weights.cols();
            l.weights
                .as_mut_slice()
                .copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(out)
    }

    /// Copy of `self` with the weights of layer `l` (1-based) replaced.
    pub fn with_layer_weights(&self, l: usize, weights: Matrix) -> Result<Mlp> {
        let old = self.layer(l)?;
        if old.weights.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "{:?} weights for a {:?} layer",
                weights.shape(),
                old.weights.shape()
            )));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("layer weights".into()));
        }
        let mut out = self.clone();
        out.layers[l - 1].weights = weights;
        Ok(out)
    }
}

/// Gradient in [`Mlp::parameters`] order.
pub fn flatten_grads(grads: &[LayerGrad]) -> Vec<f64> {
    let mut g = Vec::new();
    for l in grads {
        g.extend_from_slice(l.weights.as_slice());
        g.extend_from_slice(&l.bias);
    }
    g
}

fn blocks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(EVAL_BLOCK)
        .map(|s| (s..(s + EVAL_BLOCK).min(n)).collect())
        .collect()
}

pub(crate) fn rows_matrix(data: &LabeledSet, indices: &[usize]) -> Result<Matrix> {
    let dim = data.dim();
    let mut buf = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        if i >= data.len() {
            return Err(Error::Index(format!("row {i} of {}", data.len())));
        }
        buf.extend_from_slice(data.input(i));
    }
    Matrix::new(indices.len(), dim, buf)
}
