use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, HeadLoss, Layer, Mlp};
use crate::numkit::{cholesky, cholesky_solve, Matrix, MinNormSolver, Rng};

use super::set::{Label, LabeledSet, Space};
use super::synth::{generate_feature_space, PlantedDistribution, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    /// Decoder widths from input to feature space.
    pub decoder_dims: Vec<usize>,
    /// Ridge penalty of the head fit.
    pub ridge: f64,
    /// Entries are clamped to `[−1 + eps, 1 − eps]` before `atanh`.
    pub clamp_eps: f64,
    /// Alternating-projection sweeps used to keep intermediate targets inside
    /// the tanh range. Zero gives the plain layer-by-layer inversion.
    pub refine_iterations: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            decoder_dims: vec![784, 512, 128, 16, 8],
            ridge: 1.0,
            clamp_eps: 1e-3,
            refine_iterations: 200,
        }
    }
}

/// Fitted linear head `u ↦ W u + b` with two outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeHead {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Ridge regression of `±1` class codes on `data` with an unpenalized
/// intercept (inputs and targets are centered first).
pub fn ridge_head(data: &LabeledSet, classes: usize, ridge: f64) -> Result<RidgeHead> {
    if data.is_empty() {
        return Err(Error::EmptyInput("ridge fit on an empty set".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be >= 0, got {ridge}")));
    }
    let (n, m) = (data.len(), data.dim());
    let mut targets = Matrix::zeros(n, classes);
    for (i, y) in data.labels().iter().enumerate() {
        let c = y
            .class()
            .ok_or_else(|| Error::Mode("ridge head needs class labels".into()))?;
        if c >= classes {
            return Err(Error::Index(format!("class {c} of {classes}")));
        }
        for j in 0..classes {
            targets[(i, j)] = if j == c { 1.0 } else { -1.0 };
        }
    }
    let x_mean: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| data.input(i)[j]).sum::<f64>() / n as f64)
        .collect();
    let t_mean: Vec<f64> = (0..classes)
        .map(|j| (0..n).map(|i| targets[(i, j)]).sum::<f64>() / n as f64)
        .collect();
    let mut xc = data.inputs().clone();
    for i in 0..n {
        for (v, mu) in xc.row_mut(i).iter_mut().zip(&x_mean) {
            *v -= mu;
        }
        for (j, mu) in t_mean.iter().enumerate() {
            targets[(i, j)] -= mu;
        }
    }
    let mut gram = xc.t_matmul(&xc)?;
    for i in 0..m {
        gram[(i, i)] += ridge;
    }
    let l = cholesky(&gram.symmetrized()?)?;
    let rhs = xc.t_matmul(&targets)?;
    let mut weights = Matrix::zeros(classes, m);
    for j in 0..classes {
        let col = cholesky_solve(&l, &rhs.column(j))?;
        weights.row_mut(j).copy_from_slice(&col);
    }
    let bias = (0..classes)
        .map(|j| t_mean[j] - crate::numkit::dot(weights.row(j), &x_mean))
        .collect();
    Ok(RidgeHead { weights, bias })
}

/// Precomputed layer-by-layer inverse of a tanh decoder.
#[derive(Clone, Debug)]
pub struct DecoderInverse {
    solvers: Vec<MinNormSolver>,
    biases: Vec<Vec<f64>>,
    clamp_eps: f64,
    refine_iterations: usize,
}

impl DecoderInverse {
    pub fn new(decoder: &Mlp, clamp_eps: f64, refine_iterations: usize) -> Result<Self> {
        if decoder
            .layers()
            .iter()
            .any(|l| l.activation != Activation::Tanh)
        {
            return Err(Error::Applicability(
                "inverse propagation needs tanh at every decoder layer".into(),
            ));
        }
        if !(clamp_eps > 0.0 && clamp_eps < 1.0) {
            return Err(Error::Config(format!(
                "clamp_eps must be in (0, 1), got {clamp_eps}"
            )));
        }
        let solvers = decoder
            .layers()
            .iter()
            .map(|l| MinNormSolver::new(&l.weights, 0.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            solvers,
            biases: decoder.layers().iter().map(|l| l.bias.clone()).collect(),
            clamp_eps,
            refine_iterations,
        })
    }

    fn target(&self, z: &[f64], bias: &[f64]) -> Vec<f64> {
        let hi = 1.0 - self.clamp_eps;
        z.iter()
            .zip(bias)
            .map(|(v, b)| v.clamp(-hi, hi).atanh() - b)
            .collect()
    }

    /// Pull `x` (a solution of `W x = t`) toward the box `[−1 + eps, 1 − eps]`
    /// while staying on the solution set.
    fn refine(&self, solver: &MinNormSolver, t: &[f64], x: &mut Vec<f64>) -> Result<()> {
        let hi = 1.0 - self.clamp_eps;
        for _ in 0..self.refine_iterations {
            if x.iter().all(|v| v.abs() <= hi) {
                break;
            }
            let clipped: Vec<f64> = x.iter().map(|v| v.clamp(-hi, hi)).collect();
            let r = crate::numkit::sub(t, &solver.system().matvec(&clipped)?);
            let step = solver.solve(&r)?;
            *x = clipped.iter().zip(&step).map(|(a, b)| a + b).collect();
        }
        Ok(())
    }

    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut cur = z.to_vec();
        for (k, solver) in self.solvers.iter().enumerate().rev() {
            if cur.len() != solver.system().rows() {
                return Err(Error::Shape(format!(
                    "feature of length {} for a layer with {} outputs",
                    cur.len(),
                    solver.system().rows()
                )));
            }
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("feature vector".into()));
            }
            let t = self.target(&cur, &self.biases[k]);
            let mut x = solver.solve(&t)?;
            if k > 0 {
                self.refine(solver, &t, &mut x)?;
            }
            cur = x;
        }
        Ok(cur)
    }

    /// Inverts every row of `z`.
    pub fn invert_batch(&self, z: &Matrix) -> Result<Matrix> {
        let mut cur = z.clone();
        for (k, solver) in self.solvers.iter().enumerate().rev() {
            if cur.cols() != solver.system().rows() {
                return Err(Error::Shape(format!(
                    "features of dimension {} for a layer with {} outputs",
                    cur.cols(),
                    solver.system().rows()
                )));
            }
            if !cur.is_finite() {
                return Err(Error::NonFinite("feature vectors".into()));
            }
            let mut t = Matrix::zeros(cur.rows(), cur.cols());
            for r in 0..cur.rows() {
                let row = self.target(cur.row(r), &self.biases[k]);
                t.row_mut(r).copy_from_slice(&row);
            }
            let mut x = t.matmul_t(solver.operator())?;
            if k > 0 && self.refine_iterations > 0 {
                for r in 0..x.rows() {
                    let mut row = x.row(r).to_vec();
                    self.refine(solver, t.row(r), &mut row)?;
                    x.row_mut(r).copy_from_slice(&row);
                }
            }
            cur = x;
        }
        Ok(cur)
    }
}

/// Layer-by-layer inverse of a tanh decoder: clamp, `atanh`, subtract the
/// bias, then the minimum-norm solution of `W x = ·`. Intermediate solutions
/// are additionally projected toward the tanh range when
/// `refine_iterations > 0`.
pub fn inverse_propagate(
    decoder: &Mlp,
    z: &[f64],
    clamp_eps: f64,
    refine_iterations: usize,
) -> Result<Vec<f64>> {
    DecoderInverse::new(decoder, clamp_eps, refine_iterations)?.invert(z)
}

/// Random tanh decoder, Glorot-uniform with zero biases.
pub fn random_decoder(dims: &[usize], rng: &mut Rng) -> Result<Mlp> {
    let acts = vec![Activation::Tanh; dims.len().saturating_sub(1)];
    Mlp::glorot(dims, &acts, HeadLoss::Mse, rng)
}

/// A planted learning problem: a random tanh decoder `φ` and a ridge head fit
/// on feature space, assembled into one network.
#[derive(Clone, Debug)]
pub struct PlantedProblem {
    pub decoder: Mlp,
    pub head: RidgeHead,
    pub model: Mlp,
    pub distribution: PlantedDistribution,
    inverse: DecoderInverse,
}

impl PlantedProblem {
    /// Class of the most likely planted cluster at feature `z`.
    pub fn feature_label_oracle(&self, z: &[f64]) -> Result<usize> {
        self.distribution.oracle(z)
    }

    /// Feature-space samples mapped to input space.
    pub fn to_input_space(&self, features: &LabeledSet) -> Result<LabeledSet> {
        let x = self.inverse.invert_batch(features.inputs())?;
        features.with_inputs(x, Space::Input)
    }

    /// Fresh labeled samples in input space.
    pub fn sample_inputs(&self, n: usize, rng: &mut Rng) -> Result<LabeledSet> {
        let f = self.distribution.draw(n, rng)?;
        self.to_input_space(&f)
    }

    /// Layer index of the head in [`PlantedProblem::model`].
    pub fn head_layer(&self) -> usize {
        self.model.depth()
    }

    pub fn inverse(&self) -> &DecoderInverse {
        &self.inverse
    }
}

/// Fit the head on `featureset`, sample a fresh decoder and assemble the full
/// model.
pub fn build_planted_problem(
    cfg: &PlantedConfig,
    distribution: PlantedDistribution,
    featureset: &LabeledSet,
    rng: &mut Rng,
) -> Result<PlantedProblem> {
    let m = *cfg
        .decoder_dims
        .last()
        .ok_or_else(|| Error::Config("empty decoder".into()))?;
    if featureset.dim() != m {
        return Err(Error::Shape(format!(
            "features of dimension {} for a decoder with output {m}",
            featureset.dim()
        )));
    }
    let head = ridge_head(featureset, 2, cfg.ridge)?;
    let decoder = random_decoder(&cfg.decoder_dims, rng)?;
    let mut layers = decoder.layers().to_vec();
    layers.push(Layer::new(
        head.weights.clone(),
        head.bias.clone(),
        Activation::Identity,
    )?);
    let model = Mlp::new(layers, HeadLoss::Mse)?;
    let inverse = DecoderInverse::new(&decoder, cfg.clamp_eps, cfg.refine_iterations)?;
    Ok(PlantedProblem {
        decoder,
        head,
        model,
        distribution,
        inverse,
    })
}

/// A planted problem with its training and test sets in input space.
#[derive(Clone, Debug)]
pub struct PlantedInstance {
    pub problem: PlantedProblem,
    pub train_features: LabeledSet,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Draw a distribution, a training set of `synth.n_samples`, a decoder and a
/// test set of `n_test`, all from `rng`.
pub fn planted_instance(
    synth: &SynthConfig,
    planted: &PlantedConfig,
    n_test: usize,
    rng: &mut Rng,
) -> Result<PlantedInstance> {
    let sample = generate_feature_space(synth, rng)?;
    let problem = build_planted_problem(planted, sample.distribution, &sample.featureset, rng)?;
    let train = problem.to_input_space(&sample.featureset)?;
    let test = problem.sample_inputs(n_test, rng)?;
    Ok(PlantedInstance {
        problem,
        train_features: sample.featureset,
        train,
        test,
    })
}

/// Label every row of `data` with `oracle`.
pub fn relabel(data: &LabeledSet, oracle: impl Fn(&[f64]) -> Result<usize>) -> Result<LabeledSet> {
    let labels = (0..data.len())
        .map(|i| oracle(data.input(i)).map(Label::Class))
        .collect::<Result<Vec<_>>>()?;
    LabeledSet::new(data.inputs().clone(), labels, data.space())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::split_at;

    fn small() -> PlantedConfig {
        PlantedConfig {
            decoder_dims: vec![40, 24, 12, 8],
            ..Default::default()
        }
    }

    fn synth(c: f64, n: usize) -> SynthConfig {
        SynthConfig {
            class_separation: c,
            n_samples: n,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_through_decoder() {
        let mut rng = Rng::new(1, 0);
        let inst = planted_instance(&synth(4.0, 200), &small(), 10, &mut rng).unwrap();
        let s = split_at(&inst.problem.model, inst.problem.head_layer()).unwrap();
        let phi = s.feature_set(&inst.train).unwrap();
        let err = crate::numkit::max_abs_diff(
            phi.inputs().as_slice(),
            inst.train_features.inputs().as_slice(),
        );
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn round_trip_full_size_decoder() {
        let mut rng = Rng::new(2, 0);
        let inst = planted_instance(&synth(2.0, 60), &PlantedConfig::default(), 4, &mut rng).unwrap();
        let phi = inst.problem.decoder.predict_batch(inst.train.inputs()).unwrap();
        let err = crate::numkit::max_abs_diff(phi.as_slice(), inst.train_features.inputs().as_slice());
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn batch_and_single_inverse_agree() {
        let mut rng = Rng::new(3, 0);
        let dec = random_decoder(&[30, 16, 8], &mut rng).unwrap();
        let inv = DecoderInverse::new(&dec, 1e-3, 50).unwrap();
        let z = Matrix::from_rows(&[
            (0..8).map(|_| rng.uniform_in(-0.9, 0.9)).collect::<Vec<_>>(),
            (0..8).map(|_| rng.uniform_in(-0.9, 0.9)).collect::<Vec<_>>(),
        ])
        .unwrap();
        let b = inv.invert_batch(&z).unwrap();
        for r in 0..2 {
            let s = inv.invert(z.row(r)).unwrap();
            assert!(crate::numkit::max_abs_diff(&s, b.row(r)) < 1e-10);
        }
    }

    #[test]
    fn zero_feature_traces_biases() {
        let mut rng = Rng::new(4, 0);
        let dec = random_decoder(&[20, 10, 8], &mut rng).unwrap();
        let x = inverse_propagate(&dec, &[0.0; 8], 1e-3, 0).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-12));
        let back = dec.predict(&x).unwrap();
        assert!(back.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn large_clamp_never_overflows() {
        let mut rng = Rng::new(5, 0);
        let dec = random_decoder(&[20, 10, 8], &mut rng).unwrap();
        let x = inverse_propagate(&dec, &[1.0, -1.0, 5.0, -7.0, 0.99, 0.0, 1e6, -1e6], 0.5, 0)
            .unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_tanh_decoder_rejected() {
        let mut rng = Rng::new(6, 0);
        let dec = Mlp::glorot(&[4, 3], &[Activation::Relu], HeadLoss::Mse, &mut rng).unwrap();
        assert!(matches!(
            inverse_propagate(&dec, &[0.0; 3], 1e-3, 0),
            Err(Error::Applicability(_))
        ));
    }

    #[test]
    fn head_separates_planted_clusters() {
        let mut rng = Rng::new(7, 0);
        let s = generate_feature_space(&synth(10.0, 400), &mut rng).unwrap();
        let head = ridge_head(&s.featureset, 2, 1.0).unwrap();
        let hits = s
            .featureset
            .iter()
            .filter(|(z, y)| {
                let out: Vec<f64> = (0..2)
                    .map(|j| crate::numkit::dot(head.weights.row(j), z) + head.bias[j])
                    .collect();
                Label::Class(HeadLoss::predict_class(&out)) == **y
            })
            .count();
        assert!(hits as f64 / 400.0 > 0.95);
    }

    #[test]
    fn huge_ridge_shrinks_head() {
        let mut rng = Rng::new(8, 0);
        let s = generate_feature_space(&synth(4.0, 100), &mut rng).unwrap();
        let head = ridge_head(&s.featureset, 2, 1e12).unwrap();
        assert!(head.weights.max_abs() < 1e-9);
    }

    #[test]
    fn singular_unridged_fit_is_reported() {
        let rows = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
        let labels = vec![Label::Class(0), Label::Class(1), Label::Class(0)];
        let set = LabeledSet::from_rows(&rows, labels, Space::Feature).unwrap();
        assert!(matches!(ridge_head(&set, 2, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn split_at_head_recovers_decoder() {
        let mut rng = Rng::new(9, 0);
        let inst = planted_instance(&synth(2.0, 40), &small(), 4, &mut rng).unwrap();
        let s = split_at(&inst.problem.model, inst.problem.head_layer()).unwrap();
        for _ in 0..100 {
            let x = rng.normal_vec(40);
            assert_eq!(s.features(&x).unwrap(), inst.problem.decoder.predict(&x).unwrap());
        }
    }
}
