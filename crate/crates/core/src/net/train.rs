use serde::{Deserialize, Serialize};

use crate::datasets::LabeledSet;
use crate::error::{Error, Result};
use crate::numkit::Rng;

use super::mlp::{flatten_grads, Mlp};

/// Stream id reserved for minibatch shuffling.
const SHUFFLE_STREAM: u64 = 0x7261_696e;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Rmsprop {
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_rho() -> f64 {
    0.9
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn rmsprop() -> Self {
        Optimizer::Rmsprop {
            rho: default_rho(),
            eps: default_eps(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd { .. } => "sgd",
            Optimizer::Adam { .. } => "adam",
            Optimizer::Rmsprop { .. } => "rmsprop",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "default_convergence")]
    pub convergence_loss: f64,
    /// Stop after the first epoch whose mean loss is below
    /// `convergence_loss`.
    #[serde(default = "default_true")]
    pub stop_at_convergence: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_convergence() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::sgd(),
            learning_rate: 0.01,
            batch_size: 32,
            max_epochs: 100,
            convergence_loss: default_convergence(),
            stop_at_convergence: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Mlp,
    /// Mean training loss of every completed epoch.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl TrainOutcome {
    pub fn epochs(&self) -> usize {
        self.history.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().copied()
    }
}

struct State {
    first: Vec<f64>,
    second: Vec<f64>,
    step: i32,
}

impl State {
    fn new(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, opt: &Optimizer, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        match *opt {
            Optimizer::Sgd { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(self.first.iter_mut()) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
            Optimizer::Rmsprop { rho, eps } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(self.second.iter_mut()) {
                    *v = rho * *v + (1.0 - rho) * g * g;
                    *p -= lr * g / (v.sqrt() + eps);
                }
            }
        }
    }
}

/// Minibatch training. Each epoch visits the samples in an order drawn from a
/// dedicated substream of `cfg.seed`, so runs are reproducible.
pub fn train(model: &Mlp, data: &LabeledSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("empty training set".into()));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "inputs of dimension {} for a network taking {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let root = Rng::new(cfg.seed, SHUFFLE_STREAM);
    let mut current = model.clone();
    let mut params = current.parameters();
    let mut state = State::new(params.len());
    let mut history = Vec::new();
    let mut converged = false;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        root.substream(epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = current.loss_and_grad(data, batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * batch.len() as f64;
            state.update(&cfg.optimizer, cfg.learning_rate, &mut params, &flatten_grads(&grads));
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    loss: f64::NAN,
                });
            }
            current = current.with_parameters(&params)?;
        }
        let mean = total / data.len() as f64;
        history.push(mean);
        if mean < cfg.convergence_loss {
            converged = true;
            if cfg.stop_at_convergence {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: current,
        history,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Label, Space};
    use crate::net::{Activation, HeadLoss};

    fn linear_data(rng: &mut Rng) -> LabeledSet {
        let rows: Vec<Vec<f64>> = (0..64).map(|_| rng.normal_vec(3)).collect();
        let labels = rows
            .iter()
            .map(|x| Label::Target(vec![0.5 * x[0] - 2.0 * x[1] + x[2] + 0.3]))
            .collect();
        LabeledSet::from_rows(&rows, labels, Space::Input).unwrap()
    }

    #[test]
    fn sgd_fits_linear_target() {
        let mut rng = Rng::new(3, 0);
        let data = linear_data(&mut rng);
        let m = Mlp::glorot(&[3, 1], &[Activation::Identity], HeadLoss::Mse, &mut rng).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 8,
            max_epochs: 300,
            stop_at_convergence: false,
            ..Default::default()
        };
        let out = train(&m, &data, &cfg).unwrap();
        assert!(out.converged);
        assert!(out.model.empirical_loss(&data).unwrap() < 1e-6);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut rng = Rng::new(4, 0);
        let data = linear_data(&mut rng);
        let m = Mlp::glorot(&[3, 1], &[Activation::Identity], HeadLoss::Mse, &mut rng).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        let out = train(&m, &data, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(!out.converged);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = Rng::new(5, 0);
        let data = linear_data(&mut rng);
        let m = Mlp::glorot(
            &[3, 4, 1],
            &[Activation::Tanh, Activation::Identity],
            HeadLoss::Mse,
            &mut rng,
        )
        .unwrap();
        for opt in [Optimizer::sgd(), Optimizer::adam(), Optimizer::rmsprop()] {
            let cfg = TrainConfig {
                optimizer: opt,
                learning_rate: 0.01,
                batch_size: 5,
                max_epochs: 5,
                seed: 9,
                ..Default::default()
            };
            let a = train(&m, &data, &cfg).unwrap();
            let b = train(&m, &data, &cfg).unwrap();
            assert_eq!(a.model, b.model);
            assert_eq!(a.history, b.history);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = Rng::new(6, 0);
        let data = linear_data(&mut rng);
        let m = Mlp::glorot(&[3, 1], &[Activation::Identity], HeadLoss::Mse, &mut rng).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e3,
            batch_size: 64,
            max_epochs: 500,
            ..Default::default()
        };
        assert!(matches!(train(&m, &data, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn rejects_bad_config() {
        let mut rng = Rng::new(7, 0);
        let data = linear_data(&mut rng);
        let m = Mlp::glorot(&[3, 1], &[Activation::Identity], HeadLoss::Mse, &mut rng).unwrap();
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(train(&m, &data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_defaults() {
        let cfg: TrainConfig = serde_json::from_str(
            r#"{"optimizer":{"kind":"adam"},"learning_rate":0.02,"batch_size":64,"max_epochs":10}"#,
        )
        .unwrap();
        assert_eq!(cfg.optimizer, Optimizer::adam());
        assert_eq!(cfg.convergence_loss, 0.1);
    }
}
