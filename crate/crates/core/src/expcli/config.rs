use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{load_csv, load_idx, generate_feature_space, Label, LabeledSet, PlantedConfig, Space, SynthConfig};
use crate::error::{Error, Result};
use crate::flatness::MeasureConfig;
use crate::net::{Activation, HeadLoss, Mlp, Optimizer};
use crate::numkit::Rng;
use crate::representativeness::BoundConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    MeasureCorrelation,
    LocallyConstantLabels,
    ApproxRepresentativeness,
    ReparamStress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Planted clusters used directly as network inputs.
    Synth {
        #[serde(default)]
        config: SynthConfig,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        label_column: usize,
        #[serde(default)]
        has_header: bool,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first rows of each set.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_n_test() -> usize {
    1000
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synth {
            config: SynthConfig {
                n_samples: 200,
                class_separation: 4.0,
                ..Default::default()
            },
            n_test: default_n_test(),
        }
    }
}

impl DatasetSpec {
    fn files(&self) -> Vec<&Path> {
        match self {
            DatasetSpec::Synth { .. } => vec![],
            DatasetSpec::Csv { train, test, .. } => vec![train, test],
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => vec![train_images, train_labels, test_images, test_labels],
        }
    }

    /// Training and test sets; synthetic data is drawn from the synth
    /// config's seed on stream `seed`.
    pub fn load(&self, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
        match self {
            DatasetSpec::Synth { config, n_test } => {
                let mut rng = Rng::new(config.seed, seed);
                let sample = generate_feature_space(config, &mut rng)?;
                let test = sample.distribution.draw(*n_test, &mut rng)?;
                let train = sample.featureset.with_inputs(sample.featureset.inputs().clone(), Space::Input)?;
                let test = test.with_inputs(test.inputs().clone(), Space::Input)?;
                Ok((train, test))
            }
            DatasetSpec::Csv {
                train,
                test,
                label_column,
                has_header,
            } => Ok((load_csv(train, *label_column, *has_header)?, load_csv(test, *label_column, *has_header)?)),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
            } => {
                let cut = |s: LabeledSet| -> Result<LabeledSet> {
                    match limit {
                        Some(n) if *n < s.len() => s.subset(&(0..*n).collect::<Vec<_>>()),
                        _ => Ok(s),
                    }
                };
                Ok((
                    cut(load_idx(train_images, train_labels)?)?,
                    cut(load_idx(test_images, test_labels)?)?,
                ))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head: HeadLoss,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            hidden: vec![16, 8],
            activation: Activation::Relu,
            head: HeadLoss::SoftmaxCrossEntropy,
        }
    }
}

impl ArchSpec {
    /// Output width for `data`: number of classes for class labels, target
    /// length otherwise.
    pub fn output_dim(data: &LabeledSet) -> Result<usize> {
        match data.label(0) {
            Label::Class(_) => Ok(data
                .labels()
                .iter()
                .filter_map(Label::class)
                .max()
                .map_or(0, |c| c + 1)
                .max(2)),
            Label::Target(t) => Ok(t.len()),
        }
    }

    pub fn build(&self, input_dim: usize, output_dim: usize, rng: &mut Rng) -> Result<Mlp> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(output_dim);
        let mut acts = vec![self.activation; self.hidden.len()];
        acts.push(Activation::Identity);
        Mlp::glorot(&dims, &acts, self.head, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub optimizers: Vec<Optimizer>,
    pub seeds: Vec<u64>,
    pub max_epochs: usize,
    pub convergence_loss: f64,
    pub stop_at_convergence: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            batch_sizes: vec![16, 64, 128],
            learning_rates: vec![0.02, 0.05],
            optimizers: vec![Optimizer::sgd()],
            seeds: vec![0, 1, 2],
            max_epochs: 1500,
            convergence_loss: 0.1,
            stop_at_convergence: true,
        }
    }
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.batch_sizes.len() * self.learning_rates.len() * self.optimizers.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Separation sweeps over planted problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub separations: Vec<f64>,
    pub datasets_per_separation: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub planted: PlantedConfig,
    pub synth: SynthConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            separations: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            datasets_per_separation: 30,
            n_train: 500,
            n_test: 4500,
            planted: PlantedConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StressSpec {
    pub factor_lo: f64,
    pub factor_hi: f64,
    pub n_reparams: usize,
}

impl Default for StressSpec {
    fn default() -> Self {
        Self {
            factor_lo: 5.0,
            factor_hi: 25.0,
            n_reparams: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ArchSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub measures: MeasureConfig,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub stress: StressSpec,
    #[serde(default)]
    pub bound: BoundConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("flatlab-out")
}

fn default_workers() -> usize {
    1
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // A different dataset source replaces the whole spec.
                    Some(slot) if k != "dataset" || slot.get("source") == v.get("source") => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        let mut cfg: ExperimentConfig =
            serde_json::from_value(serde_json::json!({ "kind": kind })).expect("defaults deserialize");
        if kind == ExperimentKind::ApproxRepresentativeness {
            cfg.sweep.separations = vec![1.0, 2.0, 4.0, 8.0];
            cfg.sweep.datasets_per_separation = 15;
            cfg.sweep.n_train = 600;
        }
        if kind == ExperimentKind::ReparamStress {
            cfg.grid.seeds = (0..10).collect();
        }
        cfg
    }

    /// Fields absent from `text` take the defaults of its `kind`.
    pub fn from_json(text: &str) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        };
        let user: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
        let kind: ExperimentKind = match user.get("kind") {
            Some(k) => serde_json::from_value(k.clone()).map_err(parse_err)?,
            None => return serde_json::from_value(user).map_err(parse_err),
        };
        let mut merged = serde_json::to_value(Self::new(kind)).map_err(parse_err)?;
        merge(&mut merged, user);
        serde_json::from_value(merged).map_err(parse_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        for f in self.dataset.files() {
            if !f.exists() {
                return Err(Error::Config(format!("dataset file {} does not exist", f.display())));
            }
        }
        if let DatasetSpec::Synth { config, n_test } = &self.dataset {
            config.validate()?;
            if *n_test == 0 {
                return Err(Error::Config("n_test must be positive".into()));
            }
        }
        match self.kind {
            ExperimentKind::MeasureCorrelation | ExperimentKind::ReparamStress => {
                if self.grid.is_empty() {
                    return Err(Error::Config("training grid is empty".into()));
                }
                if self.grid.batch_sizes.contains(&0) {
                    return Err(Error::Config("batch sizes must be positive".into()));
                }
                if self.grid.learning_rates.iter().any(|l| !(*l > 0.0)) {
                    return Err(Error::Config("learning rates must be positive".into()));
                }
            }
            ExperimentKind::LocallyConstantLabels | ExperimentKind::ApproxRepresentativeness => {
                if self.sweep.separations.is_empty() || self.sweep.datasets_per_separation == 0 {
                    return Err(Error::Config("separation sweep is empty".into()));
                }
                if self.sweep.separations.iter().any(|c| !(*c >= 0.0)) {
                    return Err(Error::Config("separations must be nonnegative".into()));
                }
                if self.sweep.n_train < 2 || self.sweep.n_test == 0 {
                    return Err(Error::Config("sweep sample sizes too small".into()));
                }
            }
        }
        if self.kind == ExperimentKind::ReparamStress {
            let s = &self.stress;
            if !(s.factor_lo > 0.0) || s.factor_hi < s.factor_lo {
                return Err(Error::Config(format!("factor interval [{}, {}]", s.factor_lo, s.factor_hi)));
            }
            if !self.model.activation.is_positively_homogeneous() {
                return Err(Error::Config("reparameterization stress needs ReLU hidden layers".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json(r#"{"kind":"measure_correlation","seed":3}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.grid.len(), 18);
        c.validate().unwrap();
        let a = ExperimentConfig::new(ExperimentKind::ApproxRepresentativeness);
        assert_eq!(a.sweep.n_train, 600);
    }

    #[test]
    fn file_fields_merge_over_kind_defaults() {
        let a = ExperimentConfig::from_json(r#"{"kind":"approx_representativeness","sweep":{"n_test":100}}"#).unwrap();
        assert_eq!((a.sweep.n_train, a.sweep.n_test, a.sweep.separations.len()), (600, 100, 4));
        let s = ExperimentConfig::from_json(r#"{"kind":"reparam_stress","grid":{"batch_sizes":[8]}}"#).unwrap();
        assert_eq!((s.grid.seeds.len(), s.grid.len()), (10, 20));
        let d = ExperimentConfig::from_json(
            r#"{"kind":"measure_correlation","dataset":{"source":"synth","config":{"n_samples":50}}}"#,
        )
        .unwrap();
        match d.dataset {
            DatasetSpec::Synth { config, n_test } => {
                assert_eq!((config.n_samples, config.class_separation, n_test), (50, 4.0, 1000))
            }
            _ => panic!("synth expected"),
        }
    }

    #[test]
    fn validation_errors() {
        let mut c = ExperimentConfig::new(ExperimentKind::MeasureCorrelation);
        c.grid.seeds.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::new(ExperimentKind::MeasureCorrelation);
        c.dataset = DatasetSpec::Csv {
            train: "/nonexistent/a.csv".into(),
            test: "/nonexistent/b.csv".into(),
            label_column: 0,
            has_header: false,
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json("{\"kind\":"), Err(Error::Parse { .. })));
    }

    #[test]
    fn synth_dataset_loads_as_inputs() {
        let c = ExperimentConfig::new(ExperimentKind::MeasureCorrelation);
        let (train, test) = c.dataset.load(1).unwrap();
        assert_eq!(train.space(), Space::Input);
        assert_eq!((train.len(), test.len(), train.dim()), (200, 1000, 8));
        assert_eq!(ArchSpec::output_dim(&train).unwrap(), 2);
    }
}
