use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledSet;
use crate::error::{Error, Result};
use crate::flatness::{measure_model, MeasureConfig, MeasureReport, MEASURE_COLUMNS};
use crate::net::{load_checkpoint, save_checkpoint, train, CheckpointMeta, Mlp, Optimizer, TrainConfig};
use crate::numkit::Rng;
use crate::parallel::try_map_indexed;
use crate::reparam::{assert_function_equal, ReparamSpec};

use super::config::{ExperimentConfig, StressSpec};
use super::stats::{correlations, Correlation};

/// One point of the training grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl RunSpec {
    pub fn run_id(&self, index: usize) -> String {
        format!(
            "r{index:03}-{}-lr{}-bs{}-s{}",
            self.optimizer.name(),
            self.learning_rate,
            self.batch_size,
            self.seed
        )
    }
}

/// Grid points in a fixed order: optimizer, learning rate, batch size, seed.
pub fn grid_points(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let g = &cfg.grid;
    let mut out = Vec::with_capacity(g.len());
    for opt in &g.optimizers {
        for &lr in &g.learning_rates {
            for &bs in &g.batch_sizes {
                for &seed in &g.seeds {
                    out.push(RunSpec {
                        optimizer: *opt,
                        learning_rate: lr,
                        batch_size: bs,
                        seed,
                    });
                }
            }
        }
    }
    out
}

/// 64-bit FNV-1a, hex encoded.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn config_hash(cfg: &ExperimentConfig, spec: &RunSpec) -> String {
    let key = serde_json::json!({
        "dataset": cfg.dataset,
        "model": cfg.model,
        "measures": cfg.measures,
        "max_epochs": cfg.grid.max_epochs,
        "convergence_loss": cfg.grid.convergence_loss,
        "stop_at_convergence": cfg.grid.stop_at_convergence,
        "spec": spec,
        "seed": cfg.seed,
    });
    fnv1a_hex(key.to_string().as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub spec: RunSpec,
    pub converged: bool,
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    /// Missing when training or measuring failed.
    pub report: Option<MeasureReport>,
    pub error: Option<String>,
    /// Seconds.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<RunRecord>,
}

/// Measure columns correlated against the generalization gap.
pub const CORRELATED_MEASURES: [&str; 6] = ["kappa_tr", "kappa_max", "trace", "weight_norm", "fisher_rao", "pacbayes"];

impl ResultsTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Header plus one line per row: the measure columns, then `converged`.
    pub fn to_csv(&self) -> String {
        let mut out = MEASURE_COLUMNS.join(",");
        out.push_str(",converged\n");
        for r in &self.rows {
            let cells = match &r.report {
                Some(rep) => rep.csv_record(),
                None => {
                    let mut v = vec![String::new(); MEASURE_COLUMNS.len()];
                    v[0] = r.run_id.clone();
                    v
                }
            };
            out.push_str(&cells.join(","));
            out.push_str(if r.converged { ",true\n" } else { ",false\n" });
        }
        out
    }

    /// Reports of converged runs.
    pub fn converged_reports(&self) -> Vec<&MeasureReport> {
        self.rows
            .iter()
            .filter(|r| r.converged)
            .filter_map(|r| r.report.as_ref())
            .collect()
    }

    /// Correlation of each measure with `gen_gap` over converged runs.
    pub fn correlations(&self, measures: &[&str]) -> Result<Vec<Correlation>> {
        let reps = self.converged_reports();
        let target: Vec<Option<f64>> = reps.iter().map(|r| r.gen_gap).collect();
        let columns: Vec<(String, Vec<Option<f64>>)> = measures
            .iter()
            .map(|m| (m.to_string(), reps.iter().map(|r| r.column(m)).collect()))
            .collect();
        correlations(&columns, &target)
    }
}

/// Rows of a `runs.jsonl` file; an unparsable line (a run interrupted while
/// writing) ends the read.
fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in text.lines() {
        match serde_json::from_str::<RunRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
    }
    Ok(out)
}

fn latest_runs(path: &Path) -> Result<BTreeMap<String, RunRecord>> {
    Ok(read_runs(path)?.into_iter().map(|r| (r.run_id.clone(), r)).collect())
}

/// The table recorded in a `runs.jsonl` file, ordered by run id; a run
/// logged more than once keeps its last record.
pub fn read_table(path: &Path) -> Result<ResultsTable> {
    if !path.exists() {
        return Err(Error::Config(format!("{} does not exist", path.display())));
    }
    Ok(ResultsTable {
        rows: latest_runs(path)?.into_values().collect(),
    })
}

/// A finished grid: the table and the trained models in row order.
#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub table: ResultsTable,
    pub models: Vec<Option<Mlp>>,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

pub fn measure_seed(master: u64, index: usize) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Train every grid point, measure it when `measure` is set, and return the
/// results in grid order. With `out_dir`, each finished run is appended to
/// `runs.jsonl` and its model saved under `checkpoints/`; runs already
/// present there with a matching config hash are not repeated.
pub fn run_grid(cfg: &ExperimentConfig, out_dir: Option<&Path>, measure: bool) -> Result<GridOutcome> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.dataset.load(cfg.seed)?;
    let points = grid_points(cfg);
    let out_dim = super::config::ArchSpec::output_dim(&train_set)?;
    let ckpt_dir = out_dir.map(|d| d.join("checkpoints"));
    let log_path = out_dir.map(|d| d.join(if measure { "runs.jsonl" } else { "train_runs.jsonl" }));
    if let Some(dir) = &ckpt_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut done: BTreeMap<String, RunRecord> = BTreeMap::new();
    if let Some(p) = &log_path {
        done = latest_runs(p)?;
        if p.exists() {
            let mut text = String::new();
            for r in done.values() {
                text.push_str(&serde_json::to_string(r).map_err(|e| Error::Numeric(e.to_string()))?);
                text.push('\n');
            }
            fs::write(p, text).map_err(|e| Error::io(p, e))?;
        }
    }
    let log = Mutex::new(());
    let measures: MeasureConfig = cfg.measures.clone();
    let results = try_map_indexed(points.len(), cfg.workers, |i| {
        let spec = &points[i];
        let run_id = spec.run_id(i);
        let hash = config_hash(cfg, spec);
        let ckpt = ckpt_dir.as_ref().map(|d| d.join(format!("{run_id}.json")));
        if let Some(prev) = done.get(&run_id) {
            if prev.config_hash == hash {
                let model = match &ckpt {
                    Some(p) if p.exists() => Some(load_checkpoint(p)?.0),
                    _ => None,
                };
                if model.is_some() || prev.report.is_none() {
                    return Ok((prev.clone(), model));
                }
            }
        }
        let started = Instant::now();
        let mut init = Rng::new(cfg.seed, 0x696e_6974).substream(spec.seed);
        let model = cfg.model.build(train_set.dim(), out_dim, &mut init)?;
        let tcfg = TrainConfig {
            optimizer: spec.optimizer,
            learning_rate: spec.learning_rate,
            batch_size: spec.batch_size,
            max_epochs: cfg.grid.max_epochs,
            convergence_loss: cfg.grid.convergence_loss,
            stop_at_convergence: cfg.grid.stop_at_convergence,
            seed: measure_seed(cfg.seed, 1_000_000 + spec.seed as usize),
        };
        let mut record = RunRecord {
            run_id: run_id.clone(),
            config_hash: hash,
            spec: spec.clone(),
            converged: false,
            epochs: 0,
            final_train_loss: None,
            report: None,
            error: None,
            wall_time: 0.0,
        };
        let trained = match train(&model, &train_set, &tcfg) {
            Ok(outcome) => {
                record.converged = outcome.converged;
                record.epochs = outcome.epochs();
                record.final_train_loss = outcome.final_loss();
                Some(outcome.model)
            }
            Err(e @ Error::Divergence { .. }) => {
                record.error = Some(e.to_string());
                None
            }
            Err(e) => return Err(e),
        };
        if let Some(m) = &trained {
            if measure {
                match measure_model(&run_id, m, &train_set, Some(&test_set), &measures, measure_seed(cfg.seed, i), 1) {
                    Ok(rep) => record.report = Some(rep),
                    Err(e) if !e.is_validation() => record.error = Some(e.to_string()),
                    Err(e) => return Err(e),
                }
            }
            if let Some(p) = &ckpt {
                let meta = CheckpointMeta {
                    seed: Some(spec.seed),
                    optimizer: Some(spec.optimizer.name().to_string()),
                    learning_rate: Some(spec.learning_rate),
                    batch_size: Some(spec.batch_size),
                    epochs: Some(record.epochs),
                    final_loss: record.final_train_loss,
                };
                save_checkpoint(m, &meta, p)?;
            }
        }
        record.wall_time = started.elapsed().as_secs_f64();
        if let Some(p) = &log_path {
            let _guard = log.lock().expect("log lock");
            let mut f = OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
            let line = serde_json::to_string(&record).map_err(|e| Error::Numeric(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        Ok((record, trained))
    })?;
    let (rows, models) = results.into_iter().unzip();
    Ok(GridOutcome {
        table: ResultsTable { rows },
        models,
        train: train_set,
        test: test_set,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressOutcome {
    pub before: ResultsTable,
    pub after: ResultsTable,
    /// Reparameterizations applied to each row, in order.
    pub reparams: Vec<Vec<ReparamSpec>>,
    pub max_gap_change: f64,
    pub correlations_before: Vec<Correlation>,
    pub correlations_after: Vec<Correlation>,
}

/// Random adjacent layer-wise rescalings with factors uniform in the
/// configured interval.
pub fn random_layerwise(model: &Mlp, spec: &StressSpec, rng: &mut Rng) -> Vec<ReparamSpec> {
    let depth = model.depth();
    if depth < 2 {
        return vec![];
    }
    (0..spec.n_reparams)
        .map(|_| {
            let l = 1 + rng.below(depth - 1);
            ReparamSpec::Layerwise {
                l,
                k: l + 1,
                alpha: rng.uniform_in(spec.factor_lo, spec.factor_hi),
            }
        })
        .collect()
}

/// Rescale every trained model of `grid`, re-measure it with the same
/// measure seed, and compare correlations before and after.
pub fn reparam_stress(cfg: &ExperimentConfig, grid: &GridOutcome, spec: &StressSpec) -> Result<StressOutcome> {
    let root = Rng::new(cfg.seed, 0x7374_7273);
    let rows = try_map_indexed(grid.table.rows.len(), cfg.workers, |i| {
        let before = &grid.table.rows[i];
        let mut after = before.clone();
        let Some(model) = &grid.models[i] else {
            return Ok((after, vec![]));
        };
        let mut rng = root.substream(i as u64);
        let specs = random_layerwise(model, spec, &mut rng);
        let mut moved = model.clone();
        for s in &specs {
            moved = s.apply(&moved)?;
        }
        assert_function_equal(model, &moved, 100, &mut rng, 1e-8 * (1.0 + spec.factor_hi))?;
        after.report = None;
        after.error = None;
        match measure_model(&before.run_id, &moved, &grid.train, Some(&grid.test), &cfg.measures, measure_seed(cfg.seed, i), 1) {
            Ok(rep) => after.report = Some(rep),
            Err(e) if !e.is_validation() => after.error = Some(e.to_string()),
            Err(e) => return Err(e),
        }
        Ok((after, specs))
    })?;
    let (after_rows, reparams): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let after = ResultsTable { rows: after_rows };
    let mut max_gap_change = 0.0f64;
    for (b, a) in grid.table.rows.iter().zip(&after.rows) {
        if let (Some(x), Some(y)) = (
            b.report.as_ref().and_then(|r| r.gen_gap),
            a.report.as_ref().and_then(|r| r.gen_gap),
        ) {
            max_gap_change = max_gap_change.max((x - y).abs());
        }
    }
    Ok(StressOutcome {
        correlations_before: lenient(grid.table.correlations(&CORRELATED_MEASURES))?,
        correlations_after: lenient(after.correlations(&CORRELATED_MEASURES))?,
        before: grid.table.clone(),
        after,
        reparams,
        max_gap_change,
    })
}

/// Too few converged rows gives no correlations rather than an error.
pub fn lenient(c: Result<Vec<Correlation>>) -> Result<Vec<Correlation>> {
    match c {
        Err(Error::InsufficientData(_)) => Ok(vec![]),
        other => other,
    }
}

/// `out_dir/checkpoints/<run_id>.json`
pub fn checkpoint_path(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join("checkpoints").join(format!("{run_id}.json"))
}
