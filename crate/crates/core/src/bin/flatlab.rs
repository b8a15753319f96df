use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flatlab::datasets::{Label, LabeledSet};
use flatlab::expcli::grid::{read_table, reparam_stress, run_grid};
use flatlab::expcli::report::{emit_approx, emit_lcl, emit_stress, to_json, write_file};
use flatlab::expcli::{
    approx_representativeness_experiment, emit_report, locally_constant_labels_experiment, ExperimentConfig,
    ExperimentKind, ALL_FORMATS,
};
use flatlab::flatness::measure_model;
use flatlab::hessian::HeadHessianMode;
use flatlab::net::{load_checkpoint, split_at, Mlp};
use flatlab::representativeness::gen_bound_approx;
use flatlab::robustness::{uniform_bound_check, verify_theorem5};
use flatlab::{Error, Result};

#[derive(Parser)]
#[command(name = "flatlab", version, about = "Relative flatness and generalization experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in config of the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the configured dataset as train.csv and test.csv.
    Synth,
    /// Train the grid and save checkpoints.
    Train,
    /// Measure a checkpoint on the configured dataset.
    Measure {
        #[arg(long)]
        model: PathBuf,
        run_id: Option<String>,
    },
    /// Feature robustness fit and uniform bound check for a checkpoint.
    Robust {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.02, 0.04])]
        deltas: Vec<f64>,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 1000)]
        adversarial: usize,
    },
    /// Approximate bound for a checkpoint, or the planted sweep without one.
    Rep {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the experiment named by the config kind.
    Grid,
    /// Train (or resume) the grid, then rescale every model and re-measure.
    Stress,
    /// Rebuild the report from `runs.jsonl` in a finished output directory.
    Report {
        #[arg(long)]
        in_dir: Option<PathBuf>,
    },
}

fn config(common: &Common, default_kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(default_kind),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_csv(data: &LabeledSet) -> Result<String> {
    let mut s = String::from("label");
    for j in 0..data.dim() {
        s.push_str(&format!(",x{j}"));
    }
    s.push('\n');
    for (x, y) in data.iter() {
        let Label::Class(c) = y else {
            return Err(Error::Mode("only class labels can be written as CSV".into()));
        };
        s.push_str(&c.to_string());
        for v in x {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    Ok(s)
}

fn load_model(path: &Path) -> Result<Mlp> {
    Ok(load_checkpoint(path)?.0)
}

fn say(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Synth => {
            let cfg = config(c, ExperimentKind::MeasureCorrelation)?;
            let (train, test) = cfg.dataset.load(cfg.seed)?;
            let tp = cfg.out_dir.join("train.csv");
            let vp = cfg.out_dir.join("test.csv");
            write_file(&tp, &dataset_csv(&train)?)?;
            write_file(&vp, &dataset_csv(&test)?)?;
            say(&[tp, vp]);
        }
        Cmd::Train => {
            let cfg = config(c, ExperimentKind::MeasureCorrelation)?;
            let g = run_grid(&cfg, Some(&cfg.out_dir), false)?;
            let mut s = String::from("run_id,converged,epochs,final_train_loss,error\n");
            for r in &g.table.rows {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.run_id,
                    r.converged,
                    r.epochs,
                    r.final_train_loss.map(|x| format!("{x:e}")).unwrap_or_default(),
                    r.error.as_deref().unwrap_or("").replace(',', ";")
                ));
            }
            let p = cfg.out_dir.join("train.csv");
            write_file(&p, &s)?;
            say(&[p]);
        }
        Cmd::Measure { model, run_id } => {
            let cfg = config(c, ExperimentKind::MeasureCorrelation)?;
            let (train, test) = cfg.dataset.load(cfg.seed)?;
            let m = load_model(&model)?;
            let id = run_id.unwrap_or_else(|| {
                model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
            let rep = measure_model(&id, &m, &train, Some(&test), &cfg.measures, cfg.seed, cfg.workers)?;
            let mut csv = flatlab::flatness::MEASURE_COLUMNS.join(",");
            csv.push('\n');
            csv.push_str(&rep.csv_record().join(","));
            csv.push('\n');
            let p = cfg.out_dir.join("measure.csv");
            let j = cfg.out_dir.join("measure.json");
            write_file(&p, &csv)?;
            write_file(&j, &to_json(&rep)?)?;
            say(&[p, j]);
        }
        Cmd::Robust {
            model,
            deltas,
            samples,
            adversarial,
        } => {
            let cfg = config(c, ExperimentKind::MeasureCorrelation)?;
            let (train, _) = cfg.dataset.load(cfg.seed)?;
            let m = load_model(&model)?;
            let split = split_at(&m, cfg.measures.layer.unwrap_or(m.depth()))?;
            let mode = cfg.measures.mode.unwrap_or_else(|| HeadHessianMode::best_for(&split));
            let t5 = verify_theorem5(&split, &train, &deltas, samples, true, mode, cfg.seed, cfg.workers)?;
            let ub = uniform_bound_check(&split, &train, deltas[deltas.len() / 2], adversarial, mode, cfg.seed, cfg.workers)?;
            let out = serde_json::json!({ "theorem5": t5, "uniform_bound": ub });
            let p = cfg.out_dir.join("robust.json");
            write_file(&p, &to_json(&out)?)?;
            say(&[p]);
        }
        Cmd::Rep { model: Some(model) } => {
            let cfg = config(c, ExperimentKind::MeasureCorrelation)?;
            let (train, test) = cfg.dataset.load(cfg.seed)?;
            let m = load_model(&model)?;
            let split = split_at(&m, cfg.measures.layer.unwrap_or(m.depth()))?;
            let id = model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let rep = gen_bound_approx(&id, &split, &train, Some(&test), &cfg.bound, cfg.seed, cfg.workers)?;
            let mut csv = flatlab::representativeness::BOUND_COLUMNS.join(",");
            csv.push('\n');
            csv.push_str(&rep.csv_record().join(","));
            csv.push('\n');
            let p = cfg.out_dir.join("bound.csv");
            write_file(&p, &csv)?;
            say(&[p]);
        }
        Cmd::Rep { model: None } => {
            let cfg = config(c, ExperimentKind::ApproxRepresentativeness)?;
            say(&emit_approx(&approx_representativeness_experiment(&cfg)?, &cfg.out_dir)?);
        }
        Cmd::Grid => {
            let cfg = config(c, ExperimentKind::MeasureCorrelation)?;
            let dir = cfg.out_dir.clone();
            let written = match cfg.kind {
                ExperimentKind::MeasureCorrelation => {
                    let g = run_grid(&cfg, Some(&dir), true)?;
                    emit_report(&g.table, &dir, &ALL_FORMATS)?
                }
                ExperimentKind::LocallyConstantLabels => emit_lcl(&locally_constant_labels_experiment(&cfg)?, &dir)?,
                ExperimentKind::ApproxRepresentativeness => {
                    emit_approx(&approx_representativeness_experiment(&cfg)?, &dir)?
                }
                ExperimentKind::ReparamStress => stress(&cfg)?,
            };
            say(&written);
        }
        Cmd::Stress => {
            let cfg = config(c, ExperimentKind::ReparamStress)?;
            say(&stress(&cfg)?);
        }
        Cmd::Report { in_dir } => {
            let cfg = config(c, ExperimentKind::MeasureCorrelation)?;
            let dir = in_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let table = read_table(&dir.join("runs.jsonl"))?;
            say(&emit_report(&table, &cfg.out_dir, &ALL_FORMATS)?);
        }
    }
    Ok(())
}

fn stress(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let g = run_grid(cfg, Some(&cfg.out_dir), true)?;
    let mut written = emit_report(&g.table, &cfg.out_dir, &ALL_FORMATS)?;
    let s = reparam_stress(cfg, &g, &cfg.stress)?;
    written.extend(emit_stress(&s, &cfg.out_dir)?);
    Ok(written)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
