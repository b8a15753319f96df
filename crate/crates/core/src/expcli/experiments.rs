use serde::{Deserialize, Serialize};

use crate::datasets::{planted_instance, PlantedInstance, SynthConfig};
use crate::error::Result;
use crate::flatness::kappa_tr_double_sum;
use crate::hessian::{hessian_summary, HeadHessianMode};
use crate::net::split_at;
use crate::numkit::{RadialKernel, Rng};
use crate::parallel::try_map_indexed;
use crate::representativeness::{delta_rule, gen_bound_approx, BoundReport};
use crate::robustness::sample_feature_matrix;

use super::config::{ExperimentConfig, SweepSpec};
use super::stats::{correlate, increasing_trend_test, spearman, TrendTest};

const PLANTED_STREAM: u64 = 0x706c_616e;
const FLIP_STREAM: u64 = 0x666c_6970;
const FLIP_DRAWS: usize = 4;

/// Planted instance `r` at separation `c`. Instance `r` draws from the same
/// substream at every separation, so the sweep is paired.
pub fn sweep_instance(sweep: &SweepSpec, c: f64, r: usize, seed: u64) -> Result<PlantedInstance> {
    let synth = SynthConfig {
        class_separation: c,
        n_samples: sweep.n_train,
        ..sweep.synth.clone()
    };
    let mut rng = Rng::new(seed, PLANTED_STREAM).substream(r as u64);
    planted_instance(&synth, &sweep.planted, sweep.n_test, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LclRun {
    pub separation: f64,
    pub index: usize,
    pub kappa_tr: f64,
    pub emp_loss: f64,
    pub test_loss: f64,
    pub gen_gap: f64,
    /// Fraction of perturbed training features whose oracle label differs
    /// from the training label.
    pub flip_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LclPoint {
    pub separation: f64,
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
    pub mean_flip_rate: f64,
    pub mean_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LclOutcome {
    pub delta: f64,
    pub runs: Vec<LclRun>,
    pub curve: Vec<LclPoint>,
    /// Exact rank test for an increasing Pearson curve; `None` when a point
    /// is undefined or the sweep is too short.
    pub trend: Option<TrendTest>,
}

fn lcl_run(sweep: &SweepSpec, c: f64, r: usize, seed: u64) -> Result<LclRun> {
    let inst = sweep_instance(sweep, c, r, seed)?;
    let model = &inst.problem.model;
    let split = split_at(model, inst.problem.head_layer())?;
    let mode = HeadHessianMode::best_for(&split);
    let summary = hessian_summary(&split, &inst.train, mode, false, 1)?;
    let kappa_tr = kappa_tr_double_sum(split.w(), &summary.trace_matrix)?;
    let emp_loss = model.empirical_loss(&inst.train)?;
    let test_loss = model.empirical_loss(&inst.test)?;

    let m = split.m();
    let delta = delta_rule(inst.train.len(), m);
    let kernel = RadialKernel::truncated_gaussian(m)?;
    let feats = split.features_batch(inst.train.inputs())?;
    let mut rng = Rng::new(seed, FLIP_STREAM).substream(r as u64);
    let mut flips = 0usize;
    for i in 0..feats.rows() {
        let phi = feats.row(i);
        let y = inst.train.label(i).class();
        for _ in 0..FLIP_DRAWS {
            let a = sample_feature_matrix(delta, &kernel, m, &mut rng)?;
            let step = a.matvec(phi)?;
            let moved: Vec<f64> = phi.iter().zip(&step).map(|(p, s)| p + s).collect();
            if Some(inst.problem.feature_label_oracle(&moved)?) != y {
                flips += 1;
            }
        }
    }
    Ok(LclRun {
        separation: c,
        index: r,
        kappa_tr,
        emp_loss,
        test_loss,
        gen_gap: test_loss - emp_loss,
        flip_rate: flips as f64 / (feats.rows() * FLIP_DRAWS) as f64,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    crate::parallel::tree_sum(&v) / v.len().max(1) as f64
}

/// For each separation in the sweep, build planted problems, measure κ_Tr,
/// the generalization gap and the label-flip rate in δ-neighborhoods, and
/// correlate κ_Tr with the gap.
pub fn locally_constant_labels_experiment(cfg: &ExperimentConfig) -> Result<LclOutcome> {
    cfg.validate()?;
    let sweep = &cfg.sweep;
    let per = sweep.datasets_per_separation;
    let total = sweep.separations.len() * per;
    let runs = try_map_indexed(total, cfg.workers, |k| {
        lcl_run(sweep, sweep.separations[k / per], k % per, cfg.seed)
    })?;
    let m = *sweep.planted.decoder_dims.last().unwrap_or(&1);
    let curve: Vec<LclPoint> = sweep
        .separations
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let rs = &runs[ci * per..(ci + 1) * per];
            let k: Vec<Option<f64>> = rs.iter().map(|r| Some(r.kappa_tr)).collect();
            let g: Vec<Option<f64>> = rs.iter().map(|r| Some(r.gen_gap)).collect();
            let corr = correlate("kappa_tr", &k, &g);
            LclPoint {
                separation: c,
                n: corr.n,
                pearson: corr.pearson,
                spearman: corr.spearman,
                kendall: corr.kendall,
                mean_flip_rate: mean(rs.iter().map(|r| r.flip_rate)),
                mean_gap: mean(rs.iter().map(|r| r.gen_gap)),
            }
        })
        .collect();
    let pearsons: Vec<f64> = curve.iter().map(|p| p.pearson).collect();
    let trend = if pearsons.iter().all(|p| p.is_finite()) {
        increasing_trend_test(&pearsons).ok()
    } else {
        None
    };
    Ok(LclOutcome {
        delta: delta_rule(sweep.n_train, m),
        runs,
        curve,
        trend,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxRun {
    pub separation: f64,
    pub index: usize,
    pub report: BoundReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxPoint {
    pub separation: f64,
    pub n: usize,
    pub coverage: f64,
    pub mean_bound: f64,
    pub mean_abs_rep: f64,
    pub mean_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxOutcome {
    pub runs: Vec<ApproxRun>,
    pub curve: Vec<ApproxPoint>,
    /// Fraction of runs whose bound is at least the generalization gap.
    pub coverage: f64,
    /// Spearman correlation of the bound with the separation over all runs.
    pub bound_vs_separation: f64,
}

/// Approximate generalization bound on planted problems across the sweep.
pub fn approx_representativeness_experiment(cfg: &ExperimentConfig) -> Result<ApproxOutcome> {
    cfg.validate()?;
    let sweep = &cfg.sweep;
    let per = sweep.datasets_per_separation;
    let total = sweep.separations.len() * per;
    let runs = try_map_indexed(total, cfg.workers, |k| {
        let (c, r) = (sweep.separations[k / per], k % per);
        let inst = sweep_instance(sweep, c, r, cfg.seed)?;
        let split = split_at(&inst.problem.model, inst.problem.head_layer())?;
        let run_id = format!("c{c}-r{r:03}");
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
        let report = gen_bound_approx(&run_id, &split, &inst.train, Some(&inst.test), &cfg.bound, seed, 1)?;
        Ok(ApproxRun {
            separation: c,
            index: r,
            report,
        })
    })?;
    let covered = |rs: &[ApproxRun]| {
        rs.iter().filter(|r| r.report.covers_gap() == Some(true)).count() as f64 / rs.len().max(1) as f64
    };
    let curve = sweep
        .separations
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let rs = &runs[ci * per..(ci + 1) * per];
            ApproxPoint {
                separation: c,
                n: rs.len(),
                coverage: covered(rs),
                mean_bound: mean(rs.iter().map(|r| r.report.bound)),
                mean_abs_rep: mean(rs.iter().map(|r| r.report.rep_approx.abs())),
                mean_gap: mean(rs.iter().filter_map(|r| r.report.gen_gap)),
            }
        })
        .collect();
    let cs: Vec<f64> = runs.iter().map(|r| r.separation).collect();
    let bs: Vec<f64> = runs.iter().map(|r| r.report.bound).collect();
    Ok(ApproxOutcome {
        coverage: covered(&runs),
        bound_vs_separation: spearman(&cs, &bs),
        runs,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::PlantedConfig;
    use crate::expcli::config::ExperimentKind;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(kind);
        cfg.sweep.separations = vec![0.0, 2.0, 8.0];
        cfg.sweep.datasets_per_separation = 4;
        cfg.sweep.n_train = 60;
        cfg.sweep.n_test = 120;
        cfg.sweep.planted = PlantedConfig {
            decoder_dims: vec![30, 16, 8],
            ..Default::default()
        };
        cfg.bound.n_mc = 4;
        cfg
    }

    #[test]
    fn lcl_curve_shape_and_determinism() {
        let cfg = small(ExperimentKind::LocallyConstantLabels);
        let a = locally_constant_labels_experiment(&cfg).unwrap();
        assert_eq!(a.runs.len(), 12);
        assert_eq!(a.curve.len(), 3);
        for r in &a.runs {
            assert!((0.0..=1.0).contains(&r.flip_rate));
            assert!((r.gen_gap - (r.test_loss - r.emp_loss)).abs() < 1e-15);
        }
        // Labels are far less locally constant without separation.
        assert!(a.curve[0].mean_flip_rate > a.curve[2].mean_flip_rate);
        let mut cfg2 = cfg.clone();
        cfg2.workers = 3;
        assert_eq!(locally_constant_labels_experiment(&cfg2).unwrap(), a);
    }

    #[test]
    fn approx_runs_carry_gaps() {
        let cfg = small(ExperimentKind::ApproxRepresentativeness);
        let o = approx_representativeness_experiment(&cfg).unwrap();
        assert_eq!(o.runs.len(), 12);
        assert!(o.runs.iter().all(|r| r.report.gen_gap.is_some()));
        assert!((0.0..=1.0).contains(&o.coverage));
    }
}
