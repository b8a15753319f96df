use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::experiments::{ApproxOutcome, LclOutcome};
use super::grid::{lenient, ResultsTable, StressOutcome, CORRELATED_MEASURES};
use super::stats::{pearson, Correlation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    SvgScatter,
}

pub const ALL_FORMATS: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::SvgScatter];

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else {
        String::new()
    }
}

pub fn correlations_csv(cs: &[Correlation]) -> String {
    let mut out = String::from("measure,pearson,spearman,kendall,n,excluded\n");
    for c in cs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.measure,
            num(c.pearson),
            num(c.spearman),
            num(c.kendall),
            c.n,
            c.excluded
        ));
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter plot of `ys` against `xs` with axes, extreme tick labels and the
/// Pearson coefficient in the title. Non-finite points are dropped.
pub fn scatter_svg(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], ys: &[f64]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| (*x, *y))
        .collect();
    let (px, py): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
    let r = pearson(&px, &py);
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(&px);
    let (y0, y1) = range(&py);
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let sy = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let rtext = if r.is_finite() { format!("{r:.3}") } else { "n/a".to_string() };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-size=\"14\" text-anchor=\"middle\">{} (pearson r = {rtext}, n = {})</text>\n",
        W / 2.0,
        esc(title),
        pts.len()
    ));
    s.push_str(&format!(
        "<line x1=\"{L}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - B,
        W - R
    ));
    s.push_str(&format!("<line x1=\"{L}\" y1=\"{T}\" x2=\"{L}\" y2=\"{}\" stroke=\"black\"/>\n", H - B));
    for (v, anchor, x) in [(x0, "start", L), (x1, "end", W - R)] {
        s.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"{anchor}\">{v:.4e}</text>\n",
            H - B + 14.0
        ));
    }
    for (v, y) in [(y0, H - B), (y1, T)] {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"10\" text-anchor=\"end\">{v:.4e}</text>\n",
            L - 4.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        (L + W - R) / 2.0,
        H - 12.0,
        esc(xlabel)
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{0:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0:.1})\">{1}</text>\n",
        (T + H - B) / 2.0,
        esc(ylabel)
    ));
    for (x, y) in &pts {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>\n",
            sx(*x),
            sy(*y)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Write `results.csv`, `results.json`, `correlations.csv` and one scatter
/// plot per measure under `figures/`, as selected by `formats`. Returns the
/// paths written.
pub fn emit_report(table: &ResultsTable, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    if table.is_empty() {
        return Err(Error::EmptyInput("results table".into()));
    }
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Csv) {
        let p = dir.join("results.csv");
        write_file(&p, &table.to_csv())?;
        written.push(p);
        let corr = lenient(table.correlations(&CORRELATED_MEASURES))?;
        let p = dir.join("correlations.csv");
        write_file(&p, &correlations_csv(&corr))?;
        written.push(p);
    }
    if formats.contains(&ReportFormat::Json) {
        let p = dir.join("results.json");
        write_file(&p, &to_json(table)?)?;
        written.push(p);
    }
    if formats.contains(&ReportFormat::SvgScatter) {
        let reps = table.converged_reports();
        let gaps: Vec<f64> = reps.iter().map(|r| r.gen_gap.unwrap_or(f64::NAN)).collect();
        for m in CORRELATED_MEASURES {
            let xs: Vec<f64> = reps.iter().map(|r| r.column(m).unwrap_or(f64::NAN)).collect();
            let p = dir.join("figures").join(format!("{m}.svg"));
            write_file(&p, &scatter_svg(m, m, "gen_gap", &xs, &gaps))?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn lcl_runs_csv(o: &LclOutcome) -> String {
    let mut s = String::from("separation,index,kappa_tr,emp_loss,test_loss,gen_gap,flip_rate\n");
    for r in &o.runs {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.separation,
            r.index,
            num(r.kappa_tr),
            num(r.emp_loss),
            num(r.test_loss),
            num(r.gen_gap),
            num(r.flip_rate)
        ));
    }
    s
}

pub fn lcl_curve_csv(o: &LclOutcome) -> String {
    let mut s = String::from("separation,n,pearson,spearman,kendall,mean_flip_rate,mean_gap\n");
    for p in &o.curve {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.separation,
            p.n,
            num(p.pearson),
            num(p.spearman),
            num(p.kendall),
            num(p.mean_flip_rate),
            num(p.mean_gap)
        ));
    }
    s
}

pub fn emit_lcl(o: &LclOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        (dir.join("lcl_runs.csv"), lcl_runs_csv(o)),
        (dir.join("lcl_curve.csv"), lcl_curve_csv(o)),
        (dir.join("lcl.json"), to_json(o)?),
        (
            dir.join("figures").join("lcl_correlation.svg"),
            scatter_svg(
                "correlation vs separation",
                "separation",
                "pearson(kappa_tr, gen_gap)",
                &o.curve.iter().map(|p| p.separation).collect::<Vec<_>>(),
                &o.curve.iter().map(|p| p.pearson).collect::<Vec<_>>(),
            ),
        ),
    ];
    write_all(files)
}

pub fn approx_runs_csv(o: &ApproxOutcome) -> String {
    let mut s = String::from("separation,run_id,delta,rep_approx,flatness_term,bound,gen_gap\n");
    for r in &o.runs {
        let rec = r.report.csv_record();
        s.push_str(&format!("{},{}\n", r.separation, rec.join(",")));
    }
    s
}

pub fn emit_approx(o: &ApproxOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut curve = String::from("separation,n,coverage,mean_bound,mean_abs_rep,mean_gap\n");
    for p in &o.curve {
        curve.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.separation,
            p.n,
            num(p.coverage),
            num(p.mean_bound),
            num(p.mean_abs_rep),
            num(p.mean_gap)
        ));
    }
    let gaps: Vec<f64> = o.runs.iter().map(|r| r.report.gen_gap.unwrap_or(f64::NAN)).collect();
    let bounds: Vec<f64> = o.runs.iter().map(|r| r.report.bound).collect();
    let files = [
        (dir.join("bound_runs.csv"), approx_runs_csv(o)),
        (dir.join("bound_curve.csv"), curve),
        (dir.join("bound.json"), to_json(o)?),
        (
            dir.join("figures").join("bound_vs_gap.svg"),
            scatter_svg("bound vs generalization gap", "gen_gap", "bound", &gaps, &bounds),
        ),
    ];
    write_all(files)
}

pub fn emit_stress(o: &StressOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        (dir.join("stress_before.csv"), o.before.to_csv()),
        (dir.join("stress_after.csv"), o.after.to_csv()),
        (dir.join("stress_correlations_before.csv"), correlations_csv(&o.correlations_before)),
        (dir.join("stress_correlations_after.csv"), correlations_csv(&o.correlations_after)),
        (dir.join("stress.json"), to_json(o)?),
    ];
    write_all(files)
}

fn write_all<const N: usize>(files: [(PathBuf, String); N]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(N);
    for (p, s) in files {
        write_file(&p, &s)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_is_deterministic_and_annotated() {
        let xs = [1.0, 2.0, 3.0, f64::NAN];
        let ys = [2.0, 4.0, 6.5, 1.0];
        let a = scatter_svg("k", "x", "y", &xs, &ys);
        assert_eq!(a, scatter_svg("k", "x", "y", &xs, &ys));
        assert!(a.contains("pearson r = 0.9"));
        assert_eq!(a.matches("<circle").count(), 3);
    }

    #[test]
    fn constant_column_still_plots() {
        let s = scatter_svg("a<b", "x", "y", &[1.0, 1.0], &[2.0, 3.0]);
        assert!(s.contains("a&lt;b"));
        assert!(s.contains("n/a"));
    }

    #[test]
    fn empty_table_rejected() {
        let d = tempfile::tempdir().unwrap();
        assert!(emit_report(&ResultsTable::default(), d.path(), &ALL_FORMATS).is_err());
    }
}
