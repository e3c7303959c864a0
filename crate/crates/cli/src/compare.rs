use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use statrs::statistics::{Data, Max, Min, OrderStatistics};

use tiltrotor_core::analysis::{welch_ttest, AnalysisError, SignificanceResult};

use crate::eval::EvalSummary;
use crate::GlobalArgs;

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Output directories of two or more `eval` runs.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
}

pub const METRICS: [&str; 2] = ["position_rmse", "pitch_rmse"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub scenario: String,
    pub metric: String,
    pub run_a: String,
    pub run_b: String,
    pub controller_a: String,
    pub controller_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxRow {
    pub scenario: String,
    pub metric: String,
    pub run: String,
    pub controller: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub pairs: Vec<PairRow>,
    pub boxes: Vec<BoxRow>,
}

fn metric(s: &EvalSummary, name: &str) -> Vec<f64> {
    s.episodes
        .iter()
        .map(|e| if name == "position_rmse" { e.position_rmse } else { e.pitch_rmse })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Welch, extended to groups that are both constant: equal constants are
/// indistinguishable (p = 1), different ones are certainly apart (p = 0).
fn welch(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    match welch_ttest(a, b) {
        Err(AnalysisError::ZeroVariance) => {
            let d = mean(a) - mean(b);
            let (t, p) = if d == 0.0 { (0.0, 1.0) } else { (d.signum() * f64::INFINITY, 0.0) };
            Ok(SignificanceResult { t_statistic: t, degrees_of_freedom: (a.len() + b.len() - 2) as f64, p_value: p })
        }
        r => Ok(r?),
    }
}

fn box_row(scenario: &str, metric: &str, run: &str, controller: &str, xs: &[f64]) -> BoxRow {
    let mut d = Data::new(xs.to_vec());
    BoxRow {
        scenario: scenario.into(),
        metric: metric.into(),
        run: run.into(),
        controller: controller.into(),
        n: xs.len(),
        min: d.min(),
        q1: d.lower_quartile(),
        median: d.median(),
        q3: d.upper_quartile(),
        max: d.max(),
        mean: mean(xs),
    }
}

/// Every pair of runs that flew the same scenario, per metric.
pub fn compare(runs: &[(String, EvalSummary)]) -> Result<CompareReport> {
    if runs.len() < 2 {
        bail!("compare needs at least two runs");
    }
    let mut by_scenario: BTreeMap<&str, Vec<&(String, EvalSummary)>> = BTreeMap::new();
    for r in runs {
        by_scenario.entry(r.1.scenario.name()).or_default().push(r);
    }
    if let Some((s, _)) = by_scenario.iter().find(|(_, v)| v.len() < 2) {
        let all: Vec<&str> = by_scenario.keys().copied().collect();
        bail!("mismatched scenarios: {s} has no run to compare against (scenarios present: {all:?})");
    }
    let mut report = CompareReport { pairs: Vec::new(), boxes: Vec::new() };
    for (scenario, group) in &by_scenario {
        for m in METRICS {
            for (name, s) in group {
                report.boxes.push(box_row(scenario, m, name, s.controller.name(), &metric(s, m)));
            }
            for i in 0..group.len() {
                for j in i + 1..group.len() {
                    let (na, a) = group[i];
                    let (nb, b) = group[j];
                    let (xa, xb) = (metric(a, m), metric(b, m));
                    let w = welch(&xa, &xb).with_context(|| format!("{scenario} {m}: {na} vs {nb}"))?;
                    report.pairs.push(PairRow {
                        scenario: scenario.to_string(),
                        metric: m.into(),
                        run_a: na.clone(),
                        run_b: nb.clone(),
                        controller_a: a.controller.name().into(),
                        controller_b: b.controller.name().into(),
                        n_a: xa.len(),
                        n_b: xb.len(),
                        mean_a: mean(&xa),
                        mean_b: mean(&xb),
                        t_statistic: w.t_statistic,
                        degrees_of_freedom: w.degrees_of_freedom,
                        p_value: w.p_value,
                    });
                }
            }
        }
    }
    Ok(report)
}

fn label(path: &std::path::Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

pub fn run(g: &GlobalArgs, a: &CompareArgs) -> Result<()> {
    let mut runs = Vec::new();
    for dir in &a.runs {
        let path = dir.join("summary.json");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let summary: EvalSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        runs.push((label(dir), summary));
    }
    let report = compare(&runs)?;
    std::fs::create_dir_all(&g.out)?;
    std::fs::write(g.out.join("compare.json"), serde_json::to_string_pretty(&report)?)?;
    let mut w = csv::Writer::from_path(g.out.join("compare.csv"))?;
    for r in &report.pairs {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(g.out.join("boxplot.csv"))?;
    for r in &report.boxes {
        w.serialize(r)?;
    }
    w.flush()?;
    for r in &report.pairs {
        println!(
            "{:<16} {:<14} {} ({:.4}) vs {} ({:.4}): p = {:.4}",
            r.scenario, r.metric, r.run_a, r.mean_a, r.run_b, r.mean_b, r.p_value
        );
    }
    Ok(())
}
