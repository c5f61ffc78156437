use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ExperimentResult;
use crate::error::{Error, Result};

/// One line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub count: usize,
    pub seeds: usize,
    pub degraded: bool,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

/// An experiment measured against a baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub baseline: String,
    pub delta_median: f64,
    pub delta_mean: f64,
    /// Mean of per-seed differences over the seeds both finished.
    pub paired_mean: Option<f64>,
}

/// Report rows sorted by median accuracy, best first. Experiments without a
/// finished run are left out with a warning.
pub fn summarize(results: &[ExperimentResult]) -> Result<Vec<ReportRow>> {
    let mut rows: Vec<ReportRow> = results
        .iter()
        .filter_map(|r| {
            let Some(s) = &r.summary else {
                log::warn!(
                    "`{}` has no finished run and is left out of the report",
                    r.name
                );
                return None;
            };
            Some(ReportRow {
                name: r.name.clone(),
                count: s.count,
                seeds: r.runs.len(),
                degraded: r.degraded,
                min: s.min,
                median: s.median,
                max: s.max,
                mean: s.mean,
                std: s.std,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    rows.sort_by(|a, b| {
        b.median
            .total_cmp(&a.median)
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(rows)
}

/// Compares every other experiment with `baseline`.
pub fn paired_comparison(results: &[ExperimentResult], baseline: &str) -> Result<Vec<Comparison>> {
    let base = results
        .iter()
        .find(|r| r.name == baseline)
        .ok_or_else(|| Error::Config(format!("baseline `{baseline}` is not among the results")))?;
    let Some(bs) = &base.summary else {
        return Err(Error::EmptyReport);
    };
    let seed_acc = |r: &ExperimentResult, seed: u64| {
        r.runs
            .iter()
            .find(|o| o.seed == seed)
            .and_then(|o| o.final_test_acc)
    };
    Ok(results
        .iter()
        .filter(|r| r.name != baseline)
        .filter_map(|r| {
            let s = r.summary.as_ref()?;
            let diffs: Vec<f64> = base
                .runs
                .iter()
                .filter_map(|o| Some(seed_acc(r, o.seed)? - o.final_test_acc?))
                .collect();
            Some(Comparison {
                name: r.name.clone(),
                baseline: baseline.to_string(),
                delta_median: s.median - bs.median,
                delta_mean: s.mean - bs.mean,
                paired_mean: (!diffs.is_empty())
                    .then(|| diffs.iter().sum::<f64>() / diffs.len() as f64),
            })
        })
        .collect())
}

pub const REPORT_HEADER: &str = "name,count,seeds,degraded,min,median,max,mean,std,baseline,delta_median,delta_mean,paired_mean";

/// One rectangular table; the comparison columns are empty for rows without
/// a baseline.
pub fn render_report_csv(rows: &[ReportRow], comparisons: &[Comparison]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        write!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.name, r.count, r.seeds, r.degraded, r.min, r.median, r.max, r.mean, r.std
        )
        .unwrap();
        match comparisons.iter().find(|c| c.name == r.name) {
            Some(c) => {
                let paired = c.paired_mean.map(|p| format!("{p:.6}")).unwrap_or_default();
                writeln!(
                    s,
                    ",{},{:.6},{:.6},{paired}",
                    c.baseline, c.delta_median, c.delta_mean
                )
                .unwrap();
            }
            None => s.push_str(",,,,\n"),
        }
    }
    s
}

pub fn render_report_text(rows: &[ReportRow], comparisons: &[Comparison]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(10);
    let mut s = format!(
        "{:<width$}  {:>5}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>8}\n",
        "experiment", "runs", "min", "median", "max", "mean", "std", "Δmedian"
    );
    for r in rows {
        let runs = if r.degraded {
            format!("{}/{}!", r.count, r.seeds)
        } else {
            r.count.to_string()
        };
        let delta = comparisons
            .iter()
            .find(|c| c.name == r.name)
            .map(|c| format!("{:+.2}", 100.0 * c.delta_median))
            .unwrap_or_default();
        writeln!(
            s,
            "{:<width$}  {runs:>5}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {delta:>8}",
            r.name,
            100.0 * r.min,
            100.0 * r.median,
            100.0 * r.max,
            100.0 * r.mean,
            100.0 * r.std
        )
        .unwrap();
    }
    s
}
