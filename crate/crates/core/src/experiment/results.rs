//! Result files: metrics CSV, divergence grids, summaries and learning-curve
//! data.
//!
//! The metrics CSV has the header `round,method,seed,test_rmse,wall_ms`.
//! Because one file holds both partition modes, the `method` column carries
//! `<method>/<mode>`, e.g. `feddf/non_iid`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "round,method,seed,test_rmse,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    /// `<method>/<mode>`.
    pub method: String,
    pub seed: u64,
    pub test_rmse: f64,
    pub wall_ms: u64,
}

pub fn run_label(method: &str, mode: &str) -> String {
    format!("{method}/{mode}")
}

/// Splits a `<method>/<mode>` label; a label without `/` has an empty mode.
pub fn split_label(label: &str) -> (&str, &str) {
    label.split_once('/').unwrap_or((label, ""))
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(32 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.round, r.method, r.seed, r.test_rmse, r.wall_ms);
    }
    out
}

/// Parses a metrics CSV. Errors carry the 1-based line number.
pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        Some((_, h)) => return Err(Error::Format(format!("expected header `{METRICS_HEADER}`, got `{h}`"))),
        None => return Err(Error::Format("metrics file is empty".into())),
    }
    let mut rows = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 fields, got {}", f.len()),
            });
        }
        let bad = |what: &str, v: &str| Error::Parse {
            line,
            msg: format!("bad {what} `{v}`"),
        };
        if f[1].is_empty() {
            return Err(bad("method", f[1]));
        }
        let test_rmse: f64 = f[3].parse().map_err(|_| bad("test_rmse", f[3]))?;
        rows.push(MetricRow {
            round: f[0].parse().map_err(|_| bad("round", f[0]))?,
            method: f[1].to_string(),
            seed: f[2].parse().map_err(|_| bad("seed", f[2]))?,
            test_rmse,
            wall_ms: f[4].parse().map_err(|_| bad("wall_ms", f[4]))?,
        });
    }
    Ok(rows)
}

fn fmt_cell(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        v.to_string()
    }
}

/// Labeled grid: rows `Model_i`, columns `Public_j`.
pub fn grid_to_csv(grid: &[Vec<f64>]) -> String {
    let cols = grid.first().map_or(0, Vec::len);
    let mut out = String::from("model");
    for j in 0..cols {
        let _ = write!(out, ",Public_{j}");
    }
    out.push('\n');
    for (i, row) in grid.iter().enumerate() {
        let _ = write!(out, "Model_{i}");
        for v in row {
            let _ = write!(out, ",{}", fmt_cell(*v));
        }
        out.push('\n');
    }
    out
}

/// Final-round statistics of one `<method>/<mode>` group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryEntry {
    pub method: String,
    pub mode: String,
    pub seeds: usize,
    pub mean_final_rmse: f64,
    pub min_final_rmse: f64,
    pub max_final_rmse: f64,
}

/// Groups in order of first appearance.
fn groups(rows: &[MetricRow]) -> Vec<(&str, Vec<&MetricRow>)> {
    let mut out: Vec<(&str, Vec<&MetricRow>)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(l, _)| *l == r.method) {
            Some((_, g)) => g.push(r),
            None => out.push((&r.method, vec![r])),
        }
    }
    out
}

/// Mean, min and max of the last recorded round of every seed.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryEntry> {
    groups(rows)
        .into_iter()
        .map(|(label, g)| {
            let mut last: BTreeMap<u64, &MetricRow> = BTreeMap::new();
            for r in g {
                let e = last.entry(r.seed).or_insert(r);
                if r.round >= e.round {
                    *e = r;
                }
            }
            let finals: Vec<f64> = last.values().map(|r| r.test_rmse).collect();
            let (method, mode) = split_label(label);
            SummaryEntry {
                method: method.to_string(),
                mode: mode.to_string(),
                seeds: finals.len(),
                mean_final_rmse: finals.iter().sum::<f64>() / finals.len() as f64,
                min_final_rmse: finals.iter().copied().fold(f64::INFINITY, f64::min),
                max_final_rmse: finals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// `(baseline − entry) / baseline` for the same mode; positive means the
/// entry has lower RMSE than the baseline.
pub fn relative_improvement(entries: &[SummaryEntry], entry: &SummaryEntry, baseline: &str) -> Option<f64> {
    let base = entries.iter().find(|e| e.mode == entry.mode && e.method == baseline)?;
    Some((base.mean_final_rmse - entry.mean_final_rmse) / base.mean_final_rmse)
}

pub const SUMMARY_HEADER: &str =
    "mode,method,seeds,mean_final_rmse,min_final_rmse,max_final_rmse,improvement_vs_fedavg,improvement_vs_feddf";

pub fn summary_to_csv(entries: &[SummaryEntry]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for e in entries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.mode,
            e.method,
            e.seeds,
            e.mean_final_rmse,
            e.min_final_rmse,
            e.max_final_rmse,
            opt(relative_improvement(entries, e, "fedavg")),
            opt(relative_improvement(entries, e, "feddf")),
        );
    }
    out
}

/// Human-readable summary table.
pub fn summary_to_text(entries: &[SummaryEntry]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<20} {:>5} {:>10} {:>10} {:>10} {:>11} {:>11}",
        "mode", "method", "seeds", "mean", "min", "max", "vs fedavg", "vs feddf"
    );
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:+.2}%", 100.0 * x));
    for e in entries {
        let _ = writeln!(
            out,
            "{:<10} {:<20} {:>5} {:>10.6} {:>10.6} {:>10.6} {:>11} {:>11}",
            e.mode,
            e.method,
            e.seeds,
            e.mean_final_rmse,
            e.min_final_rmse,
            e.max_final_rmse,
            pct(relative_improvement(entries, e, "fedavg")),
            pct(relative_improvement(entries, e, "feddf")),
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub round: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Learning curve of one `<method>/<mode>` group over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

impl PlotSeries {
    /// File name with `/` replaced by `_`.
    pub fn file_name(&self) -> String {
        format!("curve_{}.csv", self.label.replace('/', "_"))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,mean_test_rmse,min_test_rmse,max_test_rmse\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{}", p.round, p.mean, p.min, p.max);
        }
        out
    }
}

pub fn plot_series(rows: &[MetricRow]) -> Vec<PlotSeries> {
    groups(rows)
        .into_iter()
        .map(|(label, g)| {
            let mut by_round: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in g {
                by_round.entry(r.round).or_default().push(r.test_rmse);
            }
            let points = by_round
                .into_iter()
                .map(|(round, v)| CurvePoint {
                    round,
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                })
                .collect();
            PlotSeries {
                label: label.to_string(),
                points,
            }
        })
        .collect()
}
