//! Aggregation over repetitions and the CSV tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Metric;
use crate::experiment::{create, io_err, RunRecord};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

pub fn stat(xs: &[f64]) -> Option<Stat> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Stat { mean, sd })
}

/// `mean (sd)` of a fraction, in percent with one decimal.
pub fn percent_cell(s: Option<Stat>) -> String {
    s.map_or("NA".into(), |s| format!("{:.1} ({:.1})", 100.0 * s.mean, 100.0 * s.sd))
}

/// Aggregated metrics of one table row. Disparities are signed
/// `s = 1` (majority) minus `s = 0` (minority).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub reps: usize,
    pub accuracy: Stat,
    pub disparate_impact: Stat,
    pub abs_disparate_impact: Stat,
    /// Absent when a repetition lacked the stratum.
    pub disparate_fpr: Option<Stat>,
    pub disparate_fnr: Option<Stat>,
    pub pair_disparate_impact: Option<Stat>,
    pub pair_abs_disparate_impact: Option<Stat>,
    pub final_w1: Option<Stat>,
}

fn all<T>(xs: impl Iterator<Item = Option<T>>) -> Option<Vec<T>> {
    xs.collect()
}

pub fn aggregate(label: &str, records: &[RunRecord]) -> Row {
    let of = |f: fn(&RunRecord) -> f64| stat(&records.iter().map(f).collect::<Vec<_>>()).expect("nonempty");
    let opt = |f: fn(&RunRecord) -> Option<f64>| all(records.iter().map(f)).and_then(|v| stat(&v));
    Row {
        label: label.to_string(),
        reps: records.len(),
        accuracy: of(|r| r.report.accuracy),
        disparate_impact: of(|r| r.report.disparate_impact),
        abs_disparate_impact: of(|r| r.report.abs_disparate_impact),
        disparate_fpr: opt(|r| r.report.disparate_fpr),
        disparate_fnr: opt(|r| r.report.disparate_fnr),
        pair_disparate_impact: opt(|r| r.pair.as_ref().map(|p| p.disparate_impact)),
        pair_abs_disparate_impact: opt(|r| r.pair.as_ref().map(|p| p.disparate_impact.abs())),
        final_w1: opt(|r| r.final_w1),
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Summary table layout: `key`, the requested metrics, then
/// `|Disparate Impact|` and, when present, the pair disparity and the
/// final W1 (raw, three decimals). `key` may name several comma-separated
/// columns, matched by comma-separated labels.
pub fn write_table(path: &Path, key: &str, rows: &[Row], metrics: &[Metric]) -> Result<()> {
    let mut f = create(path)?;
    let io = |e| io_err(path, e);
    let pair = rows.iter().any(|r| r.pair_disparate_impact.is_some());
    let w1 = rows.iter().any(|r| r.final_w1.is_some());
    let mut header: Vec<String> = key.split(',').map(String::from).collect();
    header.extend(metrics.iter().map(|m| m.column().to_string()));
    header.push("|Disparate Impact|".into());
    if pair {
        header.extend(["Pair Disparate Impact".into(), "|Pair Disparate Impact|".into()]);
    }
    if w1 {
        header.push("Final W1".into());
    }
    writeln!(f, "{}", header.iter().map(|h| quote(h)).collect::<Vec<_>>().join(",")).map_err(io)?;
    for r in rows {
        let mut cells: Vec<String> = r.label.split(',').map(String::from).collect();
        for m in metrics {
            cells.push(percent_cell(match m {
                Metric::Accuracy => Some(r.accuracy),
                Metric::DisparateImpact => Some(r.disparate_impact),
                Metric::DisparateFpr => r.disparate_fpr,
                Metric::DisparateFnr => r.disparate_fnr,
            }));
        }
        cells.push(percent_cell(Some(r.abs_disparate_impact)));
        if pair {
            cells.push(percent_cell(r.pair_disparate_impact));
            cells.push(percent_cell(r.pair_abs_disparate_impact));
        }
        if w1 {
            cells.push(r.final_w1.map_or("NA".into(), |s| format!("{:.3} ({:.3})", s.mean, s.sd)));
        }
        writeln!(f, "{}", cells.iter().map(|c| quote(c)).collect::<Vec<_>>().join(",")).map_err(io)?;
    }
    Ok(())
}

/// One line per repetition, raw fractions, for plotting.
pub fn write_long_csv(path: &Path, keys: &[&str], rows: &[(String, &RunRecord)]) -> Result<()> {
    let mut f = create(path)?;
    let io = |e| io_err(path, e);
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x}"));
    writeln!(
        f,
        "{},rep,seed,accuracy,disparate_impact,disparate_fpr,disparate_fnr,final_w1",
        keys.join(",")
    )
    .map_err(io)?;
    for (key, r) in rows {
        writeln!(
            f,
            "{key},{},{},{},{},{},{},{}",
            r.rep,
            r.seed,
            r.report.accuracy,
            r.report.disparate_impact,
            opt(r.report.disparate_fpr),
            opt(r.report.disparate_fnr),
            opt(r.final_w1)
        )
        .map_err(io)?;
    }
    Ok(())
}
