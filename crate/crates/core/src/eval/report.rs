//! Run aggregation into tables and plot-ready data files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::EvalReport;
use crate::error::Result;

/// One evaluated model with the recipe that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    /// `layerwise`, `widthwise`, or `none` for an unpruned model.
    pub mode: String,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub strategy: String,
    pub data_fraction: f64,
    pub seed: u64,
    pub eval: EvalReport,
}

impl RunRecord {
    pub fn avg_pct(&self) -> Option<f64> {
        self.eval.avg_pct
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Ratio key with fixed precision so equal ratios group together.
fn rkey(r: f64) -> String {
    format!("{r:.4}")
}

pub fn runs_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from(
        "name,mode,target_ratio,achieved_ratio,strategy,data_fraction,seed,avg,avg_pct\n",
    );
    for r in runs {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{},{:.4},{},{:.4},{}",
            r.name,
            r.mode,
            r.target_ratio,
            r.achieved_ratio,
            r.strategy,
            r.data_fraction,
            r.seed,
            r.eval.avg,
            fmt_opt(r.avg_pct())
        );
    }
    s
}

/// Markdown table: one row per (mode, strategy, data fraction), one column
/// per target ratio, cells are seed-mean AVG-%.
pub fn table_markdown(runs: &[RunRecord]) -> String {
    let mut ratios: Vec<String> = runs.iter().map(|r| rkey(r.target_ratio)).collect();
    ratios.sort();
    ratios.dedup();
    let mut cells: BTreeMap<(String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in runs {
        let row = (
            format!("{} / {}", r.mode, r.strategy),
            format!("{:.2}", r.data_fraction),
        );
        let entry = cells.entry(row).or_default().entry(rkey(r.target_ratio)).or_default();
        if let Some(p) = r.avg_pct() {
            entry.push(p);
        }
    }
    let mut s = String::from("| method | data | ");
    s.push_str(&ratios.iter().map(|r| format!("{r}")).collect::<Vec<_>>().join(" | "));
    s.push_str(" |\n|---|---|");
    s.push_str(&"---|".repeat(ratios.len()));
    s.push('\n');
    for ((method, data), by_ratio) in &cells {
        let _ = write!(s, "| {method} | {data} |");
        for r in &ratios {
            let cell = by_ratio
                .get(r)
                .and_then(|v| mean(v))
                .map(|m| format!(" {m:.2}%"))
                .unwrap_or_default();
            let _ = write!(s, "{cell} |");
        }
        s.push('\n');
    }
    s
}

/// Seed-mean AVG-% per (mode, strategy, data fraction, ratio): the data
/// behind ratio-versus-performance curves.
pub fn curves_csv(runs: &[RunRecord]) -> String {
    let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    for r in runs {
        if let Some(p) = r.avg_pct() {
            groups
                .entry((
                    r.mode.clone(),
                    r.strategy.clone(),
                    format!("{:.4}", r.data_fraction),
                    rkey(r.target_ratio),
                ))
                .or_default()
                .push(p);
        }
    }
    let mut s = String::from("mode,strategy,data_fraction,ratio,runs,mean_avg_pct\n");
    for ((mode, strategy, frac, ratio), v) in &groups {
        let _ = writeln!(
            s,
            "{mode},{strategy},{frac},{ratio},{},{:.4}",
            v.len(),
            mean(v).unwrap_or(0.0)
        );
    }
    s
}

/// Performance of each data fraction relative to full-data training for
/// the same mode, strategy and ratio.
pub fn data_fraction_csv(runs: &[RunRecord]) -> String {
    let mut groups: BTreeMap<(String, String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in runs {
        if let Some(p) = r.avg_pct() {
            groups
                .entry((r.mode.clone(), r.strategy.clone(), rkey(r.target_ratio)))
                .or_default()
                .entry(format!("{:.4}", r.data_fraction))
                .or_default()
                .push(p);
        }
    }
    let mut s = String::from("mode,strategy,ratio,data_fraction,mean_avg_pct,pct_of_full_data\n");
    for ((mode, strategy, ratio), by_frac) in &groups {
        let full = by_frac.get("1.0000").and_then(|v| mean(v));
        for (frac, v) in by_frac {
            let m = mean(v).unwrap_or(0.0);
            let rel = full.filter(|&f| f > 0.0).map(|f| 100.0 * m / f);
            let _ = writeln!(s, "{mode},{strategy},{ratio},{frac},{m:.4},{}", fmt_opt(rel));
        }
    }
    s
}

/// Writes `runs.csv`, `runs.json`, `table.md`, `curves.csv` and
/// `data_fraction.csv` into `dir`.
pub fn emit_report(runs: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [
        ("runs.csv", runs_csv(runs)),
        ("runs.json", serde_json::to_string_pretty(runs)? + "\n"),
        ("table.md", table_markdown(runs)),
        ("curves.csv", curves_csv(runs)),
        ("data_fraction.csv", data_fraction_csv(runs)),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        out.push(p);
    }
    Ok(out)
}
