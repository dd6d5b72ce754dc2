//! Aggregate run output: per (arm, epsilon), the median and interquartile
//! range of the final-step adversarial evaluation loss across seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub arm: String,
    pub epsilon: String,
    pub seeds: usize,
    pub median: f64,
    pub iqr: f64,
}

/// Median of a sorted slice.
fn median_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median plus Tukey-hinge interquartile range.
pub fn median_iqr(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty());
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let med = median_sorted(&xs);
    if n < 2 {
        return (med, 0.0);
    }
    let half = n / 2;
    let lower = &xs[..half];
    let upper = &xs[n - half..];
    (med, median_sorted(upper) - median_sorted(lower))
}

fn parse_cell_name(name: &str) -> Option<(String, String, u64)> {
    let stem = name.strip_suffix(".csv")?;
    let (arm, rest) = stem.split_once("_eps")?;
    let (eps, seed) = rest.split_once("_seed")?;
    Some((arm.to_string(), eps.to_string(), seed.parse().ok()?))
}

fn final_adv_loss(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow!("{}: empty", path.display()))?;
    if header != "step,train_loss,adv_eval_loss" {
        bail!("{}: unexpected header {header:?}", path.display());
    }
    let last = lines
        .filter(|l| !l.trim().is_empty())
        .next_back()
        .ok_or_else(|| anyhow!("{}: no data rows", path.display()))?;
    let field = last
        .split(',')
        .nth(2)
        .ok_or_else(|| anyhow!("{}: malformed row {last:?}", path.display()))?;
    field
        .parse()
        .with_context(|| format!("{}: bad loss {field:?}", path.display()))
}

/// Read every cell CSV under `dir` and build one row per (arm, epsilon).
pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some((arm, eps, _seed)) = parse_cell_name(&name) {
            grouped
                .entry((arm, eps))
                .or_default()
                .push(final_adv_loss(&entry.path())?);
        }
    }
    if grouped.is_empty() {
        bail!("no run CSVs found in {}", dir.display());
    }
    Ok(grouped
        .into_iter()
        .map(|((arm, epsilon), vals)| {
            let (median, iqr) = median_iqr(&vals);
            SummaryRow {
                arm,
                epsilon,
                seeds: vals.len(),
                median,
                iqr,
            }
        })
        .collect())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("arm,epsilon,seeds,median_final_adv_eval_loss,iqr\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.arm, r.epsilon, r.seeds, r.median, r.iqr);
    }
    out
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>8} {:>6} {:>24} {:>12}",
        "arm", "epsilon", "seeds", "median final adv loss", "iqr"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>8} {:>6} {:>24.6} {:>12.6}",
            r.arm, r.epsilon, r.seeds, r.median, r.iqr
        );
    }
    out
}

/// Write `summary.csv` and `summary.txt` into the run directory.
pub fn write_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let rows = summarize(dir)?;
    fs::write(dir.join("summary.csv"), summary_csv(&rows))?;
    fs::write(dir.join("summary.txt"), summary_table(&rows))?;
    Ok(rows)
}
