//! Aligned per-epoch curves from several metrics files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{epochs_to_fraction, read_metrics_csv, series};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRun {
    pub label: String,
    pub curve: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub metric: String,
    pub runs: Vec<ConvergenceRun>,
    pub fractions: Vec<f64>,
}

impl ConvergenceReport {
    pub fn from_runs(metric: &str, runs: Vec<ConvergenceRun>, fractions: &[f64]) -> Self {
        ConvergenceReport {
            metric: metric.to_string(),
            runs,
            fractions: fractions.to_vec(),
        }
    }

    /// Epochs where any run has a value, ascending.
    pub fn epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.runs.iter().flat_map(|r| r.curve.iter().map(|p| p.0)).collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// `epochs_to_{pct}%` for each run, in run order.
    pub fn summary(&self) -> Vec<(String, Vec<Option<usize>>)> {
        self.fractions
            .iter()
            .map(|&f| {
                (
                    format!("epochs_to_{}%", (f * 100.0).round()),
                    self.runs.iter().map(|r| epochs_to_fraction(&r.curve, f)).collect(),
                )
            })
            .collect()
    }

    /// One row per epoch with a column per run (blank where a run has no
    /// value), then one row per summary statistic and the final values.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch");
        for r in &self.runs {
            s.push(',');
            s.push_str(&r.label);
        }
        s.push('\n');
        for e in self.epochs() {
            let _ = write!(s, "{e}");
            for r in &self.runs {
                s.push(',');
                if let Some((_, v)) = r.curve.iter().find(|p| p.0 == e) {
                    let _ = write!(s, "{v}");
                }
            }
            s.push('\n');
        }
        for (name, vals) in self.summary() {
            s.push_str(&name);
            for v in vals {
                s.push(',');
                if let Some(v) = v {
                    let _ = write!(s, "{v}");
                }
            }
            s.push('\n');
        }
        s.push_str("final");
        for r in &self.runs {
            s.push(',');
            if let Some((_, v)) = r.curve.last() {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
        s
    }
}

fn label_for(path: &Path) -> String {
    let parent = path.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned());
    parent.unwrap_or_else(|| path.display().to_string())
}

/// Reads `split`/`metric` curves from each metrics file. Runs are labeled by
/// their directory name.
pub fn convergence_report(paths: &[PathBuf], split: &str, metric: &str, fractions: &[f64]) -> Result<ConvergenceReport> {
    if paths.is_empty() {
        return Err(Error::invalid("convergence report needs at least one metrics file"));
    }
    let mut runs = Vec::new();
    for p in paths {
        let records = read_metrics_csv(p)?;
        let curve = series(&records, split, metric);
        if curve.is_empty() {
            return Err(Error::invalid(format!("{}: no `{split}/{metric}` column", p.display())));
        }
        let mut label = label_for(p);
        if runs.iter().any(|r: &ConvergenceRun| r.label == label) {
            label = format!("{label}#{}", runs.len());
        }
        runs.push(ConvergenceRun { label, curve });
    }
    Ok(ConvergenceReport::from_runs(metric, runs, fractions))
}
