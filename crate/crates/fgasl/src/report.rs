//! Summary tables over a results directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use fgasl_core::orchestrator::{ExperimentRecord, RunStatus};
use serde::{Deserialize, Serialize};

use crate::stats::paired_seed_test;
use crate::Result;

/// Strategy the paired tests compare every other strategy against.
pub const REFERENCE_STRATEGY: &str = "fgasl";

pub const SUMMARY_HEADER: [&str; 8] = ["strategy", "unseen_domain", "labels", "metric", "n", "mean", "std", "best"];
pub const TESTS_HEADER: [&str; 8] = ["reference", "baseline", "unseen_domain", "labels", "n", "mean_diff", "t", "p_value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dice,
    Jaccard,
    Hd95,
    Asd,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Dice, Metric::Jaccard, Metric::Hd95, Metric::Asd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Jaccard => "jaccard",
            Metric::Hd95 => "hd95",
            Metric::Asd => "asd",
        }
    }

    fn higher_is_better(self) -> bool {
        matches!(self, Metric::Dice | Metric::Jaccard)
    }

    pub fn of(self, r: &ExperimentRecord) -> Option<f64> {
        let m = r.final_metrics.as_ref()?;
        match self {
            Metric::Dice => Some(m.dice),
            Metric::Jaccard => Some(m.jaccard),
            Metric::Hd95 => m.hd95,
            Metric::Asd => m.asd,
        }
    }
}

/// Per-domain label count a record was trained with.
pub fn label_count(r: &ExperimentRecord) -> usize {
    r.labels_per_domain.first().copied().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub unseen_domain: u32,
    pub labels: usize,
    pub metric: Metric,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` with a single seed.
    pub std: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub baseline: String,
    pub unseen_domain: u32,
    pub labels: usize,
    pub n: usize,
    pub mean_diff: Option<f64>,
    pub t: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub tests: Vec<TestRow>,
    pub failed: usize,
}

type Cell = (String, u32, usize);

fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Means over seeds per strategy, held-out domain, label count and metric,
/// plus paired Dice tests of the reference strategy against each other one.
pub fn build_report(records: &[ExperimentRecord]) -> Result<Report> {
    let done: Vec<&ExperimentRecord> = records.iter().filter(|r| r.status == RunStatus::Completed).collect();
    let mut cells: BTreeMap<Cell, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in &done {
        cells
            .entry((r.strategy.clone(), r.unseen_domain, label_count(r)))
            .or_default()
            .push(r);
    }

    let mut summary = Vec::new();
    for ((strategy, unseen, labels), rs) in &cells {
        for metric in Metric::ALL {
            let v: Vec<f64> = rs.iter().filter_map(|r| metric.of(r)).collect();
            if v.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&v);
            summary.push(SummaryRow {
                strategy: strategy.clone(),
                unseen_domain: *unseen,
                labels: *labels,
                metric,
                n: v.len(),
                mean,
                std,
                best: false,
            });
        }
    }
    let columns: BTreeSet<(u32, usize, Metric)> = summary.iter().map(|r| (r.unseen_domain, r.labels, r.metric)).collect();
    for (u, l, m) in columns {
        let col = summary.iter().enumerate().filter(|(_, r)| (r.unseen_domain, r.labels, r.metric) == (u, l, m));
        let best = if m.higher_is_better() {
            col.max_by(|a, b| a.1.mean.total_cmp(&b.1.mean).then(b.0.cmp(&a.0)))
        } else {
            col.min_by(|a, b| a.1.mean.total_cmp(&b.1.mean).then(a.0.cmp(&b.0)))
        }
        .map(|(i, _)| i);
        if let Some(i) = best {
            summary[i].best = true;
        }
    }

    let mut tests = Vec::new();
    for ((strategy, unseen, labels), rs) in &cells {
        if strategy == REFERENCE_STRATEGY {
            continue;
        }
        let Some(reference) = cells.get(&(REFERENCE_STRATEGY.to_string(), *unseen, *labels)) else {
            continue;
        };
        let by_seed: BTreeMap<u64, f64> = reference.iter().filter_map(|r| Some((r.seed, r.final_dice()?))).collect();
        let (a, b): (Vec<f64>, Vec<f64>) = rs
            .iter()
            .filter_map(|r| Some((*by_seed.get(&r.seed)?, r.final_dice()?)))
            .unzip();
        let test = paired_seed_test(&a, &b).ok();
        tests.push(TestRow {
            baseline: strategy.clone(),
            unseen_domain: *unseen,
            labels: *labels,
            n: a.len(),
            mean_diff: test.map(|t| t.mean_diff),
            t: test.map(|t| t.t),
            p_value: test.map(|t| t.p_value),
        });
    }
    Ok(Report {
        summary,
        tests,
        failed: records.len() - done.len(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `summary.csv` and `tests.csv` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    let summary_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in &report.summary {
        w.write_record([
            r.strategy.clone(),
            r.unseen_domain.to_string(),
            r.labels.to_string(),
            r.metric.name().to_string(),
            r.n.to_string(),
            r.mean.to_string(),
            opt(r.std),
            if r.best { "*".into() } else { String::new() },
        ])?;
    }
    w.flush().map_err(crate::Error::io(&summary_path))?;

    let tests_path = dir.join("tests.csv");
    let mut w = csv::Writer::from_path(&tests_path)?;
    w.write_record(TESTS_HEADER)?;
    for r in &report.tests {
        w.write_record([
            REFERENCE_STRATEGY.to_string(),
            r.baseline.clone(),
            r.unseen_domain.to_string(),
            r.labels.to_string(),
            r.n.to_string(),
            opt(r.mean_diff),
            opt(r.t),
            opt(r.p_value),
        ])?;
    }
    w.flush().map_err(crate::Error::io(&tests_path))?;
    Ok(vec![summary_path, tests_path])
}
