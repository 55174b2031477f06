//! Monte-Carlo runs and the long-format results table.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsReport};
use super::scenario::{gen_scenario, ScenarioId, ScenarioSpec};
use crate::error::{Error, Result};
use crate::tuning::{fit_method, Method, TuneSpec};

/// Column set of `results.csv`.
pub const RESULTS_HEADER: [&str; 10] = [
    "replicate", "method", "scenario", "tau2", "n", "mse", "r2", "bias", "f1", "wall_time",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub methods: Vec<Method>,
    pub reps: usize,
    /// Replicate `r` is generated from `seed + r`.
    pub seed: u64,
    /// Template for every method; the method field is overwritten.
    pub tune: TuneSpec,
    /// Record wall-clock time per fit. Off by default so that tables are
    /// reproducible byte for byte.
    pub timing: bool,
}

/// One line of the results table; metrics are `None` when the fit failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub replicate: usize,
    pub method: String,
    pub scenario: String,
    pub tau2: f64,
    pub n: usize,
    pub metrics: Option<MetricsReport>,
    pub wall_time: Option<f64>,
}

fn run_one(cfg: &ExperimentConfig, rep: usize) -> Vec<ResultRow> {
    let spec = ScenarioSpec {
        seed: cfg.seed.wrapping_add(rep as u64),
        ..cfg.scenario.clone()
    };
    let row = |method: Method, metrics, wall_time| ResultRow {
        replicate: rep,
        method: method.name().to_string(),
        scenario: spec.id.name().to_string(),
        tau2: spec.tau2_label(),
        n: spec.n,
        metrics,
        wall_time,
    };
    let data = match gen_scenario(&spec) {
        Ok(d) => d,
        Err(e) => {
            log::error!("replicate {rep}: data generation failed: {e}");
            return cfg.methods.iter().map(|&m| row(m, None, None)).collect();
        }
    };
    cfg.methods
        .iter()
        .map(|&method| {
            let mut tune = cfg.tune.clone();
            tune.method = method;
            if method == Method::Cocolasso && tune.tau2.is_none() {
                tune.tau2 = Some(spec.tau2.clone());
            }
            let start = Instant::now();
            let result = fit_method(&data.train, &data.val_x, &data.val_y, &tune).and_then(|fit| {
                evaluate(
                    &fit.beta_raw,
                    fit.intercept,
                    &data.truth,
                    &data.test_x,
                    &data.test_y,
                )
            });
            let elapsed = start.elapsed().as_secs_f64();
            let metrics = match result {
                Ok(m) => Some(m),
                Err(e) => {
                    log::warn!("replicate {rep}, {method}: {e}");
                    None
                }
            };
            row(method, metrics, cfg.timing.then_some(elapsed))
        })
        .collect()
}

/// Generates `reps` replicates and scores every method on each. Methods
/// within a replicate share the same data. Rows are ordered by
/// `(replicate, method)` in the order given.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.scenario.validate()?;
    cfg.tune.validate()?;
    if cfg.methods.is_empty() || cfg.reps == 0 {
        return Err(Error::InvalidArgument("need at least one method and one replicate".into()));
    }
    let rows: Vec<Vec<ResultRow>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_one(cfg, rep))
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Methods run by default, minus the imputation baselines for the
/// scenario without missing data.
pub fn default_methods(id: ScenarioId) -> Vec<Method> {
    Method::ALL
        .into_iter()
        .filter(|m| id != ScenarioId::IV || !m.is_imputation())
        .collect()
}

fn fmt_opt(v: Option<f64>, missing: &str) -> String {
    v.map_or_else(|| missing.to_string(), |x| x.to_string())
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        let m = r.metrics;
        w.write_record([
            r.replicate.to_string(),
            r.method.clone(),
            r.scenario.clone(),
            r.tau2.to_string(),
            r.n.to_string(),
            fmt_opt(m.map(|m| m.mse), "NA"),
            fmt_opt(m.map(|m| m.r2), "NA"),
            fmt_opt(m.map(|m| m.bias_l2), "NA"),
            fmt_opt(m.map(|m| m.f1), "NA"),
            fmt_opt(r.wall_time, ""),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != RESULTS_HEADER {
        return Err(schema(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<Option<f64>> {
            match field(i) {
                "" | "NA" => Ok(None),
                s => s
                    .parse()
                    .map(Some)
                    .map_err(|_| schema(format!("row {}: bad number {s:?}", line + 2))),
            }
        };
        let int = |i: usize| -> Result<usize> {
            field(i)
                .parse()
                .map_err(|_| schema(format!("row {}: bad integer {:?}", line + 2, field(i))))
        };
        let metrics = match (num(5)?, num(6)?, num(7)?, num(8)?) {
            (Some(mse), Some(r2), Some(bias_l2), Some(f1)) => Some(MetricsReport {
                mse,
                r2,
                bias_l2,
                f1,
            }),
            _ => None,
        };
        out.push(ResultRow {
            replicate: int(0)?,
            method: field(1).to_string(),
            scenario: field(2).to_string(),
            tau2: num(3)?.ok_or_else(|| schema(format!("row {}: missing tau2", line + 2)))?,
            n: int(4)?,
            metrics,
            wall_time: num(9)?,
        });
    }
    Ok(out)
}

/// Per-group statistics of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

fn mean_sd(v: &[f64]) -> Moments {
    let n = v.len() as f64;
    if v.is_empty() {
        return Moments {
            mean: f64::NAN,
            sd: f64::NAN,
        };
    }
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Moments { mean, sd }
}

/// Grouping key: scenario, error level, training size, method.
pub type GroupKey = (String, String, usize, String);

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub key: GroupKey,
    pub count: usize,
    pub failures: usize,
    pub mse: Moments,
    pub r2: Moments,
    pub bias: Moments,
    pub f1: Moments,
}

pub const SUMMARY_HEADER: [&str; 14] = [
    "scenario", "tau2", "n", "method", "count", "failures", "mse_mean", "mse_sd", "r2_mean",
    "r2_sd", "bias_mean", "bias_sd", "f1_mean", "f1_sd",
];

pub fn group_key(r: &ResultRow) -> GroupKey {
    (r.scenario.clone(), r.tau2.to_string(), r.n, r.method.clone())
}

/// Mean and standard deviation of each metric per group, over successful
/// replicates.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(group_key(r)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let ok: Vec<MetricsReport> = rs.iter().filter_map(|r| r.metrics).collect();
            let col = |f: fn(&MetricsReport) -> f64| mean_sd(&ok.iter().map(f).collect::<Vec<_>>());
            SummaryRow {
                key,
                count: rs.len(),
                failures: rs.len() - ok.len(),
                mse: col(|m| m.mse),
                r2: col(|m| m.r2),
                bias: col(|m| m.bias_l2),
                f1: col(|m| m.f1),
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for s in summary {
        let f = |v: f64| if v.is_nan() { "NA".to_string() } else { v.to_string() };
        w.write_record([
            s.key.0.clone(),
            s.key.1.clone(),
            s.key.2.to_string(),
            s.key.3.clone(),
            s.count.to_string(),
            s.failures.to_string(),
            f(s.mse.mean),
            f(s.mse.sd),
            f(s.r2.mean),
            f(s.r2.sd),
            f(s.bias.mean),
            f(s.bias.sd),
            f(s.f1.mean),
            f(s.f1.sd),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
