use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::simulation::experiment::{read_results, summarize, write_summary, ResultRow};

use super::EXIT_OK;

/// Paired comparison of one method against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub(crate) struct SignCounts {
    /// Replicates where the reference had the lower MSE.
    pub reference_wins: usize,
    pub method_wins: usize,
    pub ties: usize,
}

fn paired_signs(reference: &BTreeMap<usize, f64>, other: &BTreeMap<usize, f64>) -> SignCounts {
    let mut s = SignCounts::default();
    for (rep, a) in reference {
        if let Some(b) = other.get(rep) {
            if a < b {
                s.reference_wins += 1;
            } else if b < a {
                s.method_wins += 1;
            } else {
                s.ties += 1;
            }
        }
    }
    s
}

/// Plain-text ranking per (scenario, tau2, n): methods by mean test MSE and
/// paired sign counts against the best method.
pub(crate) fn ranking(rows: &[ResultRow]) -> String {
    type Cell = (String, String, usize);
    let mut groups: BTreeMap<Cell, BTreeMap<String, BTreeMap<usize, f64>>> = BTreeMap::new();
    for r in rows {
        let Some(m) = r.metrics else { continue };
        groups
            .entry((r.scenario.clone(), r.tau2.to_string(), r.n))
            .or_default()
            .entry(r.method.clone())
            .or_default()
            .entry(r.replicate)
            .or_insert(m.mse);
    }
    let mut out = String::new();
    for ((scenario, tau2, n), methods) in groups {
        let _ = writeln!(out, "scenario {scenario}, tau2 {tau2}, n {n}");
        let mut order: Vec<(String, f64)> = methods
            .iter()
            .map(|(m, v)| (m.clone(), v.values().sum::<f64>() / v.len() as f64))
            .collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let best = &methods[&order[0].0];
        for (rank, (name, mean)) in order.iter().enumerate() {
            if rank == 0 {
                let _ = writeln!(out, "  1. {name:<24} mse {mean:.6}  (reference)");
            } else {
                let s = paired_signs(best, &methods[name]);
                let _ = writeln!(
                    out,
                    "  {}. {name:<24} mse {mean:.6}  vs {}: {} worse, {} better, {} tied",
                    rank + 1,
                    order[0].0,
                    s.reference_wins,
                    s.method_wins,
                    s.ties
                );
            }
        }
        out.push('\n');
    }
    out
}

pub(crate) fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<i32> {
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(read_results(path)?);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_summary(&out.join("summary.csv"), &summarize(&rows))?;
    let path = out.join("ranking.txt");
    std::fs::write(&path, ranking(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(EXIT_OK)
}
