//! Inputs for the LASSO baselines: complete-case subsets and imputed matrices.

use nalgebra::DMatrix;

use crate::datamodel::BlockMissingDataset;
use crate::error::{Error, Result};

/// Missing cells replaced by the column's observed mean.
pub fn baseline_mean_impute(ds: &BlockMissingDataset) -> DMatrix<f64> {
    let (n, p) = (ds.n(), ds.p());
    let mut out = ds.x().clone();
    for j in 0..p {
        let obs: Vec<usize> = (0..n).filter(|&i| ds.is_observed(i, j)).collect();
        let mean = if obs.is_empty() {
            0.0
        } else {
            obs.iter().map(|&i| ds.x()[(i, j)]).sum::<f64>() / obs.len() as f64
        };
        for i in 0..n {
            if !ds.is_observed(i, j) {
                out[(i, j)] = mean;
            }
        }
    }
    out
}

/// Result of the iterative low-rank completion.
#[derive(Debug, Clone)]
pub struct SvdImpute {
    pub matrix: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Hard-rank completion: missing cells start at zero and are repeatedly
/// overwritten with the rank-`r` truncated SVD reconstruction of the filled
/// matrix, until the largest filled-cell change drops below `1e-6` or
/// `iters` rounds have run.
pub fn baseline_svd_impute(ds: &BlockMissingDataset, rank: usize, iters: usize) -> Result<SvdImpute> {
    if rank == 0 {
        return Err(Error::InvalidArgument("SVD imputation rank must be ≥ 1".into()));
    }
    let (n, p) = (ds.n(), ds.p());
    let mut filled = ds.x().clone();
    let missing: Vec<(usize, usize)> = (0..p)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .filter(|&(i, j)| !ds.is_observed(i, j))
        .collect();
    // Columns with no observation carry no information and stay at zero.
    let empty_cols: Vec<bool> = (0..p)
        .map(|j| (0..n).all(|i| !ds.is_observed(i, j)))
        .collect();
    let r = rank.min(n.min(p));
    let mut iterations = 0;
    let mut converged = missing.is_empty();
    while !converged && iterations < iters {
        iterations += 1;
        let svd = filled.clone().svd(true, true);
        let u = svd.u.as_ref().ok_or(Error::ConvergenceFailure)?;
        let vt = svd.v_t.as_ref().ok_or(Error::ConvergenceFailure)?;
        // nalgebra does not order singular values.
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut change = 0.0_f64;
        for &(i, j) in &missing {
            if empty_cols[j] {
                continue;
            }
            let v: f64 = order[..r]
                .iter()
                .map(|&k| u[(i, k)] * svd.singular_values[k] * vt[(k, j)])
                .sum();
            change = change.max((v - filled[(i, j)]).abs());
            filled[(i, j)] = v;
        }
        converged = change < 1e-6;
    }
    if !converged {
        log::warn!("SVD imputation stopped after {iterations} rounds without converging");
    }
    Ok(SvdImpute {
        matrix: filled,
        iterations,
        converged,
    })
}

/// Rows observing every modality.
pub fn baseline_complete_case(ds: &BlockMissingDataset) -> Result<BlockMissingDataset> {
    let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.is_complete_row(i)).collect();
    if rows.len() < 2 {
        return Err(Error::TooFewCompleteCases {
            needed: 2,
            found: rows.len(),
        });
    }
    ds.select_rows(&rows)
}
