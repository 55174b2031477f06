//! Initial estimates of the covariance matrix `Σ` and the cross-covariance
//! vector `C` from block-missing data.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{observation_counts, BlockMissingDataset, ModalityLayout};
use crate::error::{Error, Result};

/// Pairwise-available moment estimates.
#[derive(Debug, Clone)]
pub struct PairwiseMoments {
    /// `σ̃_jt` (or `σ̆_jt` for the robust variant), symmetric.
    pub sigma: DMatrix<f64>,
    /// Overlap counts `n_jt`.
    pub counts: DMatrix<usize>,
    /// `c̃_j` (or `c̆_j`).
    pub c: DVector<f64>,
    /// `n_j`.
    pub c_counts: Vec<usize>,
    pub robust: bool,
    pub layout: ModalityLayout,
    /// Robust variant only: multipliers `d_j = 1/√σ̆_jj` used to bring the
    /// diagonal to one. A coefficient `γ` fitted on these moments maps to
    /// `β_j = d_j γ_j` on the input scale.
    pub scale: Option<Vec<f64>>,
    /// Coordinates whose coefficient is held at zero.
    pub pinned: Vec<usize>,
}

impl PairwiseMoments {
    pub fn p(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn pinned_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.p()];
        for &j in &self.pinned {
            mask[j] = true;
        }
        mask
    }

    /// Maps a coefficient on the moment scale back to the data scale.
    pub fn unscale(&self, gamma: &[f64]) -> Vec<f64> {
        match &self.scale {
            Some(d) => gamma.iter().zip(d).map(|(g, d)| g * d).collect(),
            None => gamma.to_vec(),
        }
    }

    /// Writes `sigma.csv`, `counts.csv` and `c.csv` into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        write_matrix(&dir.join("sigma.csv"), self.sigma.nrows(), self.sigma.ncols(), |i, j| {
            self.sigma[(i, j)].to_string()
        })?;
        write_matrix(&dir.join("counts.csv"), self.counts.nrows(), self.counts.ncols(), |i, j| {
            self.counts[(i, j)].to_string()
        })?;
        let path = dir.join("c.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["c", "n"])?;
        for (v, n) in self.c.iter().zip(&self.c_counts) {
            w.write_record([v.to_string(), n.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

fn write_matrix(
    path: &Path,
    rows: usize,
    cols: usize,
    cell: impl Fn(usize, usize) -> String,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..rows {
        w.write_record((0..cols).map(|j| cell(i, j)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn check_overlap(counts: &DMatrix<usize>, pinned: &[bool]) -> Result<()> {
    let p = counts.nrows();
    for j in 0..p {
        if pinned[j] {
            continue;
        }
        for t in j..p {
            if !pinned[t] && counts[(j, t)] < 2 {
                return Err(Error::EmptyOverlap(j, t));
            }
        }
    }
    Ok(())
}

fn pinned_mask(ds: &BlockMissingDataset) -> Vec<bool> {
    let mut mask = vec![false; ds.p()];
    for &j in ds.degenerate_columns() {
        mask[j] = true;
    }
    mask
}

/// Zeroes the rows and columns of pinned coordinates, leaving a unit
/// diagonal so downstream combinations stay well defined.
fn neutralize_pinned(sigma: &mut DMatrix<f64>, c: &mut DVector<f64>, pinned: &[bool]) {
    let p = sigma.nrows();
    for j in (0..p).filter(|&j| pinned[j]) {
        for t in 0..p {
            sigma[(j, t)] = 0.0;
            sigma[(t, j)] = 0.0;
        }
        sigma[(j, j)] = 1.0;
        c[j] = 0.0;
    }
}

/// `σ̃_jt = (1/n_jt) Σ_{S_jt} x_ij x_it` and `c̃_j = (1/n_j) Σ_{S_j} y_i x_ij`.
pub fn pairwise_covariance(ds: &BlockMissingDataset) -> Result<PairwiseMoments> {
    let counts = observation_counts(ds);
    let pinned = pinned_mask(ds);
    check_overlap(&counts.pair, &pinned)?;
    // Missing cells hold zero, so the Gram matrix sums over S_jt only.
    let x = ds.x();
    let gram = x.tr_mul(x);
    let xty = x.tr_mul(ds.y());
    let p = ds.p();
    let mut sigma = DMatrix::from_fn(p, p, |j, t| {
        let n = counts.pair[(j, t)];
        if n == 0 {
            0.0
        } else {
            gram[(j, t)] / n as f64
        }
    });
    let mut c = DVector::from_fn(p, |j, _| {
        let n = counts.column[j];
        if n == 0 {
            0.0
        } else {
            xty[j] / n as f64
        }
    });
    neutralize_pinned(&mut sigma, &mut c, &pinned);
    Ok(PairwiseMoments {
        sigma,
        counts: counts.pair,
        c,
        c_counts: counts.column,
        robust: false,
        layout: ds.layout().clone(),
        scale: None,
        pinned: ds.degenerate_columns().to_vec(),
    })
}

fn huber_psi(z: f64, h: f64) -> f64 {
    z.clamp(-h, h)
}

fn estimating_fn(values: &[f64], h: f64, mu: f64) -> f64 {
    values.iter().map(|v| huber_psi(v - mu, h)).sum()
}

/// Bisection on a monotone predicate over `[lo, hi]`, where `pred(lo)` holds
/// and `pred(hi)` does not. Returns the bracket around the switch point.
fn bisect(mut lo: f64, mut hi: f64, pred: impl Fn(f64) -> bool) -> (f64, f64) {
    const TOL: f64 = 1e-10;
    for _ in 0..400 {
        if hi - lo <= TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi)
}

/// Huber M-estimate of location: the root of `Σ ψ_H(v_i − μ) = 0`.
///
/// The estimating function is continuous and non-increasing in `μ`, so its
/// root set is a closed interval; both ends are located by bisection and the
/// midpoint is returned.
pub fn huber_location(values: &[f64], h: f64) -> f64 {
    assert!(!values.is_empty(), "huber_location needs at least one value");
    assert!(h > 0.0, "Huber threshold must be positive");
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if min == max {
        return min;
    }
    let lo = min - h;
    let hi = max + h;
    let g = |mu: f64| estimating_fn(values, h, mu);
    // left end: smallest μ with g(μ) ≤ 0
    let (_, left) = bisect(lo, hi, |mu| g(mu) > 0.0);
    // right end: largest μ with g(μ) ≥ 0
    let (right, _) = bisect(lo, hi, |mu| g(mu) >= 0.0);
    0.5 * (left + right)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HuberMode {
    Fixed,
    Adaptive,
}

impl std::str::FromStr for HuberMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "adaptive" => Ok(Self::Adaptive),
            _ => Err(Error::InvalidArgument(format!("unknown Huber mode {s:?}"))),
        }
    }
}

/// Threshold rule for the robust moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberPolicy {
    pub mode: HuberMode,
    pub h_fixed: f64,
    pub c_sigma: f64,
    pub c_c: f64,
}

impl Default for HuberPolicy {
    fn default() -> Self {
        Self {
            mode: HuberMode::Adaptive,
            h_fixed: 1.345,
            c_sigma: 1.0,
            c_c: 1.0,
        }
    }
}

impl HuberPolicy {
    pub fn fixed(h: f64) -> Self {
        Self {
            mode: HuberMode::Fixed,
            h_fixed: h,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.h_fixed) && ok(self.c_sigma) && ok(self.c_c)) {
            return Err(Error::InvalidArgument(
                "Huber thresholds must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// `H_jt` for an entry of `Σ` estimated from `n` products.
    pub fn sigma_threshold(&self, n: usize, p: usize) -> f64 {
        match self.mode {
            HuberMode::Fixed => self.h_fixed,
            HuberMode::Adaptive => self.c_sigma * rate(n, p),
        }
    }

    /// `H_j` for an entry of `C` estimated from `n` products.
    pub fn c_threshold(&self, n: usize, p: usize) -> f64 {
        match self.mode {
            HuberMode::Fixed => self.h_fixed,
            HuberMode::Adaptive => self.c_c * rate(n, p),
        }
    }
}

fn rate(n: usize, p: usize) -> f64 {
    // log p vanishes at p = 1; the p = 2 value keeps the threshold finite.
    (n as f64 / (p.max(2) as f64).ln()).sqrt()
}

/// Robust moments: every `σ̆_jt` is the Huber location of the products
/// `{x_ij x_it : i ∈ S_jt}` and every `c̆_j` that of `{x_ij y_i : i ∈ S_j}`.
/// The result is rescaled to a unit diagonal; `scale` records the factors.
pub fn huber_moments(ds: &BlockMissingDataset, policy: &HuberPolicy) -> Result<PairwiseMoments> {
    policy.validate()?;
    let counts = observation_counts(ds);
    let mut pinned = pinned_mask(ds);
    check_overlap(&counts.pair, &pinned)?;
    let (n, p) = (ds.n(), ds.p());
    let layout = ds.layout();
    let labels = layout.labels();
    let k = layout.num_modalities();
    // Rows observing both modalities a and b.
    let rows: Vec<Vec<Vec<usize>>> = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| {
                    (0..n)
                        .filter(|&i| ds.block_observed(i, a) && ds.block_observed(i, b))
                        .collect()
                })
                .collect()
        })
        .collect();
    let x = ds.x();
    let upper: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut buf = Vec::with_capacity(n);
            (j..p)
                .map(|t| {
                    if pinned[j] || pinned[t] {
                        return 0.0;
                    }
                    let s = &rows[labels[j]][labels[t]];
                    buf.clear();
                    buf.extend(s.iter().map(|&i| x[(i, j)] * x[(i, t)]));
                    huber_location(&buf, policy.sigma_threshold(s.len(), p))
                })
                .collect()
        })
        .collect();
    let mut sigma = DMatrix::zeros(p, p);
    for (j, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            sigma[(j, j + off)] = v;
            sigma[(j + off, j)] = v;
        }
    }
    let y = ds.y();
    let mut c = DVector::from_iterator(
        p,
        (0..p).into_par_iter().map(|j| {
            if pinned[j] {
                return 0.0;
            }
            let s = &rows[labels[j]][labels[j]];
            let prods: Vec<f64> = s.iter().map(|&i| x[(i, j)] * y[i]).collect();
            huber_location(&prods, policy.c_threshold(s.len(), p))
        })
        .collect::<Vec<_>>(),
    );
    // A robust diagonal that collapses to zero cannot be rescaled.
    for j in 0..p {
        if !pinned[j] && sigma[(j, j)] <= 0.0 {
            log::warn!("robust variance of predictor {j} is zero; coefficient pinned");
            pinned[j] = true;
        }
    }
    let d: Vec<f64> = (0..p)
        .map(|j| if pinned[j] { 1.0 } else { 1.0 / sigma[(j, j)].sqrt() })
        .collect();
    for j in 0..p {
        for t in 0..p {
            sigma[(j, t)] *= d[j] * d[t];
        }
        c[j] *= d[j];
    }
    for j in (0..p).filter(|&j| !pinned[j]) {
        sigma[(j, j)] = 1.0;
    }
    neutralize_pinned(&mut sigma, &mut c, &pinned);
    Ok(PairwiseMoments {
        sigma,
        counts: counts.pair,
        c,
        c_counts: counts.column,
        robust: true,
        layout: layout.clone(),
        scale: Some(d),
        pinned: (0..p).filter(|&j| pinned[j]).collect(),
    })
}

/// Split of `Σ̃` into its intra-modality blocks and the cross-modality rest.
#[derive(Debug, Clone)]
pub struct MomentPartition {
    /// `Σ̃_{I_k}`, one square block per modality.
    pub intra: Vec<DMatrix<f64>>,
    /// `Σ̃_C`: `Σ̃` with the intra-modality blocks zeroed.
    pub cross: DMatrix<f64>,
    /// `Tr(Σ̃_{I_k})`.
    pub traces: Vec<f64>,
    pub layout: ModalityLayout,
}

impl MomentPartition {
    pub fn p(&self) -> usize {
        self.cross.nrows()
    }

    /// `blockdiag(Σ̃_{I_1}, …, Σ̃_{I_K})` as a dense `p × p` matrix.
    pub fn intra_embedded(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut out = DMatrix::zeros(p, p);
        for (k, block) in self.intra.iter().enumerate() {
            let r = self.layout.range(k);
            out.view_mut((r.start, r.start), (r.len(), r.len()))
                .copy_from(block);
        }
        out
    }

    /// `blockdiag(intra) + cross`, equal to the partitioned matrix.
    pub fn reassemble(&self) -> DMatrix<f64> {
        let mut out = self.cross.clone();
        for (k, block) in self.intra.iter().enumerate() {
            let r = self.layout.range(k);
            out.view_mut((r.start, r.start), (r.len(), r.len()))
                .copy_from(block);
        }
        out
    }
}

pub fn partition(m: &PairwiseMoments) -> MomentPartition {
    partition_matrix(&m.sigma, &m.layout)
}

/// Partitions an arbitrary symmetric matrix by `layout`.
pub fn partition_matrix(sigma: &DMatrix<f64>, layout: &ModalityLayout) -> MomentPartition {
    let mut cross = sigma.clone();
    let mut intra = Vec::with_capacity(layout.num_modalities());
    let mut traces = Vec::with_capacity(layout.num_modalities());
    for k in 0..layout.num_modalities() {
        let r = layout.range(k);
        let block = sigma.view((r.start, r.start), (r.len(), r.len())).into_owned();
        traces.push(block.trace());
        cross
            .view_mut((r.start, r.start), (r.len(), r.len()))
            .fill(0.0);
        intra.push(block);
    }
    MomentPartition {
        intra,
        cross,
        traces,
        layout: layout.clone(),
    }
}
