//! Hyperparameter selection on a complete validation holdout.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{standardize, BlockMissingDataset, StandardizationReport};
use crate::error::{Error, Result};
use crate::fusion::{
    cocolasso_correct_columns, combine_adapdiscom, fast_combine, fast_rates, is_psd_fast,
    min_eigenvalue, FastBounds, FusionWeights,
};
use crate::moments::{huber_moments, pairwise_covariance, partition, HuberPolicy, MomentPartition};
use crate::simulation::baselines::{baseline_complete_case, baseline_mean_impute, baseline_svd_impute};
use crate::solver::{lambda_path, predict, FitResult, LassoProblem, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Adapdiscom,
    Discom,
    FastAdapdiscom,
    FastDiscom,
    AdapdiscomHuber,
    DiscomHuber,
    FastAdapdiscomHuber,
    FastDiscomHuber,
    Cocolasso,
    LassoComplete,
    LassoMean,
    LassoSvd,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::Adapdiscom,
        Method::Discom,
        Method::FastAdapdiscom,
        Method::FastDiscom,
        Method::AdapdiscomHuber,
        Method::DiscomHuber,
        Method::FastAdapdiscomHuber,
        Method::FastDiscomHuber,
        Method::Cocolasso,
        Method::LassoComplete,
        Method::LassoMean,
        Method::LassoSvd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Adapdiscom => "adapdiscom",
            Method::Discom => "discom",
            Method::FastAdapdiscom => "fast-adapdiscom",
            Method::FastDiscom => "fast-discom",
            Method::AdapdiscomHuber => "adapdiscom-huber",
            Method::DiscomHuber => "discom-huber",
            Method::FastAdapdiscomHuber => "fast-adapdiscom-huber",
            Method::FastDiscomHuber => "fast-discom-huber",
            Method::Cocolasso => "cocolasso",
            Method::LassoComplete => "lasso-complete",
            Method::LassoMean => "lasso-mean",
            Method::LassoSvd => "lasso-svd",
        }
    }

    pub fn is_huber(self) -> bool {
        matches!(
            self,
            Method::AdapdiscomHuber
                | Method::DiscomHuber
                | Method::FastAdapdiscomHuber
                | Method::FastDiscomHuber
        )
    }

    /// Baselines that fill in missing cells.
    pub fn is_imputation(self) -> bool {
        matches!(self, Method::LassoMean | Method::LassoSvd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.name().to_string()
    }
}

/// Everything `tune` needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSpec {
    pub method: Method,
    /// Values tried on every weight axis.
    pub weight_grid: Vec<f64>,
    pub l0_points: usize,
    pub lambda_points: usize,
    pub lambda_ratio: f64,
    pub huber: HuberPolicy,
    /// Measurement-error variance per modality, on the input scale.
    pub tau2: Option<Vec<f64>>,
    pub cocolasso_sign: f64,
    pub solver: SolverOptions,
    pub svd_rank: usize,
    pub svd_iters: usize,
    /// Keep one table row per (combination, λ).
    pub keep_table: bool,
    /// Compute the minimum eigenvalue of every feasible combination.
    pub record_min_eig: bool,
}

impl TuneSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            weight_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            l0_points: 10,
            lambda_points: 30,
            lambda_ratio: 1e-2,
            huber: HuberPolicy::default(),
            tau2: None,
            cocolasso_sign: -1.0,
            solver: SolverOptions::default(),
            svd_rank: 10,
            svd_iters: 50,
            keep_table: true,
            record_min_eig: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_grid.is_empty()
            || self.weight_grid.iter().any(|&a| !(0.0..=1.0).contains(&a))
        {
            return Err(Error::InvalidArgument(
                "weight grid must be non-empty with values in [0, 1]".into(),
            ));
        }
        if self.l0_points == 0 {
            return Err(Error::InvalidArgument("l0_points must be ≥ 1".into()));
        }
        if let Some(t) = &self.tau2 {
            if t.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidArgument("tau2 must be non-negative".into()));
            }
        }
        self.huber.validate()?;
        self.solver.validate()
    }
}

/// One hyperparameter combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Combo {
    Weights { alpha: Vec<f64>, alpha_c: f64 },
    L0 { l0: f64 },
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub combo: Combo,
    pub lambda: Option<f64>,
    pub val_mse: Option<f64>,
    pub min_eig: Option<f64>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub method: Method,
    pub best: Combo,
    pub best_lambda: f64,
    pub validation_mse: f64,
    pub min_eig: Option<f64>,
    pub n_feasible: usize,
    pub n_candidates: usize,
    /// Fit at the selected combination. `beta` is on the standardized data
    /// scale.
    pub fit: FitResult,
    pub bounds: Option<FastBounds>,
    pub table: Vec<TableRow>,
}

/// Applies training centers and scales to a complete matrix.
pub fn transform_validation(
    val_x: &DMatrix<f64>,
    report: &StandardizationReport,
) -> Result<DMatrix<f64>> {
    report.transform(val_x)
}

/// Covariance source shared by all combinations of one method.
struct Prepared {
    part: Option<MomentPartition>,
    direct: Option<DMatrix<f64>>,
    counts: Option<DMatrix<usize>>,
    c: Vec<f64>,
    pinned: Vec<bool>,
    scale: Option<Vec<f64>>,
}

fn gram(x: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let s = x.tr_mul(x) / n;
    let c = (x.tr_mul(y) / n).as_slice().to_vec();
    (s, c)
}

fn pin_flat(s: &mut DMatrix<f64>, c: &mut [f64], mut pinned: Vec<bool>) -> Vec<bool> {
    let p = s.nrows();
    for j in 0..p {
        if !pinned[j] && s[(j, j)] <= 1e-12 {
            pinned[j] = true;
        }
        if pinned[j] {
            for t in 0..p {
                s[(j, t)] = 0.0;
                s[(t, j)] = 0.0;
            }
            s[(j, j)] = 1.0;
            c[j] = 0.0;
        }
    }
    pinned
}

fn prepare(train: &BlockMissingDataset, spec: &TuneSpec) -> Result<Prepared> {
    let p = train.p();
    let mut base_pinned = vec![false; p];
    for &j in train.degenerate_columns() {
        base_pinned[j] = true;
    }
    let direct = |s: DMatrix<f64>, c: Vec<f64>| {
        let (mut s, mut c) = (s, c);
        let pinned = pin_flat(&mut s, &mut c, base_pinned.clone());
        Prepared {
            part: None,
            direct: Some(s),
            counts: None,
            c,
            pinned,
            scale: None,
        }
    };
    match spec.method {
        Method::LassoComplete => {
            let cc = baseline_complete_case(train)?;
            let (s, c) = gram(cc.x(), cc.y());
            Ok(direct(s, c))
        }
        Method::LassoMean => {
            let x = baseline_mean_impute(train);
            let (s, c) = gram(&x, train.y());
            Ok(direct(s, c))
        }
        Method::LassoSvd => {
            let x = baseline_svd_impute(train, spec.svd_rank, spec.svd_iters)?.matrix;
            let (s, c) = gram(&x, train.y());
            Ok(direct(s, c))
        }
        m => {
            let moments = if m.is_huber() {
                huber_moments(train, &spec.huber)?
            } else {
                pairwise_covariance(train)?
            };
            let pinned = moments.pinned_mask();
            Ok(Prepared {
                part: Some(partition(&moments)),
                direct: None,
                c: moments.c.as_slice().to_vec(),
                pinned,
                scale: moments.scale.clone(),
                counts: Some(moments.counts),
            })
        }
    }
}

fn fast_bounds_for(prep: &Prepared, method: Method) -> Result<FastBounds> {
    let part = prep.part.as_ref().expect("moment-based method");
    let counts = prep.counts.as_ref().expect("moment-based method");
    let (mut m, m_c) = fast_rates(counts, part)?;
    if matches!(method, Method::FastDiscom | Method::FastDiscomHuber) {
        // one rate from the smallest per-predictor count
        let p = part.p();
        let n_min = (0..p).map(|j| counts[(j, j)]).min().unwrap();
        let rate = ((p.max(2) as f64).ln() / n_min as f64).sqrt();
        m = vec![rate; m.len()];
    }
    match FastBounds::from_rates(part, m.clone(), m_c) {
        Ok(b) => Ok(b),
        Err(e @ (Error::NonPositiveDenominator(_) | Error::OutOfRange { .. })) => {
            log::warn!("{e}; falling back to a PSD-checked grid on [0, 1/m_C]");
            Ok(FastBounds::fallback(m, m_c))
        }
        Err(e) => Err(e),
    }
}

/// Hyperparameter combinations the method searches over.
pub fn enumerate_combos(
    spec: &TuneSpec,
    k: usize,
    bounds: Option<&FastBounds>,
) -> Vec<Combo> {
    let g = &spec.weight_grid;
    match spec.method {
        Method::Adapdiscom | Method::AdapdiscomHuber => {
            let mut out = Vec::with_capacity(g.len().pow(k as u32 + 1));
            let mut idx = vec![0usize; k];
            loop {
                let alpha: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
                for &ac in g {
                    out.push(Combo::Weights {
                        alpha: alpha.clone(),
                        alpha_c: ac,
                    });
                }
                // odometer over the K block weights
                let mut pos = k;
                loop {
                    if pos == 0 {
                        return out;
                    }
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < g.len() {
                        break;
                    }
                    idx[pos] = 0;
                }
            }
        }
        Method::Discom | Method::DiscomHuber => g
            .iter()
            .flat_map(|&a| {
                g.iter().map(move |&ac| Combo::Weights {
                    alpha: vec![a; k],
                    alpha_c: ac,
                })
            })
            .collect(),
        Method::FastAdapdiscom
        | Method::FastDiscom
        | Method::FastAdapdiscomHuber
        | Method::FastDiscomHuber => bounds
            .expect("fast methods need bounds")
            .grid(spec.l0_points)
            .into_iter()
            .map(|l0| Combo::L0 { l0 })
            .collect(),
        Method::Cocolasso | Method::LassoComplete | Method::LassoMean | Method::LassoSvd => {
            vec![Combo::Single]
        }
    }
}

struct Evaluated {
    rows: Vec<TableRow>,
    best: Option<(usize, f64, FitResult)>,
    feasible: bool,
}

struct Context<'a> {
    train: &'a BlockMissingDataset,
    val_x: &'a DMatrix<f64>,
    val_y: &'a DVector<f64>,
    spec: &'a TuneSpec,
    prep: Prepared,
    bounds: Option<FastBounds>,
    lambdas: Vec<f64>,
}

impl Context<'_> {
    fn matrix(&self, combo: &Combo) -> Result<DMatrix<f64>> {
        match combo {
            Combo::Weights { alpha, alpha_c } => {
                let part = self.prep.part.as_ref().expect("moment-based method");
                let w = FusionWeights::new(alpha.clone(), *alpha_c, &part.traces, part.p())?;
                Ok(combine_adapdiscom(part, &w).matrix)
            }
            Combo::L0 { l0 } => {
                let part = self.prep.part.as_ref().expect("moment-based method");
                Ok(fast_combine(part, self.bounds.as_ref().unwrap(), *l0)?.matrix)
            }
            Combo::Single => match (&self.prep.direct, self.spec.method) {
                (Some(s), _) => Ok(s.clone()),
                (None, Method::Cocolasso) => {
                    let part = self.prep.part.as_ref().unwrap();
                    let tau2 = self.spec.tau2.as_ref().ok_or_else(|| {
                        Error::InvalidArgument("cocolasso needs measurement-error variances".into())
                    })?;
                    let layout = self.train.layout();
                    if tau2.len() != layout.num_modalities() {
                        return Err(Error::Dimension(format!(
                            "{} error variances for {} modalities",
                            tau2.len(),
                            layout.num_modalities()
                        )));
                    }
                    // error variance of a standardized column is τ²·scale²
                    let scales = self
                        .train
                        .standardization()
                        .map(|r| r.scales.clone())
                        .unwrap_or_else(|| vec![1.0; self.train.p()]);
                    let per_col: Vec<f64> = layout
                        .labels()
                        .iter()
                        .zip(&scales)
                        .map(|(&k, s)| tau2[k] * s * s)
                        .collect();
                    let mut out = cocolasso_correct_columns(
                        &part.reassemble(),
                        &per_col,
                        self.spec.cocolasso_sign,
                    )?
                    .matrix;
                    let mut c = self.prep.c.clone();
                    pin_flat(&mut out, &mut c, self.prep.pinned.clone());
                    Ok(out)
                }
                _ => unreachable!("single combination without a direct covariance"),
            },
        }
    }

    fn val_mse(&self, beta_moment_scale: &[f64]) -> Result<f64> {
        let beta = self.unscale(beta_moment_scale);
        let n = self.val_y.len();
        if self.val_x.shape() != (n, beta.len()) {
            return Err(Error::Shape(format!(
                "validation matrix {:?} for {} rows and {} coefficients",
                self.val_x.shape(),
                n,
                beta.len()
            )));
        }
        // sparse product over the support, column by column
        let data = self.val_x.as_slice();
        let mut resid = self.val_y.as_slice().to_vec();
        for (j, &b) in beta.iter().enumerate().filter(|(_, b)| **b != 0.0) {
            for (r, x) in resid.iter_mut().zip(&data[j * n..(j + 1) * n]) {
                *r -= x * b;
            }
        }
        Ok(resid.iter().map(|r| r * r).sum::<f64>() / n as f64)
    }

    fn unscale(&self, gamma: &[f64]) -> Vec<f64> {
        match &self.prep.scale {
            Some(d) => gamma.iter().zip(d).map(|(g, d)| g * d).collect(),
            None => gamma.to_vec(),
        }
    }

    fn pinned(&self) -> Vec<bool> {
        let mut pinned = self.prep.pinned.clone();
        if let Some(s) = &self.prep.direct {
            for j in 0..pinned.len() {
                pinned[j] |= s[(j, j)] <= 0.0;
            }
        }
        pinned
    }

    fn evaluate(&self, combo: &Combo) -> Result<Evaluated> {
        let s = self.matrix(combo)?;
        let feasible = self.spec.solver.allow_indefinite || is_psd_fast(&s);
        let min_eig = if self.spec.record_min_eig {
            Some(min_eigenvalue(&s)?)
        } else {
            None
        };
        if !feasible {
            let rows = if self.spec.keep_table {
                vec![TableRow {
                    combo: combo.clone(),
                    lambda: None,
                    val_mse: None,
                    min_eig,
                    feasible: false,
                }]
            } else {
                Vec::new()
            };
            return Ok(Evaluated {
                rows,
                best: None,
                feasible: false,
            });
        }
        let mut pinned = self.pinned();
        for j in 0..pinned.len() {
            pinned[j] |= s[(j, j)] <= 0.0;
        }
        let prob = LassoProblem::new(&s, &self.prep.c, pinned)?;
        let mut rows = Vec::new();
        let mut best: Option<(usize, f64, FitResult)> = None;
        let mut warm: Option<Vec<f64>> = None;
        for (i, &lambda) in self.lambdas.iter().enumerate() {
            let fit = prob
                .solve(lambda, warm.as_deref(), &self.spec.solver)
                .map_err(|e| Error::Path {
                    index: i,
                    source: Box::new(e),
                })?;
            let mse = self.val_mse(&fit.beta)?;
            if self.spec.keep_table {
                rows.push(TableRow {
                    combo: combo.clone(),
                    lambda: Some(lambda),
                    val_mse: Some(mse),
                    min_eig,
                    feasible: true,
                });
            }
            // strict improvement keeps the larger λ on ties
            if best.as_ref().map_or(true, |b| mse < b.1) {
                best = Some((i, mse, fit.clone()));
            }
            warm = Some(fit.beta);
        }
        Ok(Evaluated {
            rows,
            best,
            feasible: true,
        })
    }
}

/// Grid search over the method's hyperparameters, scored by validation MSE.
///
/// `train` must be standardized; `val_x` must already carry the training
/// transformation and `val_y` the training response center.
pub fn tune(
    train: &BlockMissingDataset,
    val_x: &DMatrix<f64>,
    val_y: &DVector<f64>,
    spec: &TuneSpec,
) -> Result<TuneResult> {
    let (ctx, combos) = setup(train, val_x, val_y, spec)?;
    tune_combos(&ctx, combos)
}

/// As [`tune`] with an explicit candidate list.
pub fn tune_with_combos(
    train: &BlockMissingDataset,
    val_x: &DMatrix<f64>,
    val_y: &DVector<f64>,
    spec: &TuneSpec,
    combos: Vec<Combo>,
) -> Result<TuneResult> {
    let (ctx, _) = setup(train, val_x, val_y, spec)?;
    tune_combos(&ctx, combos)
}

fn setup<'a>(
    train: &'a BlockMissingDataset,
    val_x: &'a DMatrix<f64>,
    val_y: &'a DVector<f64>,
    spec: &'a TuneSpec,
) -> Result<(Context<'a>, Vec<Combo>)> {
    spec.validate()?;
    if val_x.ncols() != train.p() || val_x.nrows() != val_y.len() || val_y.is_empty() {
        return Err(Error::Shape(format!(
            "validation set is {:?} with {} responses; training has {} columns",
            val_x.shape(),
            val_y.len(),
            train.p()
        )));
    }
    let prep = prepare(train, spec)?;
    let bounds = match spec.method {
        Method::FastAdapdiscom
        | Method::FastDiscom
        | Method::FastAdapdiscomHuber
        | Method::FastDiscomHuber => Some(fast_bounds_for(&prep, spec.method)?),
        _ => None,
    };
    let lambdas = lambda_path(&prep.c, spec.lambda_points, spec.lambda_ratio)?.values;
    let combos = enumerate_combos(spec, train.layout().num_modalities(), bounds.as_ref());
    Ok((
        Context {
            train,
            val_x,
            val_y,
            spec,
            prep,
            bounds,
            lambdas,
        },
        combos,
    ))
}

fn tune_combos(ctx: &Context<'_>, combos: Vec<Combo>) -> Result<TuneResult> {
    let results: Vec<Result<Evaluated>> = combos.par_iter().map(|c| ctx.evaluate(c)).collect();
    let mut table = Vec::new();
    let mut n_feasible = 0;
    let mut best: Option<(usize, usize, f64, FitResult)> = None;
    let mut tied: Vec<usize> = Vec::new();
    for (ci, r) in results.into_iter().enumerate() {
        let ev = r?;
        table.extend(ev.rows);
        if !ev.feasible {
            continue;
        }
        n_feasible += 1;
        let Some((li, mse, fit)) = ev.best else { continue };
        match &best {
            None => {
                best = Some((ci, li, mse, fit));
                tied = vec![ci];
            }
            Some((_, bli, bmse, _)) => {
                if mse < *bmse || (mse == *bmse && li < *bli) {
                    best = Some((ci, li, mse, fit));
                    tied = vec![ci];
                } else if mse == *bmse && li == *bli {
                    tied.push(ci);
                }
            }
        }
    }
    let Some((mut ci, _, mse, mut fit)) = best else {
        return Err(Error::NoFeasibleCombination);
    };
    let mut min_eig = None;
    if tied.len() > 1 {
        // equal MSE and λ: prefer the better-conditioned covariance
        let mut top = f64::NEG_INFINITY;
        for &t in &tied {
            let v = min_eigenvalue(&ctx.matrix(&combos[t])?)?;
            if v > top {
                top = v;
                ci = t;
            }
        }
        let ev = ctx.evaluate(&combos[ci])?;
        fit = ev.best.expect("tied combination is feasible").2;
        min_eig = Some(top);
    }
    if min_eig.is_none() {
        min_eig = Some(min_eigenvalue(&ctx.matrix(&combos[ci])?)?);
    }
    let best_lambda = fit.lambda;
    fit.beta = ctx.unscale(&fit.beta);
    Ok(TuneResult {
        method: ctx.spec.method,
        best: combos[ci].clone(),
        best_lambda,
        validation_mse: mse,
        min_eig,
        n_feasible,
        n_candidates: combos.len(),
        fit,
        bounds: ctx.bounds.clone(),
        table,
    })
}

/// A fitted model on the input scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub tune: TuneResult,
    pub standardization: StandardizationReport,
    pub beta_raw: Vec<f64>,
    pub intercept: f64,
}

impl FittedModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(predict(x, &self.beta_raw)?.add_scalar(self.intercept))
    }
}

/// Standardizes raw training data, carries the validation set into the
/// same coordinates, tunes, and maps the coefficients back.
pub fn fit_method(
    train_raw: &BlockMissingDataset,
    val_x_raw: &DMatrix<f64>,
    val_y_raw: &DVector<f64>,
    spec: &TuneSpec,
) -> Result<FittedModel> {
    let (train, report) = standardize(train_raw)?;
    let val_x = transform_validation(val_x_raw, &report)?;
    let val_y = report.center_response(val_y_raw);
    let tune = tune(&train, &val_x, &val_y, spec)?;
    let (beta_raw, intercept) = report.to_raw(&tune.fit.beta);
    Ok(FittedModel {
        tune,
        standardization: report,
        beta_raw,
        intercept,
    })
}
