//! Command-line front end: `fit`, `simulate` and `report`.
//!
//! Exit codes: 0 on success, 2 on input or configuration errors, 3 when no
//! hyperparameter combination is feasible or no validation rows exist.

mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_complete, load_dataset, standardize, ModalityLayout, ResponseSource};
use crate::error::{Error, Result};
use crate::moments::{huber_moments, pairwise_covariance, HuberMode, HuberPolicy};
use crate::simulation::experiment::{default_methods, summarize, write_results, write_summary};
use crate::simulation::{run_experiment, ExperimentConfig, ScenarioId, ScenarioSpec};
use crate::solver::{FitResult, SolverOptions};
use crate::tuning::{fit_method, Combo, FittedModel, Method, TableRow, TuneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "adapdiscom", version, about = "Sparse regression for block-missing multimodal data")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one method to a CSV dataset.
    Fit(FitArgs),
    /// Run a simulation scenario and write results.csv.
    Simulate(SimulateArgs),
    /// Merge results tables into a summary and ranking.
    Report(ReportArgs),
}

/// Tuning options shared by `fit` and `simulate`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct TuneArgs {
    /// Weight grid values, comma separated.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    l0_points: Option<usize>,
    #[arg(long)]
    lambda_points: Option<usize>,
    #[arg(long)]
    lambda_ratio: Option<f64>,
    /// fixed | adaptive
    #[arg(long)]
    huber_mode: Option<String>,
    #[arg(long)]
    huber_h: Option<f64>,
    #[arg(long)]
    huber_c_sigma: Option<f64>,
    #[arg(long)]
    huber_c_c: Option<f64>,
    /// Sign of the measurement-error correction (-1 or 1).
    #[arg(long, allow_hyphen_values = true)]
    cocolasso_sign: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    #[arg(long)]
    svd_rank: Option<usize>,
    #[arg(long)]
    svd_iters: Option<usize>,
    /// Accept indefinite covariance estimates.
    #[arg(long)]
    #[serde(default)]
    allow_indefinite: bool,
}

macro_rules! merge_opts {
    ($a:expr, $b:expr; $($f:ident),*) => {
        $( if $a.$f.is_none() { $a.$f = $b.$f.clone(); } )*
    };
}

impl TuneArgs {
    fn merge(&mut self, other: &TuneArgs) {
        merge_opts!(self, other; grid, l0_points, lambda_points, lambda_ratio, huber_mode,
            huber_h, huber_c_sigma, huber_c_c, cocolasso_sign, tol, max_sweeps, svd_rank, svd_iters);
        self.allow_indefinite |= other.allow_indefinite;
    }

    fn apply(&self, spec: &mut TuneSpec) -> Result<()> {
        if let Some(g) = &self.grid {
            spec.weight_grid = parse_list(g)?;
        }
        if let Some(v) = self.l0_points {
            spec.l0_points = v;
        }
        if let Some(v) = self.lambda_points {
            spec.lambda_points = v;
        }
        if let Some(v) = self.lambda_ratio {
            spec.lambda_ratio = v;
        }
        let mut huber = HuberPolicy::default();
        if let Some(m) = &self.huber_mode {
            huber.mode = m.parse::<HuberMode>()?;
        }
        if let Some(v) = self.huber_h {
            huber.h_fixed = v;
        }
        if let Some(v) = self.huber_c_sigma {
            huber.c_sigma = v;
        }
        if let Some(v) = self.huber_c_c {
            huber.c_c = v;
        }
        spec.huber = huber;
        if let Some(v) = self.cocolasso_sign {
            spec.cocolasso_sign = v;
        }
        let mut solver = SolverOptions::default();
        if let Some(v) = self.tol {
            solver.tol = v;
        }
        if let Some(v) = self.max_sweeps {
            solver.max_sweeps = v;
        }
        solver.allow_indefinite = self.allow_indefinite;
        spec.solver = solver;
        if let Some(v) = self.svd_rank {
            spec.svd_rank = v;
        }
        if let Some(v) = self.svd_iters {
            spec.svd_iters = v;
        }
        spec.validate()
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct FitArgs {
    /// Predictor CSV (response in the last column unless --response-file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Block sizes, e.g. 100,100,100.
    #[arg(long)]
    modalities: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// Single-column response file.
    #[arg(long)]
    response_file: Option<PathBuf>,
    /// Share of complete rows held out for validation.
    #[arg(long)]
    validation: Option<f64>,
    /// Complete validation CSV with the response in the last column.
    #[arg(long)]
    validation_file: Option<PathBuf>,
    /// Measurement-error variance per modality (cocolasso).
    #[arg(long)]
    tau2: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write sigma.csv, counts.csv and c.csv.
    #[arg(long)]
    #[serde(default)]
    dump_moments: bool,
    /// Record the minimum eigenvalue of every feasible combination.
    #[arg(long)]
    #[serde(default)]
    min_eig: bool,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    tune: TuneArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct SimulateArgs {
    /// I, II, III, IV, V, VI or VII.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Error level, or one variance per modality.
    #[arg(long)]
    tau2: Option<String>,
    /// Comma-separated method names.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    complete_fraction: Option<f64>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock time per fit.
    #[arg(long)]
    #[serde(default)]
    timing: bool,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    tune: TuneArgs,
}

#[derive(Debug, Clone, Args)]
struct ReportArgs {
    /// One or more results.csv files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number {v:?} in list")))
        })
        .collect()
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn missing(flag: &str, cmd: &str) -> Error {
    Error::InvalidArgument(format!(
        "missing required --{flag}\n\nUsage: adapdiscom {cmd} --help"
    ))
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INPUT,
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_INPUT;
        }
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => report::cmd_report(&a.inputs, &a.out),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NoFeasibleCombination => EXIT_INFEASIBLE,
                _ => EXIT_INPUT,
            }
        }
    }
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub method: Method,
    pub modalities: Vec<usize>,
    #[serde(flatten)]
    pub fit: FitResult,
    pub hyperparameters: Combo,
    pub validation_mse: f64,
    pub n_feasible: usize,
    pub n_candidates: usize,
    pub min_eig: Option<f64>,
    pub bounds: Option<crate::fusion::FastBounds>,
    pub standardization: crate::datamodel::StandardizationReport,
    pub beta_raw: Vec<f64>,
    pub intercept: f64,
    pub validation: ValidationSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ValidationSource {
    /// Rows (0-based, in file order) held out from the data file.
    Split { rows: Vec<usize> },
    File { path: PathBuf },
}

fn cmd_fit(mut args: FitArgs) -> Result<i32> {
    if let Some(cfg) = args.config.clone() {
        let file: FitArgs = read_config(&cfg)?;
        merge_opts!(args, file; data, modalities, method, response_file, validation,
            validation_file, tau2, out);
        args.dump_moments |= file.dump_moments;
        args.min_eig |= file.min_eig;
        args.tune.merge(&file.tune);
    }
    let data = args.data.clone().ok_or_else(|| missing("data", "fit"))?;
    let layout = ModalityLayout::parse(&args.modalities.clone().ok_or_else(|| missing("modalities", "fit"))?)?;
    let method: Method = args.method.clone().ok_or_else(|| missing("method", "fit"))?.parse()?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut spec = TuneSpec::new(method);
    args.tune.apply(&mut spec)?;
    spec.record_min_eig = args.min_eig;
    if let Some(t) = &args.tau2 {
        spec.tau2 = Some(parse_list(t)?);
    }

    let response = match &args.response_file {
        Some(p) => ResponseSource::File(p),
        None => ResponseSource::LastColumn,
    };
    let ds = load_dataset(&data, &layout, &response)?;

    let (train, val_x, val_y, source) = match &args.validation_file {
        Some(path) => {
            let (vx, vy) = load_complete(path, layout.num_predictors())?;
            (ds, vx, vy, ValidationSource::File { path: path.clone() })
        }
        None => {
            let frac = args.validation.unwrap_or(0.2);
            if !(frac > 0.0 && frac < 1.0) {
                return Err(Error::InvalidArgument("--validation must lie in (0, 1)".into()));
            }
            let complete: Vec<usize> = (0..ds.n()).filter(|&i| ds.is_complete_row(i)).collect();
            if complete.is_empty() {
                eprintln!("error: no complete rows to hold out for validation; pass --validation-file");
                return Ok(EXIT_INFEASIBLE);
            }
            let k = ((frac * complete.len() as f64).round() as usize).clamp(1, complete.len());
            let held: Vec<usize> = complete[complete.len() - k..].to_vec();
            let keep: Vec<usize> = (0..ds.n()).filter(|i| !held.contains(i)).collect();
            let vx = DMatrix::from_fn(held.len(), ds.p(), |r, j| ds.x()[(held[r], j)]);
            let vy = DVector::from_fn(held.len(), |r, _| ds.y()[held[r]]);
            (ds.select_rows(&keep)?, vx, vy, ValidationSource::Split { rows: held })
        }
    };

    if args.dump_moments {
        let (std, _) = standardize(&train)?;
        let m = if method.is_huber() {
            huber_moments(&std, &spec.huber)?
        } else {
            pairwise_covariance(&std)?
        };
        m.dump(&out)?;
    }

    let fitted = fit_method(&train, &val_x, &val_y, &spec)?;
    write_tuning_csv(&out.join("tuning.csv"), &fitted, layout.num_modalities())?;
    let report = FitReport {
        method,
        modalities: layout.sizes().to_vec(),
        fit: fitted.tune.fit.clone(),
        hyperparameters: fitted.tune.best.clone(),
        validation_mse: fitted.tune.validation_mse,
        n_feasible: fitted.tune.n_feasible,
        n_candidates: fitted.tune.n_candidates,
        min_eig: fitted.tune.min_eig,
        bounds: fitted.tune.bounds.clone(),
        standardization: fitted.standardization.clone(),
        beta_raw: fitted.beta_raw.clone(),
        intercept: fitted.intercept,
        validation: source,
    };
    let path = out.join("fit.json");
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    log::info!(
        "{method}: lambda = {:.4e}, validation mse = {:.6}",
        report.fit.lambda,
        report.validation_mse
    );
    Ok(EXIT_OK)
}

fn write_tuning_csv(path: &Path, fitted: &FittedModel, k: usize) -> Result<()> {
    let tune = &fitted.tune;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["method".into()];
    match &tune.best {
        Combo::Weights { .. } => {
            header.extend((1..=k).map(|i| format!("alpha_{i}")));
            header.push("alpha_C".into());
        }
        Combo::L0 { .. } => {
            header.push("l0".into());
            header.push("alpha_C".into());
        }
        Combo::Single => {}
    }
    header.extend(["lambda", "val_mse", "min_eig", "feasible"].map(String::from));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for row in &tune.table {
        let TableRow {
            combo,
            lambda,
            val_mse,
            min_eig,
            feasible,
        } = row;
        let mut rec = vec![tune.method.name().to_string()];
        match combo {
            Combo::Weights { alpha, alpha_c } => {
                rec.extend(alpha.iter().map(|a| a.to_string()));
                rec.push(alpha_c.to_string());
            }
            Combo::L0 { l0 } => {
                rec.push(l0.to_string());
                let m_c = tune.bounds.as_ref().map_or(0.0, |b| b.m_c);
                rec.push((1.0 - l0 * m_c).clamp(0.0, 1.0).to_string());
            }
            Combo::Single => {}
        }
        rec.extend([opt(*lambda), opt(*val_mse), opt(*min_eig), feasible.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_simulate(mut args: SimulateArgs) -> Result<i32> {
    if let Some(cfg) = args.config.clone() {
        let file: SimulateArgs = read_config(&cfg)?;
        merge_opts!(args, file; scenario, n, p, reps, seed, tau2, methods, complete_fraction,
            n_val, n_test, out);
        args.timing |= file.timing;
        args.tune.merge(&file.tune);
    }
    let id: ScenarioId = args.scenario.clone().ok_or_else(|| missing("scenario", "simulate"))?.parse()?;
    let n = args.n.ok_or_else(|| missing("n", "simulate"))?;
    let reps = args.reps.ok_or_else(|| missing("reps", "simulate"))?;
    let seed = args.seed.ok_or_else(|| missing("seed", "simulate"))?;
    let p = args.p.unwrap_or(300);
    let mut scenario = ScenarioSpec::new(id, n, p, 0.0, seed);
    if let Some(t) = &args.tau2 {
        let v = parse_list(t)?;
        scenario = match v.as_slice() {
            [level] => ScenarioSpec::new(id, n, p, *level, seed),
            _ => ScenarioSpec {
                tau2: v,
                ..scenario
            },
        };
    }
    if let Some(f) = args.complete_fraction {
        scenario.complete_fraction = f;
    }
    if let Some(v) = args.n_val {
        scenario.n_val = v;
    }
    if let Some(v) = args.n_test {
        scenario.n_test = v;
    }
    scenario.validate()?;

    let mut methods = match &args.methods {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<Method>())
            .collect::<Result<Vec<_>>>()?,
        None => default_methods(id),
    };
    if id == ScenarioId::IV {
        let before = methods.len();
        methods.retain(|m| !m.is_imputation());
        if methods.len() < before {
            log::warn!("scenario IV has no missing data; imputation baselines excluded");
        }
        if methods.is_empty() {
            return Err(Error::InvalidArgument("no methods left to run".into()));
        }
    }

    let mut tune = TuneSpec::new(Method::Adapdiscom);
    args.tune.apply(&mut tune)?;
    tune.keep_table = false;
    let cfg = ExperimentConfig {
        scenario,
        methods,
        reps,
        seed,
        tune,
        timing: args.timing,
    };
    let rows = run_experiment(&cfg)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_results(&out.join("results.csv"), &rows)?;
    write_summary(&out.join("summary.csv"), &summarize(&rows))?;
    Ok(EXIT_OK)
}
