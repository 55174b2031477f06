//! Scenario generators for the benchmark study.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::datamodel::{BlockMissingDataset, ModalityLayout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScenarioId {
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 7] = [
        ScenarioId::I,
        ScenarioId::II,
        ScenarioId::III,
        ScenarioId::IV,
        ScenarioId::V,
        ScenarioId::VI,
        ScenarioId::VII,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::I => "I",
            ScenarioId::II => "II",
            ScenarioId::III => "III",
            ScenarioId::IV => "IV",
            ScenarioId::V => "V",
            ScenarioId::VI => "VI",
            ScenarioId::VII => "VII",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario {s:?}")))
    }
}

impl TryFrom<String> for ScenarioId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScenarioId> for String {
    fn from(id: ScenarioId) -> Self {
        id.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    Gaussian,
    Student5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    /// Measurement-error variance per modality.
    pub tau2: Vec<f64>,
    /// Share of complete training rows; only read by scenario VII.
    pub complete_fraction: f64,
    pub noise: Noise,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Defaults for a scenario at error level `level`: homogeneous errors,
    /// except scenario III where the first two modalities are fixed at 0.2
    /// and 0.5 and `level` applies to the third.
    pub fn new(id: ScenarioId, n: usize, p: usize, level: f64, seed: u64) -> Self {
        let k = 3;
        let tau2 = match id {
            ScenarioId::III => vec![0.2, 0.5, level],
            _ => vec![level; k],
        };
        Self {
            id,
            n,
            p,
            k,
            tau2,
            complete_fraction: 0.25,
            noise: if id == ScenarioId::VI {
                Noise::Student5
            } else {
                Noise::Gaussian
            },
            n_val: 200,
            n_test: 400,
            seed,
        }
    }

    pub fn layout(&self) -> Result<ModalityLayout> {
        if self.k == 0 || self.p % self.k != 0 {
            return Err(Error::Dimension(format!(
                "p = {} must split evenly into {} modalities",
                self.p, self.k
            )));
        }
        ModalityLayout::uniform(self.k, self.p / self.k)
    }

    /// Label of the error level used in result tables: the last modality's
    /// variance.
    pub fn tau2_label(&self) -> f64 {
        self.tau2.last().copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        if self.tau2.len() != self.k {
            return Err(Error::Dimension(format!(
                "{} error variances for {} modalities",
                self.tau2.len(),
                self.k
            )));
        }
        if self.tau2.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::InvalidArgument("tau2 must be non-negative".into()));
        }
        let groups = self.k + 1;
        let patterned = !matches!(self.id, ScenarioId::IV | ScenarioId::VII);
        if patterned && self.n % groups != 0 {
            return Err(Error::Dimension(format!(
                "n = {} must be divisible by {groups} for the block-missing pattern",
                self.n
            )));
        }
        if self.id == ScenarioId::VII && !(self.complete_fraction > 0.0 && self.complete_fraction <= 1.0) {
            return Err(Error::InvalidArgument(
                "complete_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.n < 2 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Dimension("sample sizes too small".into()));
        }
        Ok(())
    }
}

/// True coefficients and support.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueModel {
    pub beta0: Vec<f64>,
    pub support: Vec<usize>,
}

impl TrueModel {
    pub fn s(&self) -> usize {
        self.support.len()
    }
}

/// Five coefficients of 0.5 at the head of every modality; modalities with
/// fewer than five predictors get a proportional count (at least one).
pub fn true_model(layout: &ModalityLayout) -> TrueModel {
    let mut beta0 = vec![0.0; layout.num_predictors()];
    let mut support = Vec::new();
    for k in 0..layout.num_modalities() {
        let r = layout.range(k);
        let s = if r.len() >= 5 {
            5
        } else {
            log::warn!("modality {k} has {} predictors; using one nonzero", r.len());
            1
        };
        for j in r.start..r.start + s {
            beta0[j] = 0.5;
            support.push(j);
        }
    }
    TrueModel { beta0, support }
}

pub fn ar_matrix(size: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(size, size, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Block-diagonal repetition of `0.15·1 + 0.85·I` in 5×5 blocks; a trailing
/// partial block is the leading corner of a full one.
pub fn block_matrix(size: usize) -> DMatrix<f64> {
    DMatrix::from_fn(size, size, |i, j| {
        if i == j {
            1.0
        } else if i / 5 == j / 5 {
            0.15
        } else {
            0.0
        }
    })
}

/// `AR(0.8)₃ ⊗ AR(0.3)_q` with `q = ⌈size/3⌉`, truncated to its leading
/// `size × size` principal submatrix.
pub fn kronecker_matrix(size: usize) -> DMatrix<f64> {
    let q = size.div_ceil(3);
    let a = ar_matrix(3, 0.8);
    let b = ar_matrix(q, 0.3);
    let full = a.kronecker(&b);
    full.view((0, 0), (size, size)).into_owned()
}

/// Population covariance of modality `k` under a Gaussian scenario.
pub fn gen_covariance(id: ScenarioId, k: usize, size: usize) -> Result<DMatrix<f64>> {
    if size == 0 {
        return Err(Error::Dimension("empty modality".into()));
    }
    match (id, k) {
        (ScenarioId::V | ScenarioId::VI, 2) => Ok(ar_matrix(size, 0.6) * 0.6),
        // covariance of the two-component mixture
        (ScenarioId::V | ScenarioId::VI, 0 | 1) => {
            Ok(DMatrix::identity(size, size) * (0.03 + 0.97 * 0.5))
        }
        (ScenarioId::I | ScenarioId::VII, _) | (_, 0) => Ok(ar_matrix(size, 0.6)),
        (ScenarioId::II | ScenarioId::III | ScenarioId::IV, 1) => Ok(block_matrix(size)),
        (ScenarioId::II | ScenarioId::III | ScenarioId::IV, 2) => Ok(kronecker_matrix(size)),
        _ => Err(Error::Dimension(format!(
            "scenario {id} defines three modalities, asked for modality {k}"
        ))),
    }
}

/// Generated data for one replicate.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    /// Training set with measurement error and missingness applied.
    pub train: BlockMissingDataset,
    /// Training predictors before contamination and masking.
    pub train_clean: DMatrix<f64>,
    pub val_x: DMatrix<f64>,
    pub val_y: DVector<f64>,
    pub test_x: DMatrix<f64>,
    pub test_y: DVector<f64>,
    pub truth: TrueModel,
}

const STREAM_TRAIN_X: u64 = 0;
const STREAM_TRAIN_NOISE: u64 = 1;
const STREAM_ERROR: u64 = 2;
const STREAM_VAL: u64 = 3;
const STREAM_TEST: u64 = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Sampler {
    id: ScenarioId,
    layout: ModalityLayout,
    /// Cholesky factors, one per modality, or a single full factor.
    factors: Vec<DMatrix<f64>>,
}

impl Sampler {
    fn new(id: ScenarioId, layout: &ModalityLayout) -> Result<Self> {
        let chol = |m: DMatrix<f64>| -> Result<DMatrix<f64>> {
            Ok(nalgebra::Cholesky::new(m)
                .ok_or_else(|| Error::Dimension("scenario covariance is not positive definite".into()))?
                .l())
        };
        let factors = match id {
            ScenarioId::I | ScenarioId::VII => {
                vec![chol(ar_matrix(layout.num_predictors(), 0.6))?]
            }
            _ => (0..layout.num_modalities())
                .map(|k| chol(gen_covariance(id, k, layout.sizes()[k])?))
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            id,
            layout: layout.clone(),
            factors,
        })
    }

    fn gaussian(rng: &mut ChaCha8Rng, l: &DMatrix<f64>) -> DVector<f64> {
        let z = DVector::from_fn(l.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
        l * z
    }

    fn row(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let p = self.layout.num_predictors();
        match self.id {
            ScenarioId::I | ScenarioId::VII => Self::gaussian(rng, &self.factors[0]),
            ScenarioId::V | ScenarioId::VI => {
                let mut out = DVector::zeros(p);
                let chi = ChiSquared::new(5.0).unwrap();
                for k in 0..self.layout.num_modalities() {
                    let r = self.layout.range(k);
                    let block = if k == 2 {
                        let g = Self::gaussian(rng, &self.factors[k]);
                        let u: f64 = chi.sample(rng);
                        g * (5.0 / u).sqrt()
                    } else {
                        // mixture ρ·N(0, I) + (1 − ρ)·N(0, 0.5 I), ρ = 0.03
                        let sd = if rng.gen_bool(0.03) { 1.0 } else { 0.5f64.sqrt() };
                        DVector::from_fn(r.len(), |_, _| sd * rng.sample::<f64, _>(StandardNormal))
                    };
                    out.rows_mut(r.start, r.len()).copy_from(&block);
                }
                out
            }
            _ => {
                let mut out = DVector::zeros(p);
                for k in 0..self.layout.num_modalities() {
                    let r = self.layout.range(k);
                    out.rows_mut(r.start, r.len())
                        .copy_from(&Self::gaussian(rng, &self.factors[k]));
                }
                out
            }
        }
    }

    fn matrix(&self, rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let p = self.layout.num_predictors();
        let mut x = DMatrix::zeros(n, p);
        for i in 0..n {
            x.row_mut(i).copy_from(&self.row(rng).transpose());
        }
        x
    }
}

fn draw_noise(rng: &mut ChaCha8Rng, noise: Noise, n: usize) -> DVector<f64> {
    match noise {
        Noise::Gaussian => DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)),
        Noise::Student5 => {
            let t = StudentT::new(5.0).unwrap();
            DVector::from_fn(n, |_, _| t.sample(rng))
        }
    }
}

fn respond(x: &DMatrix<f64>, beta0: &[f64], eps: DVector<f64>) -> DVector<f64> {
    x * DVector::from_column_slice(beta0) + eps
}

/// Missingness mask: `groups = K + 1` equal row groups, the first complete and
/// group `g ≥ 1` missing modality `K − g`. Scenario VII instead keeps a
/// `complete_fraction` of complete rows and cycles the others through the
/// incomplete patterns; scenario IV has no missingness.
pub fn missing_pattern(spec: &ScenarioSpec, layout: &ModalityLayout) -> DMatrix<bool> {
    let (n, p, k) = (spec.n, layout.num_predictors(), layout.num_modalities());
    let labels = layout.labels();
    let missing_of = |i: usize| -> Option<usize> {
        match spec.id {
            ScenarioId::IV => None,
            ScenarioId::VII => {
                let complete = ((spec.complete_fraction * n as f64).round() as usize).clamp(1, n);
                if i < complete {
                    None
                } else {
                    Some(k - 1 - (i - complete) % k)
                }
            }
            _ => {
                let g = i / (n / (k + 1));
                if g == 0 {
                    None
                } else {
                    Some(k - g)
                }
            }
        }
    };
    DMatrix::from_fn(n, p, |i, j| missing_of(i) != Some(labels[j]))
}

/// `Z = X + W` with `W` Gaussian of variance `tau2[k]` on modality `k`.
pub fn inject_measurement_error(
    x: &DMatrix<f64>,
    layout: &ModalityLayout,
    tau2: &[f64],
    seed: u64,
) -> DMatrix<f64> {
    let mut rng = rng_for(seed, STREAM_ERROR);
    add_error(x, layout, tau2, &mut rng)
}

fn add_error(
    x: &DMatrix<f64>,
    layout: &ModalityLayout,
    tau2: &[f64],
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let labels = layout.labels();
    let mut z = x.clone();
    // row-major draw order so results do not depend on storage order
    for i in 0..x.nrows() {
        for (j, &k) in labels.iter().enumerate() {
            let w: f64 = rng.sample(StandardNormal);
            z[(i, j)] += tau2[k].sqrt() * w;
        }
    }
    z
}

/// Draws one replicate: contaminated, masked training data plus complete,
/// error-free validation and test sets.
pub fn gen_scenario(spec: &ScenarioSpec) -> Result<ScenarioData> {
    spec.validate()?;
    let layout = spec.layout()?;
    let sampler = Sampler::new(spec.id, &layout)?;
    let truth = true_model(&layout);

    let mut rng = rng_for(spec.seed, STREAM_TRAIN_X);
    let clean = sampler.matrix(&mut rng, spec.n);
    let mut rng = rng_for(spec.seed, STREAM_TRAIN_NOISE);
    let y = respond(&clean, &truth.beta0, draw_noise(&mut rng, spec.noise, spec.n));
    let z = inject_measurement_error(&clean, &layout, &spec.tau2, spec.seed);
    let mask = missing_pattern(spec, &layout);
    let train = BlockMissingDataset::new(z, mask, y, layout)?;

    let mut rng = rng_for(spec.seed, STREAM_VAL);
    let val_x = sampler.matrix(&mut rng, spec.n_val);
    let val_y = respond(&val_x, &truth.beta0, draw_noise(&mut rng, spec.noise, spec.n_val));
    let mut rng = rng_for(spec.seed, STREAM_TEST);
    let test_x = sampler.matrix(&mut rng, spec.n_test);
    let test_y = respond(&test_x, &truth.beta0, draw_noise(&mut rng, spec.noise, spec.n_test));

    Ok(ScenarioData {
        train,
        train_clean: clean,
        val_x,
        val_y,
        test_x,
        test_y,
        truth,
    })
}
