//! Positive semi-definite fusion of partitioned moment estimates.
//!
//! All combinations share the form
//! `Σ̂ = Σ_k α_k Σ̃_{I_k} + α_C Σ̃_C + α_p I`, where the identity weight is
//! tied to the block weights through `γ*`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::MomentPartition;

/// Eigenvalues in `[-PSD_TOL, 0)` count as zero.
pub const PSD_TOL: f64 = 1e-8;

/// Weights of one AdapDISCOM combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: Vec<f64>,
    pub alpha_c: f64,
    pub gamma_star: f64,
    pub alpha_p: f64,
}

impl FusionWeights {
    /// Derives `γ*` and `α_p` from the block weights.
    pub fn new(alpha: Vec<f64>, alpha_c: f64, traces: &[f64], p: usize) -> Result<Self> {
        if alpha.len() != traces.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} modalities",
                alpha.len(),
                traces.len()
            )));
        }
        let legal = |a: f64| (-1e-12..=1.0 + 1e-12).contains(&a);
        if !alpha.iter().all(|&a| legal(a)) || !legal(alpha_c) {
            return Err(Error::InvalidArgument(format!(
                "weights {alpha:?}, {alpha_c} must lie in [0, 1]"
            )));
        }
        let gamma_star = gamma_star(&alpha, traces, p);
        let alpha_p = gamma_star * alpha.iter().map(|a| 1.0 - a).sum::<f64>();
        Ok(Self {
            alpha,
            alpha_c,
            gamma_star,
            alpha_p,
        })
    }
}

/// `γ* = (1/p) Σ_k w_k Tr(Σ̃_{I_k})` with `w_k ∝ (1 − α_k)²`, and zero when
/// every `α_k = 1`.
pub fn gamma_star(alpha: &[f64], traces: &[f64], p: usize) -> f64 {
    let sq: Vec<f64> = alpha.iter().map(|a| (1.0 - a).powi(2)).collect();
    let total: f64 = sq.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    sq.iter().zip(traces).map(|(s, t)| s / total * t).sum::<f64>() / p as f64
}

/// How a combined covariance was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Weights(FusionWeights),
    FastL0 { l0: f64, weights: FusionWeights },
    Cocolasso { tau2: Vec<f64>, sign: f64 },
    /// Used as-is, e.g. a Gram matrix of complete or imputed data.
    Direct,
}

/// A fused `p × p` covariance with a lazily computed minimum eigenvalue.
#[derive(Debug, Clone)]
pub struct CombinedCovariance {
    pub matrix: DMatrix<f64>,
    pub provenance: Provenance,
    min_eig: OnceLock<f64>,
}

impl CombinedCovariance {
    pub fn new(matrix: DMatrix<f64>, provenance: Provenance) -> Self {
        Self {
            matrix,
            provenance,
            min_eig: OnceLock::new(),
        }
    }

    pub fn min_eig(&self) -> Result<f64> {
        if let Some(&v) = self.min_eig.get() {
            return Ok(v);
        }
        let v = min_eigenvalue(&self.matrix)?;
        Ok(*self.min_eig.get_or_init(|| v))
    }

    /// Whether the smallest eigenvalue is at least `-PSD_TOL`.
    pub fn is_psd(&self) -> Result<bool> {
        Ok(self.min_eig()? >= -PSD_TOL)
    }
}

/// Cheap feasibility test: `Σ̂ + PSD_TOL·I` admits a Cholesky factor exactly
/// when its smallest eigenvalue is positive, up to rounding.
pub fn is_psd_fast(matrix: &DMatrix<f64>) -> bool {
    let mut shifted = matrix.clone();
    for j in 0..shifted.nrows() {
        shifted[(j, j)] += PSD_TOL;
    }
    nalgebra::Cholesky::new(shifted).is_some()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(mat: &DMatrix<f64>) -> Result<f64> {
    if mat.nrows() != mat.ncols() {
        return Err(Error::Dimension("min_eigenvalue needs a square matrix".into()));
    }
    if mat.nrows() == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }
    let eig = SymmetricEigen::try_new(mat.clone(), f64::EPSILON, 100_000)
        .ok_or(Error::ConvergenceFailure)?;
    Ok(eig.eigenvalues.min())
}

/// `Σ_k α_k Σ̃_{I_k} + α_C Σ̃_C + α_p I`.
pub fn combine_adapdiscom(part: &MomentPartition, w: &FusionWeights) -> CombinedCovariance {
    let mut out = fuse(part, &w.alpha, w.alpha_c, w.alpha_p);
    symmetrize(&mut out);
    CombinedCovariance::new(out, Provenance::Weights(w.clone()))
}

fn fuse(part: &MomentPartition, alpha: &[f64], alpha_c: f64, alpha_p: f64) -> DMatrix<f64> {
    let mut out = &part.cross * alpha_c;
    for (k, block) in part.intra.iter().enumerate() {
        let r = part.layout.range(k);
        out.view_mut((r.start, r.start), (r.len(), r.len()))
            .zip_apply(block, |o, b| *o = alpha[k] * b);
    }
    for j in 0..out.nrows() {
        out[(j, j)] += alpha_p;
    }
    out
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for j in 0..p {
        for t in j + 1..p {
            let v = 0.5 * (m[(j, t)] + m[(t, j)]);
            m[(j, t)] = v;
            m[(t, j)] = v;
        }
    }
}

/// DISCOM: one common weight for every intra-modality block.
pub fn combine_discom(
    part: &MomentPartition,
    alpha_i: f64,
    alpha_c: f64,
) -> Result<CombinedCovariance> {
    let k = part.intra.len();
    let w = FusionWeights::new(vec![alpha_i; k], alpha_c, &part.traces, part.p())?;
    Ok(combine_adapdiscom(part, &w))
}

/// Nearest PSD matrix in Frobenius norm: eigenvalues clipped at zero.
pub fn project_psd(mat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(mat.clone(), f64::EPSILON, 100_000)
        .ok_or(Error::ConvergenceFailure)?;
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Additive measurement-error correction: `Σ̃ + sign·diag(τ²)` followed by
/// eigenvalue clipping. `tau2` holds one variance per modality.
pub fn cocolasso_correct(
    part: &MomentPartition,
    tau2: &[f64],
    sign: f64,
) -> Result<CombinedCovariance> {
    if tau2.len() != part.intra.len() {
        return Err(Error::Dimension(format!(
            "{} error variances for {} modalities",
            tau2.len(),
            part.intra.len()
        )));
    }
    let per_column: Vec<f64> = part
        .layout
        .labels()
        .into_iter()
        .map(|k| tau2[k])
        .collect();
    let mut out = cocolasso_correct_columns(&part.reassemble(), &per_column, sign)?;
    out.provenance = Provenance::Cocolasso {
        tau2: tau2.to_vec(),
        sign,
    };
    Ok(out)
}

/// As [`cocolasso_correct`] with one error variance per column.
pub fn cocolasso_correct_columns(
    sigma: &DMatrix<f64>,
    tau2: &[f64],
    sign: f64,
) -> Result<CombinedCovariance> {
    if sign != 1.0 && sign != -1.0 {
        return Err(Error::InvalidArgument(format!("sign must be ±1, got {sign}")));
    }
    if tau2.len() != sigma.nrows() {
        return Err(Error::Dimension("one error variance per column expected".into()));
    }
    if tau2.iter().any(|&t| !(t >= 0.0)) {
        return Err(Error::InvalidArgument("error variances must be non-negative".into()));
    }
    let mut corrected = sigma.clone();
    for (j, t) in tau2.iter().enumerate() {
        corrected[(j, j)] += sign * t;
    }
    let out = project_psd(&corrected)?;
    Ok(CombinedCovariance::new(
        out,
        Provenance::Cocolasso {
            tau2: tau2.to_vec(),
            sign,
        },
    ))
}

/// Plug-in quantities of the oracle weight rule, per modality `k`:
/// `δ²_{I_k} = E‖Σ̃_{I_k} − Σ_{I_k}‖²`, `θ²_{I_k} = ‖γ I − Σ_{I_k}‖²`, and
/// their cross-modality analogues.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInputs {
    pub delta_i2: Vec<f64>,
    pub theta_i2: Vec<f64>,
    pub delta_c2: f64,
    pub norm_c2: f64,
}

impl OracleInputs {
    fn validate(&self) -> Result<()> {
        if self.delta_i2.len() != self.theta_i2.len() {
            return Err(Error::Dimension("δ² and θ² lengths differ".into()));
        }
        let all = self
            .delta_i2
            .iter()
            .chain(&self.theta_i2)
            .chain([&self.delta_c2, &self.norm_c2]);
        for &v in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "oracle inputs must be finite and non-negative, got {v}"
                )));
            }
        }
        for (k, (d, t)) in self.delta_i2.iter().zip(&self.theta_i2).enumerate() {
            if d + t == 0.0 {
                return Err(Error::DegenerateRatio(format!("θ² + δ² = 0 for modality {k}")));
            }
        }
        if self.delta_c2 + self.norm_c2 == 0.0 {
            return Err(Error::DegenerateRatio("‖Σ_C‖² + δ_C² = 0".into()));
        }
        Ok(())
    }
}

/// Loss-minimizing weights `α_k = θ²/(θ² + δ²)`, `α_C = ‖Σ_C‖²/(‖Σ_C‖² + δ_C²)`.
pub fn oracle_weights(inp: &OracleInputs, traces: &[f64], p: usize) -> Result<FusionWeights> {
    inp.validate()?;
    let alpha = inp
        .delta_i2
        .iter()
        .zip(&inp.theta_i2)
        .map(|(d, t)| t / (t + d))
        .collect();
    let alpha_c = inp.norm_c2 / (inp.norm_c2 + inp.delta_c2);
    FusionWeights::new(alpha, alpha_c, traces, p)
}

/// Expected loss at the oracle weights:
/// `Σ_k δ²θ²/(θ² + δ²) + δ_C²‖Σ_C‖²/(δ_C² + ‖Σ_C‖²)`.
pub fn oracle_loss(inp: &OracleInputs) -> Result<f64> {
    inp.validate()?;
    let intra: f64 = inp
        .delta_i2
        .iter()
        .zip(&inp.theta_i2)
        .map(|(d, t)| d * t / (d + t))
        .sum();
    Ok(intra + inp.delta_c2 * inp.norm_c2 / (inp.delta_c2 + inp.norm_c2))
}

/// Relative improvement of the oracle combination over `Σ̃`:
/// `Σ_k δ²_k/(Σδ² + δ_C²)·(1 − α_k) + δ_C²/(Σδ² + δ_C²)·(1 − α_C)`.
pub fn relative_improvement(inp: &OracleInputs) -> Result<f64> {
    inp.validate()?;
    let total: f64 = inp.delta_i2.iter().sum::<f64>() + inp.delta_c2;
    if total == 0.0 {
        return Err(Error::DegenerateRatio("Σδ² + δ_C² = 0".into()));
    }
    let intra: f64 = inp
        .delta_i2
        .iter()
        .zip(&inp.theta_i2)
        .map(|(d, t)| d / total * (1.0 - t / (t + d)))
        .sum();
    let alpha_c = inp.norm_c2 / (inp.norm_c2 + inp.delta_c2);
    Ok(intra + inp.delta_c2 / total * (1.0 - alpha_c))
}

/// Bounds of the one-parameter family `α_k = 1 − l0·m_k`, `α_C = 1 − l0·m_C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastBounds {
    pub m: Vec<f64>,
    pub m_c: f64,
    pub l_min: f64,
    pub l_max: f64,
    /// False when the analytic lower bound was unavailable and `l_min` was
    /// reset to zero; candidates then need an explicit PSD check.
    pub certified: bool,
}

/// Rates `m_k = √(log p / min_{j∈k} n_j)` and `m_C` from the minimum count
/// over cross-modality pairs (over all pairs when there is one modality).
pub fn fast_rates(counts: &DMatrix<usize>, part: &MomentPartition) -> Result<(Vec<f64>, f64)> {
    let layout = &part.layout;
    let p = layout.num_predictors();
    let logp = (p.max(2) as f64).ln();
    let rate = |n: usize| -> Result<f64> {
        if n == 0 {
            return Err(Error::DegenerateRatio("zero observation count".into()));
        }
        Ok((logp / n as f64).sqrt())
    };
    let k = layout.num_modalities();
    let mut m = Vec::with_capacity(k);
    for b in 0..k {
        let n = layout.range(b).map(|j| counts[(j, j)]).min().unwrap();
        m.push(rate(n)?);
    }
    let labels = layout.labels();
    let mut min_cross = usize::MAX;
    for j in 0..p {
        for t in j + 1..p {
            if k == 1 || labels[j] != labels[t] {
                min_cross = min_cross.min(counts[(j, t)]);
            }
        }
    }
    let m_c = if min_cross == usize::MAX {
        // p = 1: no pairs at all
        m[0]
    } else {
        rate(min_cross)?
    };
    Ok((m, m_c))
}

/// `M = Σ_k (m_C − m_k) Σ̃_{I_k} + (1/p)(Σ_t m_t)(Σ_k m_k² Tr_k)/(Σ_t m_t²)·I`,
/// the slope of `Σ̂(l0) = (1 − l0·m_C) Σ̃ + l0·M`.
pub fn slope_matrix(part: &MomentPartition, m: &[f64], m_c: f64) -> DMatrix<f64> {
    let p = part.p();
    let sum_m: f64 = m.iter().sum();
    let sum_m2: f64 = m.iter().map(|v| v * v).sum();
    let weighted: f64 = m.iter().zip(&part.traces).map(|(v, t)| v * v * t).sum();
    let coef = if sum_m2 == 0.0 {
        0.0
    } else {
        sum_m * weighted / (sum_m2 * p as f64)
    };
    let diffs: Vec<f64> = m.iter().map(|v| m_c - v).collect();
    fuse(part, &diffs, 0.0, coef)
}

impl FastBounds {
    /// Bounds for explicitly chosen rates.
    pub fn from_rates(part: &MomentPartition, m: Vec<f64>, m_c: f64) -> Result<Self> {
        if m.len() != part.intra.len() {
            return Err(Error::Dimension("one rate per modality expected".into()));
        }
        if !(m_c > 0.0) || m.iter().any(|&v| !(v >= 0.0) || v > m_c * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!(
                "rates must satisfy 0 ≤ m_k ≤ m_C, m_C > 0 (m = {m:?}, m_C = {m_c})"
            )));
        }
        let l_max = 1.0 / m_c;
        let kappa = min_eigenvalue(&part.reassemble())?;
        let l_min = if kappa >= 0.0 {
            0.0
        } else {
            let kappa_m = min_eigenvalue(&slope_matrix(part, &m, m_c))?;
            let denom = -m_c * kappa + kappa_m;
            if denom <= 0.0 {
                return Err(Error::NonPositiveDenominator(denom));
            }
            let l = -kappa / denom;
            if l > l_max {
                return Err(Error::OutOfRange {
                    l0: l,
                    lo: 0.0,
                    hi: l_max,
                });
            }
            l
        };
        Ok(Self {
            m,
            m_c,
            l_min,
            l_max,
            certified: true,
        })
    }

    /// Uncertified fallback on `[0, 1/m_C]`.
    pub fn fallback(m: Vec<f64>, m_c: f64) -> Self {
        Self {
            m,
            m_c,
            l_min: 0.0,
            l_max: 1.0 / m_c,
            certified: false,
        }
    }

    /// `n` points evenly spaced on `[l_min, l_max]`; one point when the
    /// interval is degenerate.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        if n <= 1 || self.l_max - self.l_min <= f64::EPSILON * self.l_max {
            return vec![self.l_min];
        }
        (0..n)
            .map(|i| self.l_min + (self.l_max - self.l_min) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Bounds from the overlap counts of `counts`.
pub fn fast_bounds(counts: &DMatrix<usize>, part: &MomentPartition) -> Result<FastBounds> {
    let (m, m_c) = fast_rates(counts, part)?;
    FastBounds::from_rates(part, m, m_c)
}

/// `Σ̂(l0)` with `α_k = 1 − l0·m_k` and `α_C = 1 − l0·m_C`.
pub fn fast_combine(part: &MomentPartition, b: &FastBounds, l0: f64) -> Result<CombinedCovariance> {
    let slack = 1e-12 * b.l_max.max(1.0);
    if !(l0 >= b.l_min - slack && l0 <= b.l_max + slack) {
        return Err(Error::OutOfRange {
            l0,
            lo: b.l_min,
            hi: b.l_max,
        });
    }
    let clamp01 = |a: f64| a.clamp(0.0, 1.0);
    let alpha = b.m.iter().map(|m| clamp01(1.0 - l0 * m)).collect();
    let w = FusionWeights::new(alpha, clamp01(1.0 - l0 * b.m_c), &part.traces, part.p())?;
    let mut out = combine_adapdiscom(part, &w);
    out.provenance = Provenance::FastL0 { l0, weights: w };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ModalityLayout;
    use crate::moments::partition_matrix;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn identity_weights_reproduce_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = ModalityLayout::new(vec![2, 3, 1]).unwrap();
        let s = random_sym(&mut rng, 6);
        let part = partition_matrix(&s, &layout);
        let w = FusionWeights::new(vec![1.0; 3], 1.0, &part.traces, 6).unwrap();
        assert_eq!(w.alpha_p, 0.0);
        assert_eq!(combine_adapdiscom(&part, &w).matrix, s);
    }

    #[test]
    fn two_by_two_hand_example() {
        let layout = ModalityLayout::new(vec![1, 1]).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        let part = partition_matrix(&s, &layout);
        let w = FusionWeights::new(vec![0.5, 0.5], 0.8, &part.traces, 2).unwrap();
        assert_abs_diff_eq!(w.gamma_star, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.alpha_p, 0.5, epsilon = 1e-15);
        let out = combine_adapdiscom(&part, &w).matrix;
        assert_abs_diff_eq!(out[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[(0, 1)], 0.32, epsilon = 1e-15);
    }

    #[test]
    fn gamma_star_examples() {
        assert_abs_diff_eq!(gamma_star(&[0.3], &[7.0], 4), 7.0 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(gamma_star(&[0.4, 0.4], &[10.0, 20.0], 10), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(gamma_star(&[0.5, 0.9], &[10.0, 20.0], 10), 27.0 / 26.0, epsilon = 1e-14);
        assert_eq!(gamma_star(&[1.0, 1.0], &[10.0, 20.0], 10), 0.0);
    }

    #[test]
    fn discom_is_equal_weight_adapdiscom() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layout = ModalityLayout::new(vec![3, 2, 4]).unwrap();
        let part = partition_matrix(&random_sym(&mut rng, 9), &layout);
        let d = combine_discom(&part, 0.3, 0.7).unwrap();
        let w = FusionWeights::new(vec![0.3; 3], 0.7, &part.traces, 9).unwrap();
        let a = combine_adapdiscom(&part, &w);
        assert!((d.matrix - a.matrix).amax() <= 1e-14);
    }

    #[test]
    fn discom_zero_intra_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let layout = ModalityLayout::new(vec![2, 2]).unwrap();
        let s = random_sym(&mut rng, 4);
        let part = partition_matrix(&s, &layout);
        let d = combine_discom(&part, 0.0, 0.6).unwrap().matrix;
        // γ* = average trace / p, α_p = 2γ*
        let gamma_ref = (part.traces[0] + part.traces[1]) / 2.0 / 4.0;
        assert_abs_diff_eq!(d[(0, 0)], 2.0 * gamma_ref, epsilon = 1e-14);
        assert_abs_diff_eq!(d[(0, 1)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d[(0, 2)], 0.6 * s[(0, 2)], epsilon = 1e-14);
    }

    #[test]
    fn cocolasso_examples() {
        let layout = ModalityLayout::new(vec![1, 1]).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]);
        let part = partition_matrix(&s, &layout);
        let c = cocolasso_correct(&part, &[0.2, 0.2], -1.0).unwrap();
        assert_abs_diff_eq!(c.matrix[(0, 0)], 0.8, epsilon = 1e-12);
        let same = cocolasso_correct(&part, &[0.0, 0.0], -1.0).unwrap();
        assert!((same.matrix - &s).amax() < 1e-12);

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.2, 1.2, 1.0]);
        let part = partition_matrix(&bad, &layout);
        let c = cocolasso_correct(&part, &[0.0, 0.0], -1.0).unwrap();
        let eig = SymmetricEigen::new(c.matrix.clone()).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        assert_abs_diff_eq!(lo, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 2.2, epsilon = 1e-12);
        assert!(cocolasso_correct(&part, &[0.1, 0.1], 0.5).is_err());
    }

    #[test]
    fn oracle_examples() {
        let inp = OracleInputs {
            delta_i2: vec![0.0, 2.0],
            theta_i2: vec![1.0, 2.0],
            delta_c2: 1.0,
            norm_c2: 3.0,
        };
        let w = oracle_weights(&inp, &[4.0, 4.0], 8).unwrap();
        assert_eq!(w.alpha, vec![1.0, 0.5]);
        assert_eq!(w.alpha_c, 0.75);
        let loss = oracle_loss(&inp).unwrap();
        assert_abs_diff_eq!(loss, 1.0 + 0.75, epsilon = 1e-15);
        assert!(loss <= 2.0 + 1.0);
        let bad = OracleInputs {
            delta_i2: vec![0.0],
            theta_i2: vec![0.0],
            delta_c2: 1.0,
            norm_c2: 1.0,
        };
        assert!(matches!(oracle_weights(&bad, &[1.0], 1), Err(Error::DegenerateRatio(_))));
    }

    #[test]
    fn relative_improvement_is_loss_reduction() {
        let inp = OracleInputs {
            delta_i2: vec![0.5, 2.0, 1.0],
            theta_i2: vec![1.0, 0.3, 4.0],
            delta_c2: 1.5,
            norm_c2: 2.5,
        };
        let base: f64 = inp.delta_i2.iter().sum::<f64>() + inp.delta_c2;
        let expected = 1.0 - oracle_loss(&inp).unwrap() / base;
        assert_abs_diff_eq!(relative_improvement(&inp).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn min_eigenvalue_examples() {
        assert_abs_diff_eq!(min_eigenvalue(&DMatrix::identity(4, 4)).unwrap(), 1.0, epsilon = 1e-14);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, -2.0]));
        assert_abs_diff_eq!(min_eigenvalue(&d).unwrap(), -2.0, epsilon = 1e-14);
    }

    /// Smallest eigenvalue by the Courant-Fischer characterization, via
    /// inverse power iteration on a shifted matrix.
    fn min_eig_oracle(a: &DMatrix<f64>) -> f64 {
        let p = a.nrows();
        let bound: f64 = (0..p)
            .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        // B = bound·I − A has its largest eigenvalue at bound − λ_min.
        let b = DMatrix::identity(p, p) * bound - a;
        let mut v = nalgebra::DVector::from_fn(p, |i, _| 1.0 + i as f64 * 0.01);
        let mut lam = 0.0;
        for _ in 0..20000 {
            let w = &b * &v;
            lam = v.dot(&w) / v.dot(&v);
            v = &w / w.norm();
        }
        bound - lam
    }

    #[test]
    fn min_eigenvalue_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let a = random_sym(&mut rng, 5);
            let got = min_eigenvalue(&a).unwrap();
            let all = SymmetricEigen::new(a.clone()).eigenvalues;
            assert_abs_diff_eq!(got, all.min(), epsilon = 1e-12);
            assert_abs_diff_eq!(got, min_eig_oracle(&a), epsilon = 1e-9);
        }
    }

    #[test]
    fn fast_combine_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = ModalityLayout::new(vec![2, 2]).unwrap();
        let a = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        let s = a.tr_mul(&a) / 6.0;
        let part = partition_matrix(&s, &layout);
        let b = FastBounds::from_rates(&part, vec![0.2, 0.3], 0.5).unwrap();
        assert_eq!(b.l_min, 0.0);
        assert_eq!(b.l_max, 2.0);
        assert_eq!(fast_combine(&part, &b, 0.0).unwrap().matrix, s);
        let top = fast_combine(&part, &b, b.l_max).unwrap();
        assert_abs_diff_eq!(top.matrix[(0, 2)], 0.0, epsilon = 1e-15);
        assert!(matches!(fast_combine(&part, &b, 2.5), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn fast_lower_bound_matches_bisection_on_indefinite_2x2() {
        let layout = ModalityLayout::new(vec![1, 1]).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 1.5, 1.0]);
        let part = partition_matrix(&s, &layout);
        // Equal rates make M a multiple of the identity, so Weyl's bound is
        // tight and l_min is the exact PSD threshold.
        let b = FastBounds::from_rates(&part, vec![0.4, 0.4], 0.4).unwrap();
        let open = FastBounds::fallback(vec![0.4, 0.4], 0.4);
        let psd = |l: f64| {
            let m = fast_combine(&part, &open, l).unwrap().matrix;
            min_eigenvalue(&m).unwrap() >= 0.0
        };
        let (mut lo, mut hi) = (0.0, b.l_max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if psd(mid) { hi = mid } else { lo = mid }
        }
        assert_abs_diff_eq!(b.l_min, hi, epsilon = 1e-9);

        // Unequal rates: the bound is conservative but still certified.
        let b = FastBounds::from_rates(&part, vec![0.2, 0.35], 0.4).unwrap();
        let at = fast_combine(&part, &b, b.l_min).unwrap();
        assert!(at.min_eig().unwrap() >= -PSD_TOL);
        assert!(b.l_min > 0.0);
        assert!(!psd(0.0));
    }

    #[test]
    fn equal_rates_reduce_to_single_rate_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let layout = ModalityLayout::new(vec![3, 3, 2]).unwrap();
        let s = random_sym(&mut rng, 8);
        let part = partition_matrix(&s, &layout);
        let (m, m_c) = (0.3, 0.45);
        let b = FastBounds::fallback(vec![m; 3], m_c);
        let l0 = 0.9;
        let got = fast_combine(&part, &b, l0).unwrap().matrix;
        let intra = part.intra_embedded();
        let reference = &intra * (1.0 - l0 * m)
            + &part.cross * (1.0 - l0 * m_c)
            + DMatrix::identity(8, 8) * (l0 * m * s.trace() / 8.0);
        assert!((got - reference).amax() <= 1e-14);
    }

    #[test]
    fn rates_follow_counts() {
        let layout = ModalityLayout::new(vec![1, 2]).unwrap();
        let counts = DMatrix::from_row_slice(3, 3, &[10, 4, 4, 4, 8, 8, 4, 8, 8]);
        let part = partition_matrix(&DMatrix::identity(3, 3), &layout);
        let (m, m_c) = fast_rates(&counts, &part).unwrap();
        let l = 3f64.ln();
        assert_abs_diff_eq!(m[0], (l / 10.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], (l / 8.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(m_c, (l / 4.0).sqrt(), epsilon = 1e-15);
        assert!(m_c >= m[0].max(m[1]));
    }

    #[test]
    fn fast_psd_check_agrees_with_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let a = random_sym(&mut rng, 6);
            let lam = min_eigenvalue(&a).unwrap();
            if lam.abs() > 1e-6 {
                assert_eq!(is_psd_fast(&a), lam >= -PSD_TOL);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn minimized_loss_is_dominated(
                d in proptest::collection::vec(0.0f64..10.0, 1..5),
                t in proptest::collection::vec(0.01f64..10.0, 5),
                dc in 0.0f64..10.0,
                nc in 0.01f64..10.0,
            ) {
                let inp = OracleInputs {
                    theta_i2: t[..d.len()].to_vec(),
                    delta_i2: d.clone(),
                    delta_c2: dc,
                    norm_c2: nc,
                };
                let loss = oracle_loss(&inp).unwrap();
                prop_assert!(loss <= d.iter().sum::<f64>() + dc + 1e-12);
            }

            #[test]
            fn weights_tie_identity_term_to_gamma(
                a in proptest::collection::vec(0.0f64..=1.0, 1..5),
                tr in proptest::collection::vec(0.0f64..50.0, 5),
                p in 1usize..60,
            ) {
                let w = FusionWeights::new(a.clone(), 0.5, &tr[..a.len()], p).unwrap();
                let s: f64 = a.iter().map(|v| 1.0 - v).sum();
                prop_assert!((w.alpha_p - w.gamma_star * s).abs() <= 1e-12);
                prop_assert!(w.gamma_star >= 0.0);
            }
        }
    }
}
