//! Multimodal block-missing datasets.
//!
//! Predictors are partitioned into `K` contiguous modality blocks. Within a
//! sample a modality is either fully observed or fully missing; this is
//! checked whenever a dataset is constructed. Missing cells are stored as
//! `0.0` in the value matrix so that products over unobserved entries vanish,
//! and the boolean mask is the source of truth for observedness.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of `p` predictors into contiguous modality blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ModalityLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl ModalityLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Layout("at least one modality is required".into()));
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Layout(format!("modality {k} has no predictors")));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        Ok(Self { sizes, offsets })
    }

    /// `k` modalities of `size` predictors each.
    pub fn uniform(k: usize, size: usize) -> Result<Self> {
        Self::new(vec![size; k])
    }

    /// Parses a comma-separated list of block sizes such as `100,100,100`.
    pub fn parse(spec: &str) -> Result<Self> {
        let sizes = spec
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Layout(format!("bad block size {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sizes)
    }

    pub fn num_modalities(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_predictors(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Column range of modality `k`.
    pub fn range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn modality_of(&self, j: usize) -> usize {
        assert!(j < self.num_predictors(), "predictor {j} out of range");
        // offsets is sorted; the block is the last offset <= j.
        self.offsets.partition_point(|&o| o <= j) - 1
    }

    /// Modality index of every predictor.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.num_modalities())
            .flat_map(|k| std::iter::repeat(k).take(self.sizes[k]))
            .collect()
    }
}

impl TryFrom<Vec<usize>> for ModalityLayout {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        Self::new(sizes)
    }
}

impl From<ModalityLayout> for Vec<usize> {
    fn from(layout: ModalityLayout) -> Self {
        layout.sizes
    }
}

/// Per-column transformation applied by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationReport {
    /// Observed-case mean subtracted from each column.
    pub centers: Vec<f64>,
    /// Multiplier applied after centering.
    pub scales: Vec<f64>,
    /// Mean subtracted from the response.
    pub y_center: f64,
    pub centered: bool,
    pub degenerate_columns: Vec<usize>,
}

impl StandardizationReport {
    /// The report of a transformation that leaves data untouched.
    pub fn identity(p: usize) -> Self {
        Self {
            centers: vec![0.0; p],
            scales: vec![1.0; p],
            y_center: 0.0,
            centered: false,
            degenerate_columns: Vec::new(),
        }
    }

    /// Applies the training centers and scales to a complete matrix.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.scales.len() {
            return Err(Error::Shape(format!(
                "matrix has {} columns, report covers {}",
                x.ncols(),
                self.scales.len()
            )));
        }
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.centers[j], self.scales[j]);
            col.apply(|v| *v = (*v - m) * s);
        }
        Ok(out)
    }

    pub fn center_response(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v - self.y_center)
    }

    /// Maps coefficients on the standardized scale back to raw predictors,
    /// returning `(beta, intercept)` such that `y ≈ intercept + x·beta`.
    pub fn to_raw(&self, beta_std: &[f64]) -> (Vec<f64>, f64) {
        let beta: Vec<f64> = beta_std
            .iter()
            .zip(&self.scales)
            .map(|(b, s)| b * s)
            .collect();
        let shift: f64 = beta.iter().zip(&self.centers).map(|(b, m)| b * m).sum();
        (beta, self.y_center - shift)
    }
}

/// Observed-sample counts per column and per column pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationCounts {
    /// `n_j`, the number of samples observing predictor `j`.
    pub column: Vec<usize>,
    /// `n_jt`, the number of samples observing both `j` and `t`.
    pub pair: DMatrix<usize>,
}

/// An `n × p` predictor matrix with block-wise missingness and a complete,
/// centered response.
#[derive(Debug, Clone)]
pub struct BlockMissingDataset {
    x: DMatrix<f64>,
    mask: DMatrix<bool>,
    y: DVector<f64>,
    layout: ModalityLayout,
    degenerate: Vec<usize>,
    standardization: Option<StandardizationReport>,
}

impl BlockMissingDataset {
    /// Builds a dataset, validating shapes and block constancy of the mask.
    /// Values at unobserved cells are ignored and stored as zero.
    pub fn new(
        x: DMatrix<f64>,
        mask: DMatrix<bool>,
        y: DVector<f64>,
        layout: ModalityLayout,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 {
            return Err(Error::Shape("dataset has no rows".into()));
        }
        if p != layout.num_predictors() {
            return Err(Error::Shape(format!(
                "{p} columns but the layout describes {}",
                layout.num_predictors()
            )));
        }
        if mask.shape() != (n, p) {
            return Err(Error::Shape(format!(
                "mask is {:?}, values are {:?}",
                mask.shape(),
                (n, p)
            )));
        }
        if y.len() != n {
            return Err(Error::Shape(format!("{} responses for {n} rows", y.len())));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::MissingResponse(i));
        }
        for i in 0..n {
            for k in 0..layout.num_modalities() {
                let r = layout.range(k);
                let first = mask[(i, r.start)];
                if r.clone().any(|j| mask[(i, j)] != first) {
                    return Err(Error::BlockPattern { row: i, modality: k });
                }
            }
        }
        let mut x = x;
        for (v, &m) in x.iter_mut().zip(mask.iter()) {
            if !m {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::Shape("observed entry is not finite".into()));
            }
        }
        let degenerate = (0..p)
            .filter(|&j| mask.column(j).iter().filter(|&&m| m).count() < 2)
            .collect();
        Ok(Self {
            x,
            mask,
            y,
            layout,
            degenerate,
            standardization: None,
        })
    }

    /// A dataset without missing entries.
    pub fn complete(x: DMatrix<f64>, y: DVector<f64>, layout: ModalityLayout) -> Result<Self> {
        let mask = DMatrix::from_element(x.nrows(), x.ncols(), true);
        Self::new(x, mask, y, layout)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn layout(&self) -> &ModalityLayout {
        &self.layout
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    /// Whether modality `k` is observed in row `i`.
    pub fn block_observed(&self, i: usize, k: usize) -> bool {
        self.mask[(i, self.layout.range(k).start)]
    }

    pub fn is_complete_row(&self, i: usize) -> bool {
        self.mask.row(i).iter().all(|&m| m)
    }

    /// Columns with fewer than two observations or (after standardization)
    /// zero observed variance. Their coefficients are pinned to zero.
    pub fn degenerate_columns(&self) -> &[usize] {
        &self.degenerate
    }

    pub fn standardization(&self) -> Option<&StandardizationReport> {
        self.standardization.as_ref()
    }

    /// Rows observing modality `k`.
    pub fn observed_rows(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.block_observed(i, k)).collect()
    }

    /// Keeps the listed rows, preserving order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(rows);
        let mask = self.mask.select_rows(rows);
        let y = self.y.select_rows(rows);
        let mut out = Self::new(x, mask, y, self.layout.clone())?;
        out.standardization = self.standardization.clone();
        for &j in &self.degenerate {
            if !out.degenerate.contains(&j) {
                out.degenerate.push(j);
            }
        }
        out.degenerate.sort_unstable();
        Ok(out)
    }
}

/// Where the response column comes from when reading a CSV.
#[derive(Debug, Clone)]
pub enum ResponseSource<'a> {
    /// Last column of each row.
    LastColumn,
    /// A separate single-column file with one value per sample.
    File(&'a Path),
}

fn is_missing_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

fn read_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut records = Vec::new();
    for rec in reader.records() {
        records.push(rec?);
    }
    // A header row is any first row holding a field that is neither a number
    // nor a missing token.
    if let Some(first) = records.first() {
        let is_header = first
            .iter()
            .any(|f| !is_missing_token(f) && f.parse::<f64>().is_err());
        if is_header {
            records.remove(0);
        }
    }
    Ok(records)
}

fn parse_cell(field: &str, line: usize, col: usize) -> Result<Option<f64>> {
    if is_missing_token(field) {
        return Ok(None);
    }
    field
        .trim()
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Parse {
            line,
            field: col,
            message: format!("not a number: {field:?}"),
        })
}

/// Reads a block-missing dataset from CSV. Missing cells are the literal
/// token `NA` or an empty field.
pub fn load_dataset(
    path: &Path,
    layout: &ModalityLayout,
    response: &ResponseSource<'_>,
) -> Result<BlockMissingDataset> {
    let records = read_records(path)?;
    if records.is_empty() {
        return Err(Error::Shape(format!("{} holds no data rows", path.display())));
    }
    let p = layout.num_predictors();
    let width = match response {
        ResponseSource::LastColumn => p + 1,
        ResponseSource::File(_) => p,
    };
    let n = records.len();
    let mut x = DMatrix::zeros(n, p);
    let mut mask = DMatrix::from_element(n, p, false);
    let mut y = DVector::zeros(n);
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != width {
            return Err(Error::Shape(format!(
                "row {} has {} fields, expected {width}",
                i + 1,
                rec.len()
            )));
        }
        for j in 0..p {
            if let Some(v) = parse_cell(&rec[j], i + 1, j + 1)? {
                x[(i, j)] = v;
                mask[(i, j)] = true;
            }
        }
        if let ResponseSource::LastColumn = response {
            y[i] = parse_cell(&rec[p], i + 1, p + 1)?.ok_or(Error::MissingResponse(i))?;
        }
    }
    if let ResponseSource::File(ypath) = response {
        let yrec = read_records(ypath)?;
        if yrec.len() != n {
            return Err(Error::Shape(format!(
                "{} responses for {n} rows",
                yrec.len()
            )));
        }
        for (i, rec) in yrec.iter().enumerate() {
            if rec.len() != 1 {
                return Err(Error::Shape(format!(
                    "response row {} has {} fields",
                    i + 1,
                    rec.len()
                )));
            }
            y[i] = parse_cell(&rec[0], i + 1, 1)?.ok_or(Error::MissingResponse(i))?;
        }
    }
    BlockMissingDataset::new(x, mask, y, layout.clone())
}

/// Reads a complete matrix (no missing cells) with an optional response in the
/// last column. Used for validation and test files.
pub fn load_complete(path: &Path, p: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let records = read_records(path)?;
    if records.is_empty() {
        return Err(Error::Shape(format!("{} holds no data rows", path.display())));
    }
    let n = records.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != p + 1 {
            return Err(Error::Shape(format!(
                "row {} has {} fields, expected {}",
                i + 1,
                rec.len(),
                p + 1
            )));
        }
        for j in 0..=p {
            let v = parse_cell(&rec[j], i + 1, j + 1)?.ok_or_else(|| Error::Parse {
                line: i + 1,
                field: j + 1,
                message: "missing value in a complete file".into(),
            })?;
            if j < p {
                x[(i, j)] = v;
            } else {
                y[i] = v;
            }
        }
    }
    Ok((x, y))
}

/// Centers every column on its observed mean and rescales it so that the
/// pairwise-available variance `(1/n_j) Σ x_ij²` equals one. The response is
/// centered on its mean.
///
/// Zero-variance columns are flagged degenerate (scale 1) rather than
/// rejected; their coefficients stay pinned at zero downstream.
pub fn standardize(
    ds: &BlockMissingDataset,
) -> Result<(BlockMissingDataset, StandardizationReport)> {
    if ds.standardization.is_some() {
        return Err(Error::AlreadyStandardized);
    }
    let (n, p) = (ds.n(), ds.p());
    let mut x = ds.x.clone();
    let mut centers = vec![0.0; p];
    let mut scales = vec![1.0; p];
    let mut degenerate = ds.degenerate.clone();
    for j in 0..p {
        let obs: Vec<usize> = (0..n).filter(|&i| ds.mask[(i, j)]).collect();
        if obs.is_empty() {
            continue;
        }
        let mean = obs.iter().map(|&i| ds.x[(i, j)]).sum::<f64>() / obs.len() as f64;
        centers[j] = mean;
        for &i in &obs {
            x[(i, j)] -= mean;
        }
        let var = obs.iter().map(|&i| x[(i, j)] * x[(i, j)]).sum::<f64>() / obs.len() as f64;
        let spread = obs
            .iter()
            .map(|&i| ds.x[(i, j)].abs())
            .fold(0.0_f64, f64::max)
            .max(1.0);
        if obs.len() < 2 || var.sqrt() <= 1e-12 * spread {
            if !degenerate.contains(&j) {
                degenerate.push(j);
            }
            for &i in &obs {
                x[(i, j)] = 0.0;
            }
            continue;
        }
        let s = 1.0 / var.sqrt();
        scales[j] = s;
        for &i in &obs {
            x[(i, j)] *= s;
        }
    }
    degenerate.sort_unstable();
    let y_center = ds.y.mean();
    let y = ds.y.map(|v| v - y_center);
    let report = StandardizationReport {
        centers,
        scales,
        y_center,
        centered: true,
        degenerate_columns: degenerate.clone(),
    };
    let out = BlockMissingDataset {
        x,
        mask: ds.mask.clone(),
        y,
        layout: ds.layout.clone(),
        degenerate,
        standardization: Some(report.clone()),
    };
    Ok((out, report))
}

/// Observed counts `n_j` and pairwise overlaps `n_jt`.
///
/// Block missingness makes `n_jt` a function of the modality pair only, so
/// the counts are accumulated on the `K × K` modality grid and expanded.
pub fn observation_counts(ds: &BlockMissingDataset) -> ObservationCounts {
    let layout = &ds.layout;
    let k = layout.num_modalities();
    let mut block = DMatrix::<usize>::zeros(k, k);
    for i in 0..ds.n() {
        let seen: Vec<bool> = (0..k).map(|b| ds.block_observed(i, b)).collect();
        for a in 0..k {
            if !seen[a] {
                continue;
            }
            for b in 0..k {
                if seen[b] {
                    block[(a, b)] += 1;
                }
            }
        }
    }
    let labels = layout.labels();
    let p = ds.p();
    let pair = DMatrix::from_fn(p, p, |j, t| block[(labels[j], labels[t])]);
    let column = (0..p).map(|j| pair[(j, j)]).collect();
    ObservationCounts { column, pair }
}
