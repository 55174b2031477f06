//! Direct sparse regression for multimodal data with block-wise missingness
//! and additive measurement error.
//!
//! The pipeline runs `datamodel` (ingest and standardize) into `moments`
//! (pairwise-available or Huber estimates of `Σ` and `C`), then `fusion`
//! (a positive semi-definite combination), then `solver` (coordinate-descent
//! LASSO on the covariance form). `tuning` selects weights and `λ` on a
//! complete holdout, and `simulation` reproduces the benchmark scenarios.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod fusion;
pub mod moments;
pub mod simulation;
pub mod solver;
pub mod tuning;

pub use datamodel::{BlockMissingDataset, ModalityLayout, StandardizationReport};
pub use error::{Error, Result};
pub use fusion::{CombinedCovariance, FastBounds, FusionWeights};
pub use moments::{HuberPolicy, MomentPartition, PairwiseMoments};
pub use solver::{FitResult, SolverOptions};
pub use tuning::{Method, TuneResult, TuneSpec};
