//! Masked discrete diffusion sampling over exactly tractable sequence
//! distributions.
//!
//! The crate simulates the absorbing-state ("mask") diffusion process for
//! fixed-length token sequences: a forward process that masks positions
//! according to a size schedule, and a reverse process that reveals them by
//! sampling from per-position conditional predictors. Because the data
//! distributions here are exactly tractable (small probability tables and
//! Potts chains), the sampling error, its decomposition identities, and the
//! information-theoretic convergence bounds can all be evaluated in exact
//! arithmetic or with unbiased Monte Carlo estimators.
//!
//! Module map:
//! - [`seq`] — sequences, mask sets, schedules, trajectories, and the forward
//!   masking process.
//! - [`dist`] — exact probability oracles: tabular distributions and the
//!   K-state Potts chain, with conditionals, entropies, and mutual
//!   information.
//! - [`predictor`] — optimal and perturbed mask predictors plus training-error
//!   evaluation.
//! - [`sampler`] — the reverse (generation) process and the entropy-adaptive
//!   unmasking policy.
//! - [`analysis`] — KL measurement (exact and Monte Carlo), decomposition
//!   identity checks, and the convergence bounds.

pub mod analysis;
pub mod dist;
pub mod predictor;
pub mod sampler;
pub mod seq;
pub mod util;

// Re-exported so downstream crates can name RNG traits without pinning their
// own rand version.
pub use rand;

use thiserror::Error;

/// Errors surfaced by the simulation and analysis operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// A brute-force guard was exceeded; the requested exact computation is
    /// not feasible at this instance size.
    #[error("instance too large: {0}")]
    TooLarge(String),

    /// A conditional was requested on an observed context with zero
    /// probability under the oracle.
    #[error("zero-probability context at position {position}")]
    ZeroProbabilityContext { position: usize },

    /// Wraps an error with the Monte Carlo replicate index it occurred in.
    #[error("sample {index}: {source}")]
    AtSample {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use dist::{Categorical, PottsChain, SequenceDistribution, TabularDistribution};
pub use predictor::{MaskPredictor, TrainingError};
pub use sampler::{SampleRun, UnmaskPolicy};
pub use seq::{MaskSchedule, MaskTrajectory, MaskedSequence, Sequence, Token, Vocabulary};
