//! Training toolkit for classifiers on extremely class-imbalanced
//! multi-spectral imagery.
//!
//! The crate covers the full pipeline: dataset representation and synthetic
//! generation ([`data`]), re-sampling and re-weighting schemes ([`sampling`]),
//! margin losses with deferred re-weighting ([`losses`]), cyclical learning
//! rates and stochastic weight averaging ([`schedule`]), imbalance-aware
//! evaluation ([`metrics`]), a small reference CNN ([`model`]), DC-GAN
//! minority-class augmentation ([`gan`]), and a config-driven experiment
//! runner ([`harness`]).
//!
//! All randomness flows from explicit seeds and every numeric kernel is
//! bit-deterministic regardless of thread count, so identical configs produce
//! identical results.

pub mod data;
pub mod gan;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod sampling;
pub mod schedule;

use std::path::PathBuf;

/// Unified error type for the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    /// A contract violation in the inputs (mismatched lengths, out-of-range
    /// labels, empty collections, invalid priors, ...).
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown band {wanted:?}; available bands: {available:?}")]
    UnknownBand { wanted: String, available: Vec<String> },

    #[error("band {band:?} is degenerate (zero standard deviation)")]
    DegenerateBand { band: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training produced a non-finite value; aborting beats silently
    /// continuing with garbage weights.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Parse { path: path.into(), detail: detail.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Derives an independent child seed from a master seed and a purpose tag.
///
/// Distinct purposes (model init, sampler, augmentation, ...) get decorrelated
/// RNG streams while staying fully determined by the master seed. Uses the
/// splitmix64 finalizer, which is bijective per purpose.
pub fn child_seed(master: u64, purpose: u64) -> u64 {
    let mut z = master ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG purpose tags used by the experiment harness. Kept in one place so the
/// derivation of every random stream from the master seed is auditable.
pub mod seeds {
    pub const DATA_TRAIN: u64 = 1;
    pub const DATA_VAL: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const SAMPLER: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const GAN_TRAIN: u64 = 6;
    pub const GAN_BALANCE: u64 = 7;
}
