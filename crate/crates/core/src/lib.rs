//! adaptlab — a desk-scale laboratory for unsupervised acoustic model
//! adaptation driven by automatic quality estimation of recognition
//! hypotheses.
//!
//! The crate wires together a complete two-pass recognition pipeline on
//! synthetic speech-like corpora:
//!
//! - [`corpus`] generates deterministic corpora (lexicon, speakers, noise
//!   conditions) with controllable train/test mismatch, plus per-speaker
//!   feature normalization.
//! - [`lm`] is an interpolated Kneser-Ney n-gram language model.
//! - [`am`] is a feed-forward softmax frame classifier with cross-entropy
//!   training, a newbob learning-rate schedule, state priors and
//!   posterior-to-scaled-likelihood conversion.
//! - [`decoder`] provides token-HMM Viterbi decoding, n-best generation,
//!   forced alignment and confusion networks with word posteriors.
//! - [`scoring`] computes edit alignments, sentence/corpus WER and
//!   utterance-selection policies.
//! - [`qe`] predicts sentence WER from 41 features with an
//!   extremely-randomized-trees regressor.
//! - [`adapt`] implements KLD-regularized adaptation via target blending,
//!   per-sentence soft coefficients and output-transform (oDLR) adaptation.
//! - [`harness`] orchestrates experiments: two-pass runs, grid sweeps,
//!   threshold sweeps and n-best rescoring.

// dynamic-programming loops here index several arrays in lockstep; the
// iterator rewrite the lint suggests reads worse
#![allow(clippy::needless_range_loop)]

pub mod adapt;
pub mod am;
pub mod corpus;
pub mod decoder;
pub mod harness;
pub mod lm;
pub mod qe;
pub mod scoring;
pub mod util;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("utterance too short: {0}")]
    TooShort(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
