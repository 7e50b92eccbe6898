//! Vocabulary, probability, sequence and randomness types shared by every
//! other module.

mod dist;
mod rng;
mod seq;

pub use dist::{normalize, sample, total_variation, Distribution};
pub use rng::{mix64, SeededRng};
pub use seq::{TokenId, TokenSequence, Vocab};

use thiserror::Error;

/// Absolute tolerance for the sum-to-one invariant of [`Distribution`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrimitiveError {
    #[error("vocabulary must contain at least 2 tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("every entry of the raw vector is zero")]
    AllZero,
    #[error("entry {index} is negative or not finite: {value}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("token id {id} is outside a vocabulary of size {size}")]
    TokenOutOfRange { id: TokenId, size: usize },
    #[error("distributions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}
