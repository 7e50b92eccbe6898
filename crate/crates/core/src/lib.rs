//! Speculative decoding over synthetic draft/target pairs: the lossless
//! verification kernel, a two-stage parallel draft/verify pipeline, verifier
//! guided visual token pruning and closed-form speedup formulas.

pub mod models;
pub mod primitives;
pub mod timing;
pub mod pipeline;
pub mod specdec;
pub mod stats;
pub mod theory;
pub mod uvprune;
