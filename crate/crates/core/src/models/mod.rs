//! Autoregressive model abstraction and the synthetic stand-ins used for the
//! draft and target models.

mod ngram;
mod prefix;
mod scripted;
mod synthetic;

use std::sync::Arc;

use thiserror::Error;

pub use ngram::NGramModel;
pub use prefix::{MultimodalPrefix, PrefixKeys, TokenContext};
pub use scripted::{Detour, ScriptSpec, ScriptedModel};
pub use synthetic::{
    make_synthetic_pair, pair_from_params, target_support, AlignmentSpec, PairRole,
    SyntheticMember, SyntheticPairParams,
};

use crate::primitives::{sample, Distribution, SeededRng, TokenSequence, Vocab};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid retained video set: {0}")]
    InvalidRetained(String),
    #[error("invalid alignment spec: {0}")]
    InvalidAlignment(String),
    #[error("invalid script: {0}")]
    Script(String),
    #[error("output length must be at least 1")]
    EmptyOutput,
}

/// A draft or target model. Handles are cheap to clone and can be used from
/// several threads at once; the distribution is a pure function of the
/// handle, the prefix and the generated suffix.
#[derive(Debug, Clone)]
pub enum ModelHandle {
    Synthetic(Arc<SyntheticMember>),
    Scripted(Arc<ScriptedModel>),
    NGram(Arc<NGramModel>),
}

impl ModelHandle {
    pub fn scripted_pair(spec: ScriptSpec) -> (ModelHandle, ModelHandle) {
        let draft = ScriptedModel {
            spec: spec.clone(),
            role: PairRole::Draft,
        };
        let target = ScriptedModel {
            spec,
            role: PairRole::Target,
        };
        (
            ModelHandle::Scripted(Arc::new(draft)),
            ModelHandle::Scripted(Arc::new(target)),
        )
    }

    pub fn scripted_target(script: Vec<crate::primitives::TokenId>) -> ModelHandle {
        ModelHandle::Scripted(Arc::new(ScriptedModel {
            spec: ScriptSpec::target_only(script),
            role: PairRole::Target,
        }))
    }

    pub fn ngram(model: NGramModel) -> ModelHandle {
        ModelHandle::NGram(Arc::new(model))
    }

    pub fn vocab(&self) -> Vocab {
        match self {
            ModelHandle::Synthetic(m) => m.params.vocab,
            ModelHandle::Scripted(m) => m.spec.vocab(),
            ModelHandle::NGram(m) => m.vocab(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelHandle::Synthetic(_) => "synthetic-pair-member",
            ModelHandle::Scripted(_) => "scripted",
            ModelHandle::NGram(_) => "ngram",
        }
    }

    /// Next-token distribution given an incrementally maintained context.
    pub fn distribution_in(&self, prefix: &MultimodalPrefix, ctx: &TokenContext) -> Distribution {
        match self {
            ModelHandle::Synthetic(m) => m.distribution(prefix, ctx),
            ModelHandle::Scripted(m) => m.distribution(ctx.tokens()),
            ModelHandle::NGram(m) => {
                let mut history = prefix.text_ids().ids().to_vec();
                history.extend_from_slice(ctx.tokens());
                m.distribution(&history)
            }
        }
    }

    /// Next-token distribution after `suffix`, recomputed from scratch.
    pub fn next_distribution(&self, prefix: &MultimodalPrefix, suffix: &TokenSequence) -> Distribution {
        self.distribution_in(prefix, &TokenContext::from_tokens(suffix.ids()))
    }
}

/// Counts forward passes and the simulated time they cost.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardLedger {
    pub draft_forwards: u64,
    pub target_forwards: u64,
    pub verification_events: u64,
    pub elapsed_ms: f64,
    draft_cost_ms: f64,
    target_cost_ms: f64,
}

impl ForwardLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_costs(draft_cost_ms: f64, target_cost_ms: f64) -> Self {
        Self {
            draft_cost_ms,
            target_cost_ms,
            ..Self::default()
        }
    }

    pub fn draft_forward(&mut self) {
        self.draft_forwards += 1;
        self.elapsed_ms += self.draft_cost_ms;
    }

    pub fn target_forward(&mut self) {
        self.target_forwards += 1;
        self.elapsed_ms += self.target_cost_ms;
    }

    /// One batched verification pass of the target, charged as a single
    /// target forward.
    pub fn verification(&mut self) {
        self.verification_events += 1;
        self.target_forward();
    }
}

/// Plain autoregressive sampling from one model, charging one target forward
/// per token.
pub fn autoregressive_generate(
    model: &ModelHandle,
    prefix: &MultimodalPrefix,
    k: usize,
    rng: &mut SeededRng,
    ledger: &mut ForwardLedger,
) -> Result<TokenSequence, ModelError> {
    if k == 0 {
        return Err(ModelError::EmptyOutput);
    }
    let mut ctx = TokenContext::new();
    for _ in 0..k {
        let d = model.distribution_in(prefix, &ctx);
        ledger.target_forward();
        ctx.push(sample(&d, rng));
    }
    Ok(TokenSequence::from_ids(ctx.tokens().to_vec()))
}
