//! The lossless verification kernel and the sequential draft-then-verify
//! loop.

mod kernel;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kernel::{
    accept_probability, envelope_accept, envelope_bound, expected_acceptance, residual,
    verify_in_context, verify_window, VerifyOutcome,
};

use crate::models::{ForwardLedger, ModelError, ModelHandle, MultimodalPrefix, TokenContext};
use crate::primitives::{sample, Distribution, SeededRng, TokenId, TokenSequence};
use crate::stats::{self, RunStats, Tally, Timings};
use crate::timing::TimingModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecDecError {
    #[error("draft assigned zero probability to its own proposal {token}")]
    DraftZeroMass { token: TokenId },
    #[error("target mass on token {token} is not covered by the draft")]
    UnboundedEnvelope { token: TokenId },
    #[error("token {token} outside a vocabulary of size {size}")]
    TokenOutOfRange { token: TokenId, size: usize },
    #[error("{drafted} drafted tokens but {dists} draft distributions")]
    WindowMismatch { drafted: usize, dists: usize },
    #[error("window size must be at least 1")]
    EmptyWindowConfig,
    #[error("output must be non-empty")]
    EmptyOutput,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub gamma: usize,
}

impl WindowConfig {
    pub fn new(gamma: usize) -> Result<Self, SpecDecError> {
        if gamma == 0 {
            return Err(SpecDecError::EmptyWindowConfig);
        }
        Ok(Self { gamma })
    }
}

/// Sequential speculative decoding: draft `gamma` tokens, verify them in one
/// target pass, repeat. Each round costs `gamma * T_q(alpha) + T_p`, with
/// `alpha` read from the prefix. The output is truncated to `k` tokens.
pub fn vanilla_sd_generate(
    draft: &ModelHandle,
    target: &ModelHandle,
    prefix: &MultimodalPrefix,
    k: usize,
    window: WindowConfig,
    timing: &TimingModel,
    rng: &mut SeededRng,
) -> Result<(TokenSequence, RunStats), SpecDecError> {
    if k == 0 {
        return Err(ModelError::EmptyOutput.into());
    }
    let gamma = window.gamma;
    let t_q = timing.t_draft_at(prefix.pruning_ratio());
    let mut ledger = ForwardLedger::with_costs(t_q, timing.t_target);
    let mut draft_rng = rng.stream("draft");
    let mut target_rng = rng.stream("target");

    let mut target_ctx = TokenContext::new();
    let mut tally = Tally::new(gamma);
    let mut emitted_total = 0usize;
    while target_ctx.len() < k {
        let mut draft_ctx = target_ctx.clone();
        let mut drafted: Vec<TokenId> = Vec::with_capacity(gamma);
        let mut dists: Vec<Distribution> = Vec::with_capacity(gamma);
        for _ in 0..gamma {
            let q = draft.distribution_in(prefix, &draft_ctx);
            ledger.draft_forward();
            let x = sample(&q, &mut draft_rng);
            draft_ctx.push(x);
            drafted.push(x);
            dists.push(q);
        }
        ledger.verification();
        let out = verify_in_context(
            target,
            prefix,
            &mut target_ctx,
            &drafted,
            &dists,
            &mut target_rng,
            true,
        )?;
        tally.rounds += 1;
        tally.drafts_verified += (out.accepted_count + usize::from(out.corrected)) as u64;
        tally.drafts_accepted += out.accepted_count as u64;
        tally.histogram[out.accepted_count] += 1;
        tally.accept_run(out.accepted_count);
        if out.corrected {
            tally.rollbacks += 1;
            tally.break_run();
        }
        emitted_total += out.emitted.len();
    }
    let mut tokens = TokenSequence::from_ids(target_ctx.tokens().to_vec());
    tokens.truncate(k);
    let m = emitted_total as f64 / tally.rounds as f64;
    let stats = stats::finish(
        &tally,
        gamma,
        k,
        emitted_total,
        m,
        Timings {
            t_target: timing.t_target,
            stage1_ms: 0.0,
            decode_ms: ledger.elapsed_ms,
        },
    );
    Ok((tokens, stats))
}

/// Token-wise acceptance ratio of a fixed output: the mean over positions of
/// the kernel's accept probability `min(1, p/q)`, with `p` from the target and
/// `q` from `reference_q`, both conditioned on the same prefix and the output
/// so far.
pub fn measure_acceptance_ratio(
    target: &ModelHandle,
    prefix_full: &MultimodalPrefix,
    fixed_output: &TokenSequence,
    reference_q: &ModelHandle,
) -> Result<f64, SpecDecError> {
    if fixed_output.is_empty() {
        return Err(SpecDecError::EmptyOutput);
    }
    let mut ctx = TokenContext::new();
    let mut total = 0.0;
    for &x in fixed_output.ids() {
        let p = target.distribution_in(prefix_full, &ctx);
        let q = reference_q.distribution_in(prefix_full, &ctx);
        total += accept_probability(&p, &q, x)?;
        ctx.push(x);
    }
    Ok(total / fixed_output.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{autoregressive_generate, make_synthetic_pair, AlignmentSpec};
    use crate::primitives::Vocab;

    fn pair(base: f64) -> (ModelHandle, ModelHandle) {
        make_synthetic_pair(Vocab::new(12).unwrap(), AlignmentSpec::new(base, 0.0), &mut SeededRng::new(7)).unwrap()
    }

    #[test]
    fn aligned_rounds_emit_window_plus_bonus() {
        let (d, t) = pair(1.0);
        let prefix = MultimodalPrefix::synthetic(10, 4, 1);
        let timing = TimingModel::constant(10.0, 50.0);
        let (out, stats) =
            vanilla_sd_generate(&d, &t, &prefix, 60, WindowConfig::new(5).unwrap(), &timing, &mut SeededRng::new(3)).unwrap();
        assert_eq!(out.len(), 60);
        assert_eq!(stats.mean_accepted_length, 6.0);
        assert!((stats.per_token_ms - (5.0 * 10.0 + 50.0) / 6.0).abs() < 1e-9);
    }

    #[test]
    fn misaligned_rounds_emit_one_token() {
        let (d, t) = pair(0.0);
        let prefix = MultimodalPrefix::synthetic(10, 4, 1);
        let timing = TimingModel::constant(10.0, 50.0);
        let (_, stats) =
            vanilla_sd_generate(&d, &t, &prefix, 30, WindowConfig::new(4).unwrap(), &timing, &mut SeededRng::new(3)).unwrap();
        assert_eq!(stats.mean_accepted_length, 1.0);
        assert_eq!(stats.tau_hat, 0.0);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let (d, t) = pair(0.6);
        let prefix = MultimodalPrefix::synthetic(10, 4, 1);
        let timing = TimingModel::constant(10.0, 50.0);
        let run = || vanilla_sd_generate(&d, &t, &prefix, 40, WindowConfig::new(3).unwrap(), &timing, &mut SeededRng::new(11)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn acceptance_ratio_extremes() {
        let prefix = MultimodalPrefix::synthetic(10, 4, 1);
        let (d, t) = pair(0.0);
        let own = autoregressive_generate(&t, &prefix, 50, &mut SeededRng::new(1), &mut ForwardLedger::new()).unwrap();
        assert_eq!(measure_acceptance_ratio(&t, &prefix, &own, &t).unwrap(), 1.0);
        let other = autoregressive_generate(&d, &prefix, 50, &mut SeededRng::new(1), &mut ForwardLedger::new()).unwrap();
        assert_eq!(measure_acceptance_ratio(&t, &prefix, &other, &d).unwrap(), 0.0);
        assert!(WindowConfig::new(0).is_err());
    }
}
