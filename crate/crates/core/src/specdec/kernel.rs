use serde::{Deserialize, Serialize};

use super::SpecDecError;
use crate::models::{ModelHandle, MultimodalPrefix, TokenContext};
use crate::primitives::{normalize, sample, Distribution, SeededRng, TokenId, TokenSequence};

/// `min(1, p[token] / q[token])`.
pub fn accept_probability(p: &Distribution, q: &Distribution, token: TokenId) -> Result<f64, SpecDecError> {
    check_token(q, token)?;
    let qx = q.prob(token);
    if qx <= 0.0 {
        return Err(SpecDecError::DraftZeroMass { token });
    }
    Ok((p.prob(token) / qx).min(1.0))
}

/// The normalized positive part of `p - q`. Falls back to `p` when the
/// positive part vanishes, which only happens for `p = q`.
pub fn residual(p: &Distribution, q: &Distribution) -> Distribution {
    let raw: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    normalize(&raw).unwrap_or_else(|_| p.clone())
}

/// Expected per-token acceptance of the kernel, `sum_i min(p_i, q_i)`.
pub fn expected_acceptance(p: &Distribution, q: &Distribution) -> f64 {
    p.probs().iter().zip(q.probs()).map(|(a, b)| a.min(*b)).sum()
}

/// Smallest `M` with `p <= M q` everywhere.
pub fn envelope_bound(p: &Distribution, q: &Distribution) -> Result<f64, SpecDecError> {
    let mut m: f64 = 0.0;
    for (i, (&pi, &qi)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(SpecDecError::UnboundedEnvelope { token: i as TokenId });
            }
            m = m.max(pi / qi);
        }
    }
    Ok(m)
}

/// Classical envelope rejection test: a proposal `x ~ q` is accepted with
/// probability `p(x) / (M q(x))`, so accepted tokens are distributed exactly
/// as `p` and the acceptance rate is `1 / M`. Rejection yields no token.
pub fn envelope_accept(
    p: &Distribution,
    q: &Distribution,
    token: TokenId,
    rng: &mut SeededRng,
) -> Result<bool, SpecDecError> {
    let m = envelope_bound(p, q)?;
    check_token(q, token)?;
    let qx = q.prob(token);
    if qx <= 0.0 {
        return Err(SpecDecError::DraftZeroMass { token });
    }
    let prob = (p.prob(token) / (m * qx)).min(1.0);
    Ok(rng.next_f64() < prob)
}

fn check_token(q: &Distribution, token: TokenId) -> Result<(), SpecDecError> {
    if (token as usize) < q.len() {
        Ok(())
    } else {
        Err(SpecDecError::TokenOutOfRange { token, size: q.len() })
    }
}

/// Result of verifying one draft window.
///
/// `emitted` holds the accepted prefix followed by the correction when
/// `corrected`, or by the bonus token when one was requested and the whole
/// window was accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub accepted_count: usize,
    pub emitted: TokenSequence,
    pub corrected: bool,
    pub bonus: bool,
}

/// Verifies `drafted` against the target given the target context `ctx`,
/// pushing every emitted token onto `ctx`. Each position draws one uniform
/// for the accept test; a rejection draws one more for the residual sample.
pub fn verify_in_context(
    target: &ModelHandle,
    prefix: &MultimodalPrefix,
    ctx: &mut TokenContext,
    drafted: &[TokenId],
    draft_dists: &[Distribution],
    rng: &mut SeededRng,
    bonus: bool,
) -> Result<VerifyOutcome, SpecDecError> {
    if drafted.len() != draft_dists.len() {
        return Err(SpecDecError::WindowMismatch {
            drafted: drafted.len(),
            dists: draft_dists.len(),
        });
    }
    let mut emitted = TokenSequence::new();
    for (i, (&x, q)) in drafted.iter().zip(draft_dists).enumerate() {
        let p = target.distribution_in(prefix, ctx);
        let a = accept_probability(&p, q, x)?;
        if rng.next_f64() < a {
            ctx.push(x);
            emitted.push(x);
        } else {
            let y = sample(&residual(&p, q), rng);
            ctx.push(y);
            emitted.push(y);
            return Ok(VerifyOutcome {
                accepted_count: i,
                emitted,
                corrected: true,
                bonus: false,
            });
        }
    }
    if bonus {
        let p = target.distribution_in(prefix, ctx);
        let y = sample(&p, rng);
        ctx.push(y);
        emitted.push(y);
    }
    Ok(VerifyOutcome {
        accepted_count: drafted.len(),
        emitted,
        corrected: false,
        bonus,
    })
}

/// One batched verification of a full draft window, with a bonus token from
/// the target when every draft is accepted.
pub fn verify_window(
    target: &ModelHandle,
    prefix: &MultimodalPrefix,
    accepted: &TokenSequence,
    drafted: &TokenSequence,
    draft_dists: &[Distribution],
    rng: &mut SeededRng,
) -> Result<VerifyOutcome, SpecDecError> {
    let mut ctx = TokenContext::from_tokens(accepted.ids());
    verify_in_context(target, prefix, &mut ctx, drafted.ids(), draft_dists, rng, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ScriptSpec;
    use crate::primitives::{total_variation, Vocab};

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn accept_probability_examples() {
        let p = d(&[0.5, 0.5]);
        assert_eq!(accept_probability(&p, &p, 1).unwrap(), 1.0);
        assert_eq!(accept_probability(&p, &d(&[1.0, 0.0]), 0).unwrap(), 0.5);
        assert_eq!(accept_probability(&d(&[0.9, 0.1]), &d(&[0.3, 0.7]), 0).unwrap(), 1.0);
        assert_eq!(
            accept_probability(&p, &d(&[1.0, 0.0]), 1),
            Err(SpecDecError::DraftZeroMass { token: 1 })
        );
    }

    #[test]
    fn residual_examples() {
        assert_eq!(residual(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])).probs(), &[0.0, 1.0]);
        let p = d(&[0.2, 0.3, 0.5]);
        assert_eq!(residual(&p, &p), p);
        let r = residual(&d(&[0.6, 0.3, 0.1]), &d(&[0.2, 0.7, 0.1]));
        assert!(total_variation(&r, &d(&[1.0, 0.0, 0.0])).unwrap() < 1e-12);
    }

    #[test]
    fn envelope_bound_is_max_ratio() {
        assert!((envelope_bound(&d(&[0.5, 0.5]), &d(&[0.25, 0.75])).unwrap() - 2.0).abs() < 1e-12);
        assert!(envelope_bound(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn scripted_rejection_mid_window() {
        let spec = ScriptSpec {
            script: vec![0, 1, 2],
            accept_mask: vec![true, true, false],
            words: vec![],
            detours: vec![],
        };
        let (draft, target) = ModelHandle::scripted_pair(spec);
        let prefix = MultimodalPrefix::synthetic(4, 2, 0);
        let mut ctx = TokenContext::new();
        let mut drafted = Vec::new();
        let mut dists = Vec::new();
        for _ in 0..3 {
            let q = draft.distribution_in(&prefix, &ctx);
            let x = q.argmax();
            ctx.push(x);
            drafted.push(x);
            dists.push(q);
        }
        let out = verify_window(
            &target,
            &prefix,
            &TokenSequence::new(),
            &drafted.into(),
            &dists,
            &mut SeededRng::new(3),
        )
        .unwrap();
        assert_eq!(out.accepted_count, 2);
        assert!(out.corrected);
        assert_eq!(out.emitted.ids(), &[0, 1, 2]);
    }

    #[test]
    fn aligned_window_gets_bonus() {
        let v = Vocab::new(6).unwrap();
        let (draft, target) = crate::models::make_synthetic_pair(
            v,
            crate::models::AlignmentSpec::new(1.0, 0.0),
            &mut SeededRng::new(1),
        )
        .unwrap();
        let prefix = MultimodalPrefix::synthetic(4, 2, 0);
        let mut rng = SeededRng::new(2);
        let mut ctx = TokenContext::new();
        let (mut drafted, mut dists) = (Vec::new(), Vec::new());
        for _ in 0..4 {
            let q = draft.distribution_in(&prefix, &ctx);
            let x = sample(&q, &mut rng);
            ctx.push(x);
            drafted.push(x);
            dists.push(q);
        }
        let out = verify_window(&target, &prefix, &TokenSequence::new(), &drafted.into(), &dists, &mut rng).unwrap();
        assert_eq!(out.accepted_count, 4);
        assert!(!out.corrected && out.bonus);
        assert_eq!(out.emitted.len(), 5);
    }
}
