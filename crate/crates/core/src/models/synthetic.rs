//! Synthetic draft/target pairs with a single alignment knob.
//!
//! For every context the target puts its mass on a text-determined half of
//! the vocabulary `S`, with weights `T_i * (1 + w * U_i)`: `T` depends on the
//! text and the generated suffix, `U` additionally on every video token. The
//! draft is the mixture
//!
//! ```text
//! q = lambda_eff * A + (1 - lambda_eff) * noise
//! ```
//!
//! where `noise` lives on the complement of `S` and is keyed by the context
//! the draft can see. `A` is the target distribution itself while at least
//! one video token is retained, and the text-only marginal `normalize(T)`
//! once every video token is pruned. `lambda_eff = clamp(lambda - s * alpha)`
//! with `s` the prune sensitivity.
//!
//! Because `noise` and the target have disjoint supports, the kernel accepts
//! a proposal exactly when it came from the `A` component, so the expected
//! acceptance per token is `sum_x min(p, q) = lambda_eff` whenever `A = p`,
//! independently of the context. This mixture is a modelling choice: it
//! gives one knob for the acceptance rate that every speedup formula
//! consumes.

use serde::{Deserialize, Serialize};

use super::{ModelError, MultimodalPrefix, TokenContext};
use crate::primitives::{mix64, Distribution, SeededRng, TokenId, Vocab};

/// Requested draft/target alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSpec {
    /// Per-token acceptance probability with full context, in `[0, 1]`.
    pub base_alignment: f64,
    /// Loss of alignment per unit of pruning ratio, `>= 0`.
    #[serde(default)]
    pub prune_sensitivity: f64,
    /// Strength of the video-dependent part of the target distribution.
    #[serde(default = "default_video_weight")]
    pub video_weight: f64,
}

fn default_video_weight() -> f64 {
    3.0
}

impl AlignmentSpec {
    pub fn new(base_alignment: f64, prune_sensitivity: f64) -> Self {
        Self {
            base_alignment,
            prune_sensitivity,
            video_weight: default_video_weight(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.base_alignment) {
            return Err(ModelError::InvalidAlignment(format!(
                "base_alignment {} outside [0, 1]",
                self.base_alignment
            )));
        }
        if !(self.prune_sensitivity >= 0.0 && self.prune_sensitivity.is_finite()) {
            return Err(ModelError::InvalidAlignment(format!(
                "prune_sensitivity {} must be finite and >= 0",
                self.prune_sensitivity
            )));
        }
        if !(self.video_weight >= 0.0 && self.video_weight.is_finite()) {
            return Err(ModelError::InvalidAlignment(format!(
                "video_weight {} must be finite and >= 0",
                self.video_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRole {
    Draft,
    Target,
}

/// Shared parameters of one synthetic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPairParams {
    pub vocab: Vocab,
    /// Mixing weight of the aligned component at full context.
    pub lambda: f64,
    pub prune_sensitivity: f64,
    pub video_weight: f64,
    pub seed: u64,
}

/// One member of a synthetic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMember {
    pub params: SyntheticPairParams,
    pub role: PairRole,
}

/// Small deterministic stream used to expand a context key into weights.
struct KeyStream(u64);

impl KeyStream {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix64(self.0)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl SyntheticPairParams {
    /// Membership mask of the target support for a text/suffix context.
    fn support(&self, text_key: u64, suffix_hash: u64) -> Vec<bool> {
        let v = self.vocab.size();
        let half = (v / 2).max(1);
        let mut order: Vec<usize> = (0..v).collect();
        let mut ks = KeyStream(mix64(self.seed ^ text_key ^ suffix_hash.rotate_left(7) ^ 0x5u64));
        for i in 0..half {
            let j = i + (ks.next() % (v - i) as u64) as usize;
            order.swap(i, j);
        }
        let mut mask = vec![false; v];
        for &i in &order[..half] {
            mask[i] = true;
        }
        mask
    }

    fn text_weights(&self, text_key: u64, suffix_hash: u64) -> KeyStream {
        KeyStream(mix64(self.seed ^ text_key.rotate_left(13) ^ suffix_hash ^ 0x7u64))
    }

    fn video_weights(&self, full_key: u64, suffix_hash: u64) -> KeyStream {
        KeyStream(mix64(self.seed ^ full_key.rotate_left(29) ^ suffix_hash ^ 0xbu64))
    }

    fn target_and_marginal(
        &self,
        keys: super::PrefixKeys,
        suffix_hash: u64,
    ) -> (Vec<bool>, Vec<f64>, Vec<f64>) {
        let v = self.vocab.size();
        let support = self.support(keys.text, suffix_hash);
        let mut t_stream = self.text_weights(keys.text, suffix_hash);
        let mut u_stream = self.video_weights(keys.full, suffix_hash);
        let mut target = vec![0.0; v];
        let mut marginal = vec![0.0; v];
        for i in 0..v {
            let t = 0.05 + t_stream.unit();
            let u = u_stream.unit();
            if support[i] {
                marginal[i] = t;
                target[i] = t * (1.0 + self.video_weight * u);
            }
        }
        scale_to_one(&mut target);
        scale_to_one(&mut marginal);
        (support, target, marginal)
    }

    fn noise(&self, visible_key: u64, suffix_hash: u64, support: &[bool]) -> Vec<f64> {
        let mut ks = KeyStream(mix64(self.seed ^ visible_key.rotate_left(41) ^ suffix_hash ^ 0xdu64));
        let mut noise: Vec<f64> = support
            .iter()
            .map(|&inside| {
                let w = 0.05 + ks.unit();
                if inside {
                    0.0
                } else {
                    w
                }
            })
            .collect();
        scale_to_one(&mut noise);
        noise
    }

    /// Mixing weight the draft uses for a prefix, after the pruning penalty.
    pub fn effective_lambda(&self, prefix: &MultimodalPrefix) -> f64 {
        (self.lambda - self.prune_sensitivity * prefix.pruning_ratio()).clamp(0.0, 1.0)
    }

    pub fn target_distribution(&self, prefix: &MultimodalPrefix, suffix_hash: u64) -> Distribution {
        let (_, target, _) = self.target_and_marginal(prefix.keys(), suffix_hash);
        into_distribution(target)
    }

    /// Target distribution with the video-dependent factor averaged out.
    pub fn text_marginal(&self, prefix: &MultimodalPrefix, suffix_hash: u64) -> Distribution {
        let (_, _, marginal) = self.target_and_marginal(prefix.keys(), suffix_hash);
        into_distribution(marginal)
    }

    pub fn draft_distribution(&self, prefix: &MultimodalPrefix, suffix_hash: u64) -> Distribution {
        let lambda = self.effective_lambda(prefix);
        let (support, target, marginal) = self.target_and_marginal(prefix.keys(), suffix_hash);
        let aligned = if prefix.video_fully_pruned() {
            marginal
        } else {
            target
        };
        if lambda >= 1.0 {
            return into_distribution(aligned);
        }
        let noise = self.noise(prefix.keys().visible, suffix_hash, &support);
        let mixed: Vec<f64> = aligned
            .iter()
            .zip(&noise)
            .map(|(a, n)| lambda * a + (1.0 - lambda) * n)
            .collect();
        into_distribution(mixed)
    }
}

fn scale_to_one(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

fn into_distribution(mut probs: Vec<f64>) -> Distribution {
    // Entries are non-negative by construction; re-scale once more so the
    // sum lands inside the normalization tolerance.
    scale_to_one(&mut probs);
    Distribution::new(probs).expect("synthetic weights are positive and normalized")
}

impl SyntheticMember {
    pub fn distribution(&self, prefix: &MultimodalPrefix, ctx: &TokenContext) -> Distribution {
        match self.role {
            PairRole::Target => self.params.target_distribution(prefix, ctx.hash()),
            PairRole::Draft => self.params.draft_distribution(prefix, ctx.hash()),
        }
    }
}

/// Builds a draft/target pair whose full-context acceptance rate equals
/// `spec.base_alignment`.
pub fn make_synthetic_pair(
    vocab: Vocab,
    spec: AlignmentSpec,
    rng: &mut SeededRng,
) -> Result<(super::ModelHandle, super::ModelHandle), ModelError> {
    spec.validate()?;
    let params = SyntheticPairParams {
        vocab,
        // With disjoint noise support the acceptance rate equals the mixing
        // weight exactly, so calibration is the identity map.
        lambda: spec.base_alignment,
        prune_sensitivity: spec.prune_sensitivity,
        video_weight: spec.video_weight,
        seed: rng.next_u64(),
    };
    Ok(pair_from_params(params))
}

pub fn pair_from_params(params: SyntheticPairParams) -> (super::ModelHandle, super::ModelHandle) {
    let draft = SyntheticMember {
        params: params.clone(),
        role: PairRole::Draft,
    };
    let target = SyntheticMember {
        params,
        role: PairRole::Target,
    };
    (
        super::ModelHandle::Synthetic(std::sync::Arc::new(draft)),
        super::ModelHandle::Synthetic(std::sync::Arc::new(target)),
    )
}

/// Token ids in the target support for a context; exposed for tests.
pub fn target_support(
    params: &SyntheticPairParams,
    prefix: &MultimodalPrefix,
    ctx: &TokenContext,
) -> Vec<TokenId> {
    params
        .support(prefix.keys().text, ctx.hash())
        .iter()
        .enumerate()
        .filter(|(_, &inside)| inside)
        .map(|(i, _)| i as TokenId)
        .collect()
}
