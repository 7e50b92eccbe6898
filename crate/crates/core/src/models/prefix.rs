use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::primitives::{mix64, TokenId, TokenSequence};

const VIDEO_SALT: u64 = 0x7669_6465_6f00_0001;
const TEXT_SALT: u64 = 0x7465_7874_0000_0002;
const SUFFIX_ROOT: u64 = 0x7375_6666_6978_0003;

/// Video tokens followed by text tokens, with an optional pruned subset of
/// the video tokens that the draft model gets to see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrefixRepr", into = "PrefixRepr")]
pub struct MultimodalPrefix {
    video_ids: TokenSequence,
    text_ids: TokenSequence,
    retained_video: Option<Vec<usize>>,
    keys: PrefixKeys,
}

/// Content hashes of the prefix as seen with full context, text only, and
/// through the retained video subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixKeys {
    pub full: u64,
    pub text: u64,
    pub visible: u64,
}

#[derive(Serialize, Deserialize)]
struct PrefixRepr {
    video_ids: TokenSequence,
    text_ids: TokenSequence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    retained_video: Option<Vec<usize>>,
}

impl TryFrom<PrefixRepr> for MultimodalPrefix {
    type Error = ModelError;

    fn try_from(r: PrefixRepr) -> Result<Self, ModelError> {
        let prefix = Self::new(r.video_ids, r.text_ids);
        match r.retained_video {
            Some(keep) => prefix.with_retained(keep),
            None => Ok(prefix),
        }
    }
}

impl From<MultimodalPrefix> for PrefixRepr {
    fn from(p: MultimodalPrefix) -> Self {
        Self {
            video_ids: p.video_ids,
            text_ids: p.text_ids,
            retained_video: p.retained_video,
        }
    }
}

fn hash_video<'a>(entries: impl Iterator<Item = (usize, &'a TokenId)>) -> u64 {
    entries.fold(VIDEO_SALT, |h, (i, &id)| {
        mix64(h ^ mix64(((i as u64) << 32) ^ id as u64))
    })
}

fn hash_text(text: &TokenSequence) -> u64 {
    text.ids()
        .iter()
        .fold(TEXT_SALT, |h, &id| mix64(h ^ mix64(id as u64 + 1)))
}

impl MultimodalPrefix {
    pub fn new(video_ids: TokenSequence, text_ids: TokenSequence) -> Self {
        let text = hash_text(&text_ids);
        let full = mix64(hash_video(video_ids.ids().iter().enumerate()) ^ text);
        Self {
            video_ids,
            text_ids,
            retained_video: None,
            keys: PrefixKeys {
                full,
                text,
                visible: full,
            },
        }
    }

    /// Deterministic synthetic prefix with `m` video and `n` text tokens.
    pub fn synthetic(m: usize, n: usize, seed: u64) -> Self {
        let video = (0..m)
            .map(|i| (mix64(seed ^ (i as u64)) % 50_000) as TokenId)
            .collect::<Vec<_>>();
        let text = (0..n)
            .map(|i| (mix64(seed.rotate_left(17) ^ (i as u64 + 1)) % 50_000) as TokenId)
            .collect::<Vec<_>>();
        Self::new(video.into(), text.into())
    }

    /// Restricts the draft's view to `keep`, which must be a strict subset of
    /// the video positions, sorted ascending without duplicates.
    pub fn with_retained(mut self, keep: Vec<usize>) -> Result<Self, ModelError> {
        let m = self.video_ids.len();
        if keep.len() >= m && m > 0 {
            return Err(ModelError::InvalidRetained(format!(
                "retained set of size {} is not a strict subset of {m} video tokens",
                keep.len()
            )));
        }
        if let Some(w) = keep.windows(2).find(|w| w[0] >= w[1]) {
            return Err(ModelError::InvalidRetained(format!(
                "indices must be strictly ascending, found {} then {}",
                w[0], w[1]
            )));
        }
        if let Some(&i) = keep.iter().find(|&&i| i >= m) {
            return Err(ModelError::InvalidRetained(format!(
                "index {i} out of range for {m} video tokens"
            )));
        }
        let video = self.video_ids.ids();
        let visible = hash_video(keep.iter().map(|&i| (i, &video[i])));
        self.keys.visible = mix64(visible ^ self.keys.text);
        self.retained_video = Some(keep);
        Ok(self)
    }

    /// Keeps `round((1 - alpha) * m)` evenly spaced video tokens. `alpha = 0`
    /// leaves the prefix unpruned; `alpha = 1` drops every video token.
    pub fn pruned_evenly(self, alpha: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ModelError::InvalidRetained(format!(
                "pruning ratio {alpha} outside [0, 1]"
            )));
        }
        let m = self.video_ids.len();
        let keep = ((1.0 - alpha) * m as f64 + 0.5).floor() as usize;
        if keep >= m {
            return Ok(self.unpruned());
        }
        let indices = (0..keep).map(|j| j * m / keep.max(1)).collect();
        self.with_retained(indices)
    }

    pub fn unpruned(mut self) -> Self {
        self.retained_video = None;
        self.keys.visible = self.keys.full;
        self
    }

    pub fn video_ids(&self) -> &TokenSequence {
        &self.video_ids
    }

    pub fn text_ids(&self) -> &TokenSequence {
        &self.text_ids
    }

    pub fn retained_video(&self) -> Option<&[usize]> {
        self.retained_video.as_deref()
    }

    pub fn keys(&self) -> PrefixKeys {
        self.keys
    }

    /// Fraction of video tokens hidden from the draft.
    pub fn pruning_ratio(&self) -> f64 {
        match &self.retained_video {
            None => 0.0,
            Some(keep) if self.video_ids.is_empty() => {
                debug_assert!(keep.is_empty());
                0.0
            }
            Some(keep) => 1.0 - keep.len() as f64 / self.video_ids.len() as f64,
        }
    }

    /// True when pruning removed every video token.
    pub fn video_fully_pruned(&self) -> bool {
        matches!(&self.retained_video, Some(k) if k.is_empty() && !self.video_ids.is_empty())
    }
}

/// Incremental state of a generated suffix: the tokens and a rolling content
/// hash after each of them. Plays the role of a KV cache; truncating it is
/// a rollback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenContext {
    tokens: Vec<TokenId>,
    hashes: Vec<u64>,
}

impl Default for TokenContext {
    fn default() -> Self {
        Self {
            tokens: Vec::new(),
            hashes: vec![SUFFIX_ROOT],
        }
    }
}

impl TokenContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens(tokens: &[TokenId]) -> Self {
        let mut ctx = Self::new();
        for &t in tokens {
            ctx.push(t);
        }
        ctx
    }

    pub fn push(&mut self, token: TokenId) {
        let h = *self.hashes.last().expect("root hash is always present");
        self.hashes.push(mix64(h ^ mix64(token as u64 + 1)));
        self.tokens.push(token);
    }

    pub fn truncate(&mut self, len: usize) {
        self.tokens.truncate(len);
        self.hashes.truncate(len + 1);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Rolling hash of the whole suffix.
    pub fn hash(&self) -> u64 {
        *self.hashes.last().expect("root hash is always present")
    }
}
