//! Visual token pruning guided by the target's early layers: a video token is
//! kept when its cosine similarity to the text query grows across layers.
//! Also an attention-mass baseline, random and evenly spaced baselines, and
//! the boundary-concentration metric used to expose positional bias.

mod io;
mod synthetic;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::SeededRng;

pub use io::{read_stack, write_stack, StackHeader};
pub use synthetic::{make_synthetic_stack, sample_planted, SinkProfile, SyntheticStack};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("zero-norm vector at layer {layer}, {kind} token {index}")]
    ZeroNorm {
        layer: usize,
        kind: &'static str,
        index: usize,
    },
    #[error("stack has {have} layers, need {need}")]
    TooFewLayers { have: usize, need: usize },
    #[error("invalid stack: {0}")]
    InvalidStack(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("stack file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense `(layers, tokens, dim)` array, layer-major then token-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub layers: usize,
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(layers: usize, tokens: usize, dim: usize) -> Self {
        Self {
            layers,
            tokens,
            dim,
            data: vec![0.0; layers * tokens * dim],
        }
    }

    pub fn from_vec(layers: usize, tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self, PruneError> {
        if data.len() != layers * tokens * dim {
            return Err(PruneError::InvalidStack(format!(
                "{} values for shape ({layers}, {tokens}, {dim})",
                data.len()
            )));
        }
        Ok(Self {
            layers,
            tokens,
            dim,
            data,
        })
    }

    fn offset(&self, layer: usize, token: usize) -> usize {
        (layer * self.tokens + token) * self.dim
    }

    pub fn vector(&self, layer: usize, token: usize) -> &[f64] {
        let o = self.offset(layer, token);
        &self.data[o..o + self.dim]
    }

    pub fn vector_mut(&mut self, layer: usize, token: usize) -> &mut [f64] {
        let o = self.offset(layer, token);
        &mut self.data[o..o + self.dim]
    }
}

/// Per-layer embeddings of the video and text tokens. Layer 0 is the input
/// embedding, so layer differences exist for layers 1..=L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub video: Tensor3,
    pub text: Tensor3,
    /// Frame index of each video token.
    pub frame_map: Vec<usize>,
}

impl LayerStack {
    pub fn new(video: Tensor3, text: Tensor3, frame_map: Vec<usize>) -> Result<Self, PruneError> {
        let s = Self {
            video,
            text,
            frame_map,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PruneError> {
        let (v, t) = (&self.video, &self.text);
        if v.layers != t.layers || v.dim != t.dim {
            return Err(PruneError::InvalidStack("video and text shapes disagree".into()));
        }
        if v.layers < 2 {
            return Err(PruneError::TooFewLayers { have: v.layers, need: 2 });
        }
        if v.tokens == 0 || t.tokens == 0 || v.dim == 0 {
            return Err(PruneError::InvalidStack("empty dimension".into()));
        }
        if self.frame_map.len() != v.tokens {
            return Err(PruneError::InvalidStack(format!(
                "frame map has {} entries for {} video tokens",
                self.frame_map.len(),
                v.tokens
            )));
        }
        if v.data.iter().chain(&t.data).any(|x| !x.is_finite()) {
            return Err(PruneError::InvalidStack("non-finite value".into()));
        }
        Ok(())
    }

    pub fn video_tokens(&self) -> usize {
        self.video.tokens
    }

    pub fn text_tokens(&self) -> usize {
        self.text.tokens
    }

    /// Number of transformer layers above the embedding layer.
    pub fn depth(&self) -> usize {
        self.video.layers - 1
    }

    pub fn dim(&self) -> usize {
        self.video.dim
    }

    pub fn frames(&self) -> usize {
        self.frame_map.iter().max().map_or(0, |f| f + 1)
    }

    /// Reorders video tokens: new token `k` is old token `perm[k]`.
    pub fn permute_video(&self, perm: &[usize]) -> Result<Self, PruneError> {
        let m = self.video_tokens();
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(PruneError::InvalidStack("not a permutation".into()));
        }
        let mut video = Tensor3::zeros(self.video.layers, m, self.dim());
        for l in 0..self.video.layers {
            for (k, &p) in perm.iter().enumerate() {
                video.vector_mut(l, k).copy_from_slice(self.video.vector(l, p));
            }
        }
        let frame_map = perm.iter().map(|&p| self.frame_map[p]).collect();
        Ok(Self {
            video,
            text: self.text.clone(),
            frame_map,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMethod {
    UvPrune,
    Attention,
    Random,
    UniformFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub alpha: f64,
    /// Number of early layers summed over.
    #[serde(default = "default_layers")]
    pub layers: usize,
}

fn default_layers() -> usize {
    20
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            layers: default_layers(),
        }
    }
}

impl PruneConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn validate(&self) -> Result<(), PruneError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PruneError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.layers == 0 {
            return Err(PruneError::InvalidConfig("need at least one layer".into()));
        }
        Ok(())
    }

    /// round((1 - alpha) * m) with halves rounded up, at least 1.
    pub fn keep_count(&self, m: usize) -> usize {
        let k = ((1.0 - self.alpha) * m as f64 + 0.5 + 1e-9).floor() as usize;
        k.clamp(1, m.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneScores {
    /// Summed similarity increase per video token.
    pub delta_s: Vec<f64>,
    /// `per_layer[l - 1][i]`: text-summed similarity change of token `i`
    /// from layer `l - 1` to layer `l`. Empty for baselines.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_layer: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    /// Kept video token indices, ascending.
    pub retained: Vec<usize>,
    pub scores: PruneScores,
    pub method: PruneMethod,
}

impl PruneResult {
    pub fn recall(&self, planted: &BTreeSet<usize>) -> f64 {
        planted_recall(&self.retained, planted)
    }
}

pub fn cosine_similarity(v: &[f64], x: &[f64]) -> Result<f64, PruneError> {
    let nv = norm(v);
    let nx = norm(x);
    if nv == 0.0 || nx == 0.0 {
        return Err(PruneError::ZeroNorm {
            layer: 0,
            kind: if nv == 0.0 { "first" } else { "second" },
            index: 0,
        });
    }
    Ok((dot(v, x) / (nv * nx)).clamp(-1.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit text vectors per layer, checked once.
fn unit_text(stack: &LayerStack, layers: usize) -> Result<Vec<Vec<f64>>, PruneError> {
    let t = &stack.text;
    (0..=layers)
        .map(|l| {
            let mut out = Vec::with_capacity(t.tokens * t.dim);
            for j in 0..t.tokens {
                let x = t.vector(l, j);
                let n = norm(x);
                if n == 0.0 {
                    return Err(PruneError::ZeroNorm {
                        layer: l,
                        kind: "text",
                        index: j,
                    });
                }
                out.extend(x.iter().map(|a| a / n));
            }
            Ok(out)
        })
        .collect()
}

/// Text-summed similarity of video token `i` at every layer 0..=L.
fn token_similarities(stack: &LayerStack, text: &[Vec<f64>], i: usize) -> Result<Vec<f64>, PruneError> {
    let d = stack.dim();
    text.iter()
        .enumerate()
        .map(|(l, unit)| {
            let v = stack.video.vector(l, i);
            let n = norm(v);
            if n == 0.0 {
                return Err(PruneError::ZeroNorm {
                    layer: l,
                    kind: "video",
                    index: i,
                });
            }
            Ok(unit.chunks_exact(d).map(|x| (dot(v, x) / n).clamp(-1.0, 1.0)).sum())
        })
        .collect()
}

fn token_deltas(stack: &LayerStack, text: &[Vec<f64>], i: usize) -> Result<Vec<f64>, PruneError> {
    let s = token_similarities(stack, text, i)?;
    Ok(s.windows(2).map(|w| w[1] - w[0]).collect())
}

fn check_depth(stack: &LayerStack, cfg: &PruneConfig) -> Result<(), PruneError> {
    cfg.validate()?;
    stack.validate()?;
    if stack.video.layers < cfg.layers + 1 {
        return Err(PruneError::TooFewLayers {
            have: stack.video.layers,
            need: cfg.layers + 1,
        });
    }
    Ok(())
}

fn assemble(per_token: Vec<Vec<f64>>, layers: usize) -> PruneScores {
    let delta_s = per_token.iter().map(|d| d.iter().sum()).collect();
    let per_layer = (0..layers)
        .map(|l| per_token.iter().map(|d| d[l]).collect())
        .collect();
    PruneScores { delta_s, per_layer }
}

/// Sums the layer-to-layer change in vision-text similarity over the first
/// `cfg.layers` layers and every text token.
pub fn score_tokens(stack: &LayerStack, cfg: &PruneConfig) -> Result<PruneScores, PruneError> {
    check_depth(stack, cfg)?;
    let text = unit_text(stack, cfg.layers)?;
    let per_token = (0..stack.video_tokens())
        .map(|i| token_deltas(stack, &text, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble(per_token, cfg.layers))
}

/// Same as [`score_tokens`], scoring video tokens on the rayon pool.
/// Results are bit-identical.
pub fn score_tokens_par(stack: &LayerStack, cfg: &PruneConfig) -> Result<PruneScores, PruneError> {
    check_depth(stack, cfg)?;
    let text = unit_text(stack, cfg.layers)?;
    let per_token = (0..stack.video_tokens())
        .into_par_iter()
        .map(|i| token_deltas(stack, &text, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble(per_token, cfg.layers))
}

/// Last-layer minus first-layer similarity, summed over text tokens.
pub fn endpoint_scores(stack: &LayerStack, cfg: &PruneConfig) -> Result<Vec<f64>, PruneError> {
    check_depth(stack, cfg)?;
    let text = unit_text(stack, cfg.layers)?;
    (0..stack.video_tokens())
        .map(|i| {
            let s = token_similarities(stack, &text, i)?;
            Ok(s[cfg.layers] - s[0])
        })
        .collect()
}

/// Indices of the `k` largest scores, ties to the lower index, returned
/// ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
    order
}

pub fn uv_prune(stack: &LayerStack, cfg: &PruneConfig) -> Result<PruneResult, PruneError> {
    let scores = score_tokens(stack, cfg)?;
    let retained = top_k(&scores.delta_s, cfg.keep_count(stack.video_tokens()));
    Ok(PruneResult {
        retained,
        scores,
        method: PruneMethod::UvPrune,
    })
}

/// Keeps the tokens with the most attention mass.
pub fn attention_prune(attn_scores: &[f64], cfg: &PruneConfig) -> Result<PruneResult, PruneError> {
    cfg.validate()?;
    if attn_scores.is_empty() || attn_scores.iter().any(|x| !x.is_finite()) {
        return Err(PruneError::InvalidConfig("attention scores must be finite and non-empty".into()));
    }
    let retained = top_k(attn_scores, cfg.keep_count(attn_scores.len()));
    Ok(PruneResult {
        retained,
        scores: PruneScores {
            delta_s: attn_scores.to_vec(),
            per_layer: Vec::new(),
        },
        method: PruneMethod::Attention,
    })
}

/// Uniformly random subset of size `K_keep`.
pub fn random_prune(m: usize, cfg: &PruneConfig, rng: &mut SeededRng) -> Result<PruneResult, PruneError> {
    cfg.validate()?;
    if m == 0 {
        return Err(PruneError::InvalidConfig("no video tokens".into()));
    }
    let k = cfg.keep_count(m);
    let mut idx: Vec<usize> = (0..m).collect();
    for i in 0..k {
        let j = i + rng.below((m - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    Ok(PruneResult {
        retained: idx,
        scores: PruneScores {
            delta_s: Vec::new(),
            per_layer: Vec::new(),
        },
        method: PruneMethod::Random,
    })
}

/// `K_keep` tokens evenly spaced over the video, ignoring content.
pub fn uniform_frame_prune(m: usize, cfg: &PruneConfig) -> Result<PruneResult, PruneError> {
    cfg.validate()?;
    if m == 0 {
        return Err(PruneError::InvalidConfig("no video tokens".into()));
    }
    let k = cfg.keep_count(m);
    let retained = (0..k).map(|i| ((i as f64 + 0.5) * m as f64 / k as f64) as usize).collect();
    Ok(PruneResult {
        retained,
        scores: PruneScores {
            delta_s: Vec::new(),
            per_layer: Vec::new(),
        },
        method: PruneMethod::UniformFrame,
    })
}

/// Fraction of retained tokens whose frame is in `band_frames`.
pub fn boundary_concentration(result: &PruneResult, frame_map: &[usize], band_frames: &BTreeSet<usize>) -> f64 {
    if result.retained.is_empty() {
        return 0.0;
    }
    let inside = result
        .retained
        .iter()
        .filter(|&&i| frame_map.get(i).is_some_and(|f| band_frames.contains(f)))
        .count();
    inside as f64 / result.retained.len() as f64
}

/// First frame plus the last `tail` frames.
pub fn boundary_band(frames: usize, tail: usize) -> BTreeSet<usize> {
    let mut band: BTreeSet<usize> = (frames.saturating_sub(tail)..frames).collect();
    if frames > 0 {
        band.insert(0);
    }
    band
}

pub fn planted_recall(retained: &[usize], planted: &BTreeSet<usize>) -> f64 {
    if planted.is_empty() {
        return 1.0;
    }
    retained.iter().filter(|i| planted.contains(i)).count() as f64 / planted.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(PruneError::ZeroNorm { .. })
        ));
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(PruneConfig::new(0.9).keep_count(25088), 2509);
        assert_eq!(PruneConfig::new(0.5).keep_count(4), 2);
        assert_eq!(PruneConfig::new(0.5).keep_count(5), 3);
        assert_eq!(PruneConfig::new(1.0).keep_count(10), 1);
        assert_eq!(PruneConfig::new(0.0).keep_count(7), 7);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(top_k(&[1.0; 4], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.0, 2.0, 1.0, 2.0], 2), vec![1, 3]);
        let r = attention_prune(&[0.3; 6], &PruneConfig::new(0.5)).unwrap();
        assert_eq!(r.retained, vec![0, 1, 2]);
    }

    #[test]
    fn constant_embeddings_score_zero() {
        let mut video = Tensor3::zeros(4, 3, 2);
        let mut text = Tensor3::zeros(4, 2, 2);
        for l in 0..4 {
            for i in 0..3 {
                video.vector_mut(l, i).copy_from_slice(&[1.0, i as f64]);
            }
            for j in 0..2 {
                text.vector_mut(l, j).copy_from_slice(&[j as f64, 1.0]);
            }
        }
        let stack = LayerStack::new(video, text, vec![0, 0, 1]).unwrap();
        let s = score_tokens(&stack, &PruneConfig::new(0.5).with_layers(3)).unwrap();
        assert!(s.delta_s.iter().all(|&x| x == 0.0));
        assert_eq!(s.per_layer.len(), 3);
        let r = uv_prune(&stack, &PruneConfig::new(0.5).with_layers(3)).unwrap();
        assert_eq!(r.retained, vec![0, 1]);
    }

    #[test]
    fn too_shallow_stack_is_rejected() {
        let stack = LayerStack::new(Tensor3::from_vec(2, 1, 1, vec![1.0, 1.0]).unwrap(),
            Tensor3::from_vec(2, 1, 1, vec![1.0, 1.0]).unwrap(), vec![0]).unwrap();
        assert!(matches!(
            score_tokens(&stack, &PruneConfig::new(0.0)),
            Err(PruneError::TooFewLayers { .. })
        ));
    }

    #[test]
    fn uniform_baseline_spreads_out() {
        let r = uniform_frame_prune(10, &PruneConfig::new(0.8)).unwrap();
        assert_eq!(r.retained, vec![2, 7]);
        let mut rng = SeededRng::new(3);
        let r = random_prune(100, &PruneConfig::new(0.9), &mut rng).unwrap();
        assert_eq!(r.retained.len(), 10);
        assert!(r.retained.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn concentration_counts_band_members() {
        let r = PruneResult {
            retained: vec![0, 1, 5],
            scores: PruneScores { delta_s: vec![], per_layer: vec![] },
            method: PruneMethod::Attention,
        };
        let frames = vec![0, 0, 1, 1, 2, 2];
        assert!((boundary_concentration(&r, &frames, &boundary_band(3, 1)) - 1.0).abs() < 1e-12);
        assert!((boundary_concentration(&r, &frames, &[1].into()) - 0.0).abs() < 1e-12);
    }
}
