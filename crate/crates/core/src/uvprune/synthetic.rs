use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{LayerStack, PruneError, Tensor3};
use crate::primitives::SeededRng;

/// Per-layer step size of the zero-drift similarity walk of unplanted tokens.
const WALK_STEP: f64 = 0.02;
/// Noise on the semantic part of the synthetic attention scores.
const ATTENTION_NOISE: f64 = 0.03;

/// Extra attention mass given to boundary frames regardless of content: the
/// first frame (attention sink) and the last `tail_frames` frames (closest
/// to the text query).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkProfile {
    pub frames: usize,
    pub strength: f64,
    #[serde(default = "default_tail")]
    pub tail_frames: usize,
}

fn default_tail() -> usize {
    4
}

impl SinkProfile {
    pub fn new(frames: usize, strength: f64) -> Self {
        Self {
            frames,
            strength,
            tail_frames: default_tail(),
        }
    }

    pub fn unbiased(frames: usize) -> Self {
        Self::new(frames, 0.0)
    }

    pub fn band(&self) -> BTreeSet<usize> {
        super::boundary_band(self.frames, self.tail_frames)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStack {
    pub stack: LayerStack,
    pub attention: Vec<f64>,
    pub planted: BTreeSet<usize>,
}

fn gaussian_unit_orthogonal(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    // Component 0 is the text direction; stay orthogonal to it.
    loop {
        let mut u = vec![0.0; d];
        for x in u.iter_mut().skip(1) {
            *x = rng.next_gaussian();
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            u.iter_mut().for_each(|x| *x /= n);
            return u;
        }
    }
}

fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

/// Builds a stack in which every text token points along one axis, so a video
/// token's similarity to each text token is the same scalar `s`. Planted
/// tokens raise `s` by exactly `delta` per layer. The others follow a
/// zero-drift walk pinned to its starting value at layer `layers`, so they
/// score zero. Attention is the noisy similarity gain plus the sink bias.
#[allow(clippy::too_many_arguments)]
pub fn make_synthetic_stack(
    m: usize,
    n: usize,
    d: usize,
    layers: usize,
    planted: &BTreeSet<usize>,
    delta: f64,
    sink: SinkProfile,
    rng: &mut SeededRng,
) -> Result<SyntheticStack, PruneError> {
    if m == 0 || n == 0 || layers == 0 {
        return Err(PruneError::InvalidConfig("m, n and layers must be positive".into()));
    }
    if d < 2 {
        return Err(PruneError::InvalidConfig("need at least two dimensions".into()));
    }
    if planted.iter().any(|&i| i >= m) {
        return Err(PruneError::InvalidConfig("planted index out of range".into()));
    }
    let rise = delta * layers as f64;
    if !(0.0..=1.9).contains(&rise) {
        return Err(PruneError::InvalidConfig(format!(
            "delta * layers = {rise} must lie in [0, 1.9]"
        )));
    }
    if sink.frames == 0 || sink.frames > m || !sink.strength.is_finite() {
        return Err(PruneError::InvalidConfig("sink profile needs 1..=m frames and finite strength".into()));
    }

    let depth = layers + 1;
    let mut text = Tensor3::zeros(depth, n, d);
    for l in 0..depth {
        for j in 0..n {
            text.vector_mut(l, j)[0] = uniform(rng, 0.5, 2.0);
        }
    }

    let mut video = Tensor3::zeros(depth, m, d);
    let mut gain = vec![0.0; m];
    for i in 0..m {
        let mut s0 = uniform(rng, -0.3, 0.3);
        let path: Vec<f64> = if planted.contains(&i) {
            s0 = s0.min(0.95 - rise);
            (0..depth).map(|l| s0 + l as f64 * delta).collect()
        } else {
            let mut walk = vec![0.0; depth];
            for l in 1..depth {
                walk[l] = walk[l - 1] + WALK_STEP * rng.next_gaussian();
            }
            let end = walk[layers];
            (0..depth)
                .map(|l| {
                    let bridge = walk[l] - end * l as f64 / layers as f64;
                    if l == 0 || l == layers {
                        s0
                    } else {
                        (s0 + bridge).clamp(-0.99, 0.99)
                    }
                })
                .collect()
        };
        gain[i] = path[layers] - path[0];
        for (l, &s) in path.iter().enumerate() {
            let u = gaussian_unit_orthogonal(d, rng);
            let r = uniform(rng, 0.5, 2.0);
            let c = (1.0 - s * s).max(0.0).sqrt();
            let v = video.vector_mut(l, i);
            for (k, x) in v.iter_mut().enumerate() {
                *x = r * c * u[k];
            }
            v[0] = r * s;
        }
    }

    let frame_map: Vec<usize> = (0..m).map(|i| i * sink.frames / m).collect();
    let band = sink.band();
    let attention = (0..m)
        .map(|i| {
            let bias = if band.contains(&frame_map[i]) { sink.strength } else { 0.0 };
            gain[i] + ATTENTION_NOISE * rng.next_gaussian() + bias
        })
        .collect();

    Ok(SyntheticStack {
        stack: LayerStack::new(video, text, frame_map)?,
        attention,
        planted: planted.clone(),
    })
}

/// `count` distinct indices below `m`, sampled uniformly.
pub fn sample_planted(m: usize, count: usize, rng: &mut SeededRng) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..m).collect();
    let count = count.min(m);
    for i in 0..count {
        let j = i + rng.below((m - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx.into_iter().collect()
}
