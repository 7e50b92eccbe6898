use std::collections::HashMap;

use crate::primitives::{normalize, Distribution, TokenId, Vocab};

/// Add-k smoothed n-gram model over the text prompt plus generated suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    vocab: Vocab,
    order: usize,
    smoothing: f64,
    argmax: bool,
    counts: HashMap<Vec<TokenId>, Vec<f64>>,
}

impl NGramModel {
    /// Counts every `order`-gram of `corpus`. `order` is clamped to at
    /// least 1 (unigram).
    pub fn train(vocab: Vocab, order: usize, corpus: &[TokenId], smoothing: f64) -> Self {
        let order = order.max(1);
        let mut counts: HashMap<Vec<TokenId>, Vec<f64>> = HashMap::new();
        if corpus.len() >= order {
            for w in corpus.windows(order) {
                let (ctx, next) = w.split_at(order - 1);
                if !vocab.contains(next[0]) {
                    continue;
                }
                counts
                    .entry(ctx.to_vec())
                    .or_insert_with(|| vec![0.0; vocab.size()])[next[0] as usize] += 1.0;
            }
        }
        Self {
            vocab,
            order,
            smoothing: smoothing.max(0.0),
            argmax: false,
            counts,
        }
    }

    /// Greedy variant: every distribution collapses to its mode.
    pub fn greedy(mut self) -> Self {
        self.argmax = true;
        self
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn distribution(&self, history: &[TokenId]) -> Distribution {
        let n = self.order - 1;
        let ctx = &history[history.len().saturating_sub(n)..];
        let raw: Vec<f64> = match self.counts.get(ctx) {
            Some(c) => c.iter().map(|x| x + self.smoothing).collect(),
            None => vec![1.0; self.vocab.size()],
        };
        let d = normalize(&raw).unwrap_or_else(|_| Distribution::uniform(self.vocab));
        if self.argmax {
            Distribution::point_mass(self.vocab, d.argmax())
        } else {
            d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bigram_counts_drive_distribution() {
        let v = Vocab::new(3).unwrap();
        let m = NGramModel::train(v, 2, &[0, 1, 0, 1, 0, 2], 0.0);
        let d = m.distribution(&[0]);
        assert!((d.prob(1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.prob(2) - 1.0 / 3.0).abs() < 1e-12);
        // Unseen context falls back to uniform.
        assert!((m.distribution(&[2]).prob(0) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.clone().greedy().distribution(&[0]).prob(1), 1.0);
    }
}
