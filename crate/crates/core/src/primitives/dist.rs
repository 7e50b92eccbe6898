use serde::{Deserialize, Serialize};

use super::{PrimitiveError, SeededRng, TokenId, Vocab, NORMALIZATION_TOLERANCE};

/// A normalized probability vector over a finite vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Wraps an already-normalized vector, checking the invariants.
    pub fn new(probs: Vec<f64>) -> Result<Self, PrimitiveError> {
        Vocab::new(probs.len())?;
        check_entries(&probs)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(PrimitiveError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    pub fn point_mass(vocab: Vocab, id: TokenId) -> Self {
        let mut probs = vec![0.0; vocab.size()];
        probs[id as usize] = 1.0;
        Self { probs }
    }

    pub fn uniform(vocab: Vocab) -> Self {
        let n = vocab.size();
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs.get(id as usize).copied().unwrap_or(0.0)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.probs.len()).expect("distribution length is validated on construction")
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest entry; ties resolve to the smallest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = PrimitiveError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

fn check_entries(raw: &[f64]) -> Result<(), PrimitiveError> {
    for (index, &value) in raw.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(PrimitiveError::InvalidEntry { index, value });
        }
    }
    Ok(())
}

/// Rescales a non-negative vector so that it sums to one.
pub fn normalize(raw: &[f64]) -> Result<Distribution, PrimitiveError> {
    Vocab::new(raw.len())?;
    check_entries(raw)?;
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(PrimitiveError::AllZero);
    }
    Ok(Distribution {
        probs: raw.iter().map(|&x| x / sum).collect(),
    })
}

/// Draws one token by inverting the cumulative distribution at a single
/// uniform variate.
pub fn sample(d: &Distribution, rng: &mut SeededRng) -> TokenId {
    let u = rng.next_f64();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in d.probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = i;
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    // Rounding left `acc` slightly below 1 and `u` landed in the gap.
    last_positive as TokenId
}

/// Half the L1 distance between two distributions.
pub fn total_variation(a: &Distribution, b: &Distribution) -> Result<f64, PrimitiveError> {
    if a.len() != b.len() {
        return Err(PrimitiveError::LengthMismatch(a.len(), b.len()));
    }
    let l1: f64 = a
        .probs
        .iter()
        .zip(&b.probs)
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(0.5 * l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
    }

    #[test]
    fn normalize_examples() {
        assert!(close(normalize(&[0.0, 0.5]).unwrap().probs(), &[0.0, 1.0]));
        assert!(close(
            normalize(&[1.0, 1.0, 2.0]).unwrap().probs(),
            &[0.25, 0.25, 0.5]
        ));
        assert_eq!(normalize(&[3.0]), Err(PrimitiveError::VocabTooSmall(1)));
        assert_eq!(normalize(&[0.0, 0.0, 0.0]), Err(PrimitiveError::AllZero));
        assert!(matches!(
            normalize(&[1.0, -0.5]),
            Err(PrimitiveError::InvalidEntry { index: 1, .. })
        ));
    }

    #[test]
    fn point_mass_always_samples_its_id() {
        let d = Distribution::point_mass(Vocab::new(6).unwrap(), 3);
        let mut rng = SeededRng::new(11);
        for _ in 0..1000 {
            assert_eq!(sample(&d, &mut rng), 3);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let d = normalize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let draw = |seed| {
            let mut rng = SeededRng::new(seed);
            (0..64).map(|_| sample(&d, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn uniform_frequencies_match_binomial_interval() {
        // sd of each frequency is sqrt(0.25 * 0.75 / 1e6) ~ 4.3e-4, so
        // [0.248, 0.252] is a ~4.6 sigma band.
        let d = Distribution::uniform(Vocab::new(4).unwrap());
        let mut rng = SeededRng::new(2024);
        let mut counts = [0usize; 4];
        let n = 1_000_000;
        for _ in 0..n {
            counts[sample(&d, &mut rng) as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.248..=0.252).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn total_variation_examples() {
        let a = Distribution::new(vec![0.5, 0.5]).unwrap();
        let b = Distribution::new(vec![0.75, 0.25]).unwrap();
        let e0 = Distribution::new(vec![1.0, 0.0]).unwrap();
        let e1 = Distribution::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(total_variation(&a, &a).unwrap(), 0.0);
        assert!((total_variation(&e0, &e1).unwrap() - 1.0).abs() < 1e-12);
        assert!((total_variation(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        let c = Distribution::uniform(Vocab::new(3).unwrap());
        assert!(total_variation(&a, &c).is_err());
    }

    #[test]
    fn serde_rejects_unnormalized_vectors() {
        let ok: Distribution = serde_json::from_str("[0.25, 0.75]").unwrap();
        assert_eq!(ok.probs(), &[0.25, 0.75]);
        assert!(serde_json::from_str::<Distribution>("[0.25, 0.5]").is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in prop::collection::vec(0.0f64..10.0, 2..16)) {
            prop_assume!(raw.iter().any(|&x| x > 0.0));
            let once = normalize(&raw).unwrap();
            let twice = normalize(once.probs()).unwrap();
            prop_assert!(close(once.probs(), twice.probs()));
            let sum: f64 = once.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < NORMALIZATION_TOLERANCE);
        }

        #[test]
        fn total_variation_is_a_bounded_symmetric_distance(
            a in prop::collection::vec(0.01f64..1.0, 5),
            b in prop::collection::vec(0.01f64..1.0, 5),
        ) {
            let a = normalize(&a).unwrap();
            let b = normalize(&b).unwrap();
            let ab = total_variation(&a, &b).unwrap();
            let ba = total_variation(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
