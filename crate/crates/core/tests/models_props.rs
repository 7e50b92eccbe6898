mod common;

use proptest::prelude::*;
use specpipe::models::{make_synthetic_pair, AlignmentSpec, ModelHandle, MultimodalPrefix, TokenContext};
use specpipe::pipeline::{run_pipeline, PipelineConfig, TimingModel};
use specpipe::primitives::{normalize, sample, SeededRng, TokenId, TokenSequence, Vocab};
use specpipe::specdec::expected_acceptance;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalize_is_idempotent(w in prop::collection::vec(0.0f64..10.0, 2..32)) {
        prop_assume!(w.iter().any(|&x| x > 0.0));
        let once = normalize(&w).unwrap();
        let twice = normalize(once.probs()).unwrap();
        for (a, b) in once.probs().iter().zip(twice.probs()) {
            prop_assert!((a - b).abs() <= 1e-15, "{} vs {}", a, b);
        }
    }

    #[test]
    fn synthetic_distributions_are_pure(
        tau in 0.0f64..=1.0,
        alpha in 0.0f64..=1.0,
        ctx in prop::collection::vec(0u32..12, 0..20),
        seed in any::<u64>(),
    ) {
        let (d, t) = make_synthetic_pair(Vocab::new(12).unwrap(), AlignmentSpec::new(tau, 0.1), &mut SeededRng::new(seed)).unwrap();
        let full = MultimodalPrefix::synthetic(20, 4, seed);
        let pruned = full.clone().pruned_evenly(alpha).unwrap();
        for (model, prefix) in [(&d, &pruned), (&t, &full)] {
            let c = TokenContext::from_tokens(&ctx);
            let a = model.distribution_in(prefix, &c);
            prop_assert_eq!(&a, &model.distribution_in(prefix, &c));
            prop_assert_eq!(&a, &model.next_distribution(prefix, &TokenSequence::from_ids(ctx.clone())));
        }
    }
}

#[test]
fn sample_frequencies_match_probabilities() {
    let mut rng = SeededRng::new(42);
    for v in [2usize, 5, 16] {
        let w: Vec<f64> = (0..v).map(|_| 0.05 + rng.next_f64()).collect();
        let d = normalize(&w).unwrap();
        let mut counts = vec![0u64; v];
        for _ in 0..100_000 {
            counts[sample(&d, &mut rng) as usize] += 1;
        }
        let p = common::goodness_of_fit_p(&counts, d.probs());
        assert!(p > 0.001, "vocab {v}: p {p}");
    }
}

fn measured_tau(d: &ModelHandle, t: &ModelHandle, alpha: f64) -> (f64, u64) {
    let cfg = PipelineConfig::new(4, alpha, 12_000);
    let (_, s, _) = run_pipeline(d, t, &MultimodalPrefix::synthetic(40, 6, 1), &TimingModel::constant(1.0, 4.0), &cfg, &SeededRng::new(8)).unwrap();
    (s.tau_hat, s.drafts_verified)
}

#[test]
fn pruning_never_raises_acceptance() {
    let (d, t) = make_synthetic_pair(Vocab::new(16).unwrap(), AlignmentSpec::new(0.85, 0.2), &mut SeededRng::new(6)).unwrap();
    let (full, n0) = measured_tau(&d, &t, 0.0);
    let (pruned, n9) = measured_tau(&d, &t, 0.9);
    assert!(n0 >= 10_000 && n9 >= 10_000);
    assert!(pruned <= full, "alpha 0.9: {pruned}, alpha 0: {full}");
    // The gap is the configured penalty, up to sampling noise.
    assert!((full - pruned - 0.18).abs() < 0.03, "gap {}", full - pruned);
}

/// Mean per-context acceptance `sum min(p, q)` over random contexts.
fn mean_acceptance(base: f64, tau_seed: u64) -> f64 {
    let (d, t) = make_synthetic_pair(Vocab::new(16).unwrap(), AlignmentSpec::new(base, 0.0), &mut SeededRng::new(tau_seed)).unwrap();
    let prefix = MultimodalPrefix::synthetic(20, 4, 0);
    let mut rng = SeededRng::new(1);
    let mut total = 0.0;
    for _ in 0..300 {
        let len = rng.below(12) as usize;
        let ctx: Vec<TokenId> = (0..len).map(|_| rng.below(16) as TokenId).collect();
        let c = TokenContext::from_tokens(&ctx);
        total += expected_acceptance(&t.distribution_in(&prefix, &c), &d.distribution_in(&prefix, &c));
    }
    total / 300.0
}

#[test]
fn calibration_by_bisection_recovers_the_requested_rate() {
    for tau in [0.1, 0.4, 0.7, 0.95] {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if mean_acceptance(mid, 3) < tau {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let found = 0.5 * (lo + hi);
        assert!((found - tau).abs() < 1e-6, "tau {tau}: bisection found {found}");
        assert!((mean_acceptance(tau, 3) - tau).abs() < 1e-9);
    }
}
