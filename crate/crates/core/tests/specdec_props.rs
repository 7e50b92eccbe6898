mod common;

use proptest::prelude::*;
use rayon::prelude::*;
use specpipe::models::{autoregressive_generate, make_synthetic_pair, AlignmentSpec, ForwardLedger, MultimodalPrefix};
use specpipe::pipeline::TimingModel;
use specpipe::primitives::{normalize, Distribution, SeededRng, TokenId, Vocab};
use specpipe::specdec::{accept_probability, expected_acceptance, residual, vanilla_sd_generate, SpecDecError, WindowConfig};
use specpipe::theory::trunc_geo_pmf;

fn dist(v: usize) -> impl Strategy<Value = Distribution> {
    // Roughly a third of the entries are zero.
    prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0, 0.01f64..1.0], v)
        .prop_filter("some mass", |w| w.iter().any(|&x| x > 0.0))
        .prop_map(|w| normalize(&w).unwrap())
}

fn pair() -> impl Strategy<Value = (Distribution, Distribution)> {
    (2usize..=8).prop_flat_map(|v| (dist(v), dist(v)))
}

/// Output marginal of one verification step with the draft token x ~ q.
fn enumerate_branches(p: &Distribution, q: &Distribution) -> Vec<f64> {
    let r = residual(p, q);
    let mut out = vec![0.0; p.len()];
    for x in 0..p.len() {
        let qx = q.prob(x as TokenId);
        if qx == 0.0 {
            continue;
        }
        let a = accept_probability(p, q, x as TokenId).unwrap();
        out[x] += qx * a;
        for (y, o) in out.iter_mut().enumerate() {
            *o += qx * (1.0 - a) * r.prob(y as TokenId);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn one_step_marginal_is_the_target((p, q) in pair()) {
        let out = enumerate_branches(&p, &q);
        let tv = 0.5 * out.iter().zip(p.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        prop_assert!(tv < 1e-12, "tv {}", tv);
    }

    #[test]
    fn kernel_pieces_are_well_formed((p, q) in pair()) {
        let r = residual(&p, &q);
        prop_assert!((r.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let beta = expected_acceptance(&p, &q);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&beta));
        for x in 0..p.len() as TokenId {
            match accept_probability(&p, &q, x) {
                Ok(a) => prop_assert!((0.0..=1.0).contains(&a)),
                Err(SpecDecError::DraftZeroMass { token }) => {
                    prop_assert_eq!(token, x);
                    prop_assert_eq!(q.prob(x), 0.0);
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
            // The residual only puts mass where the target exceeds the draft.
            if beta < 1.0 - 1e-12 && r.prob(x) > 0.0 {
                prop_assert!(p.prob(x) > q.prob(x));
            }
        }
    }
}

#[test]
fn vanilla_output_matches_target_alone() {
    const RUNS: u64 = 6000;
    const K: usize = 20;
    let v = Vocab::new(5).unwrap();
    let prefix = MultimodalPrefix::synthetic(16, 4, 9);
    let (d, t) = make_synthetic_pair(v, AlignmentSpec::new(0.5, 0.0), &mut SeededRng::new(31)).unwrap();
    let reference: Vec<Vec<TokenId>> = (0..RUNS)
        .into_par_iter()
        .map(|s| {
            autoregressive_generate(&t, &prefix, K, &mut SeededRng::new(s), &mut ForwardLedger::new())
                .unwrap()
                .into_ids()
        })
        .collect();
    let ref_counts = common::position_counts(&reference, K, v.size());
    for gamma in [1usize, 4, 8] {
        let runs: Vec<Vec<TokenId>> = (0..RUNS)
            .into_par_iter()
            .map(|s| {
                let w = WindowConfig::new(gamma).unwrap();
                let timing = TimingModel::constant(1.0, 4.0);
                vanilla_sd_generate(&d, &t, &prefix, K, w, &timing, &mut SeededRng::new(50_000 + s))
                    .unwrap()
                    .0
                    .into_ids()
            })
            .collect();
        let p = common::bonferroni_min_p(&common::position_counts(&runs, K, v.size()), &ref_counts);
        assert!(p > 0.001, "gamma {gamma}: adjusted p {p}");
    }
}

#[test]
fn vanilla_accepted_counts_follow_truncated_geometric() {
    let (tau, gamma) = (0.75, 6);
    let (d, t) = make_synthetic_pair(Vocab::new(10).unwrap(), AlignmentSpec::new(tau, 0.0), &mut SeededRng::new(2)).unwrap();
    let (_, stats) = vanilla_sd_generate(
        &d,
        &t,
        &MultimodalPrefix::synthetic(16, 4, 2),
        300_000,
        WindowConfig::new(gamma).unwrap(),
        &TimingModel::constant(1.0, 4.0),
        &mut SeededRng::new(3),
    )
    .unwrap();
    assert!(stats.verification_rounds >= 50_000);
    let p = common::goodness_of_fit_p(&stats.accepted_histogram, &trunc_geo_pmf(tau, gamma).unwrap());
    assert!(p > 0.001, "goodness of fit p {p}");
}

#[test]
fn zero_window_is_rejected() {
    assert!(matches!(WindowConfig::new(0), Err(SpecDecError::EmptyWindowConfig)));
}
