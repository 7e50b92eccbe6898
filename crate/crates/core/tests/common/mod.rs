#![allow(dead_code)]

use specpipe::primitives::TokenId;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Two-sample chi-square p-value; categories with fewer than `min_cell`
/// combined observations are pooled into one.
pub fn two_sample_p(a: &[u64], b: &[u64], min_cell: u64) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        if x + y >= min_cell {
            bins.push((x as f64, y as f64));
        } else {
            pooled.0 += x as f64;
            pooled.1 += y as f64;
        }
    }
    if pooled.0 + pooled.1 > 0.0 {
        bins.push(pooled);
    }
    if bins.len() < 2 {
        return 1.0;
    }
    let n = na + nb;
    let stat: f64 = bins
        .iter()
        .map(|&(x, y)| {
            let col = x + y;
            let (ea, eb) = (na * col / n, nb * col / n);
            (x - ea).powi(2) / ea + (y - eb).powi(2) / eb
        })
        .sum();
    1.0 - ChiSquared::new((bins.len() - 1) as f64).unwrap().cdf(stat)
}

/// Goodness of fit of `counts` to `probs`, pooling cells expecting fewer
/// than 5 observations.
pub fn goodness_of_fit_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n = counts.iter().sum::<u64>() as f64;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        if n * p >= 5.0 {
            cells.push((c as f64, n * p));
        } else {
            pooled.0 += c as f64;
            pooled.1 += n * p;
        }
    }
    if pooled.1 > 0.0 {
        cells.push(pooled);
    }
    if cells.len() < 2 {
        return 1.0;
    }
    let stat: f64 = cells.iter().map(|&(o, e)| (o - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((cells.len() - 1) as f64).unwrap().cdf(stat)
}

pub fn position_counts(runs: &[Vec<TokenId>], k: usize, vocab: usize) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0u64; vocab]; k];
    for r in runs {
        for (i, &t) in r.iter().take(k).enumerate() {
            c[i][t as usize] += 1;
        }
    }
    c
}

/// Smallest per-position p-value times the number of positions.
pub fn bonferroni_min_p(a: &[Vec<u64>], b: &[Vec<u64>]) -> f64 {
    let k = a.len();
    let min = a.iter().zip(b).map(|(x, y)| two_sample_p(x, y, 20)).fold(1.0, f64::min);
    (min * k as f64).min(1.0)
}
