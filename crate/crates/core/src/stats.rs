use serde::{Deserialize, Serialize};

/// Summary of one decoding run.
///
/// `mean_accepted_length` is the M statistic. For vanilla speculative
/// decoding it is the mean number of tokens emitted per verification round,
/// bonus token included. For the parallel pipeline under truncating
/// acceptance it is the mean adaptive draft length: accepted draft tokens per
/// rollback cycle, which may exceed the window. Under the idealized
/// semantics it is accepted tokens per verification span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub generated: usize,
    pub gamma: usize,
    pub mean_accepted_length: f64,
    pub tokens_per_round: f64,
    pub tau_hat: f64,
    pub drafts_verified: u64,
    pub drafts_accepted: u64,
    pub verification_rounds: u64,
    pub rollback_count: u64,
    pub max_accepted_run: usize,
    /// `accepted_histogram[k]` counts verification rounds over a full window
    /// of `gamma` drafts that accepted exactly `k` of them.
    pub accepted_histogram: Vec<u64>,
    pub stage1_ms: f64,
    pub decode_ms: f64,
    pub total_latency_ms: f64,
    pub per_token_ms: f64,
    pub tokens_per_second: f64,
    /// `generated * t_target / decode_ms`.
    pub speedup_vs_autoregressive: f64,
    /// Measured wall-clock time of the concurrent backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

/// Raw counters a run accumulates before they become [`RunStats`].
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Tally {
    pub drafts_verified: u64,
    pub drafts_accepted: u64,
    pub rounds: u64,
    pub rollbacks: u64,
    pub run: usize,
    pub max_run: usize,
    pub runs_closed: u64,
    pub histogram: Vec<u64>,
}

impl Tally {
    pub fn new(gamma: usize) -> Self {
        Self {
            histogram: vec![0; gamma + 1],
            ..Self::default()
        }
    }

    pub fn accept_run(&mut self, n: usize) {
        self.run += n;
        self.max_run = self.max_run.max(self.run);
    }

    pub fn break_run(&mut self) {
        self.run = 0;
        self.runs_closed += 1;
    }

    /// Mean accepted draft tokens per rollback cycle; the open cycle at the
    /// end of the run counts as one.
    pub fn mean_run(&self) -> f64 {
        self.drafts_accepted as f64 / (self.runs_closed + 1) as f64
    }

    pub fn tau_hat(&self) -> f64 {
        if self.drafts_verified == 0 {
            0.0
        } else {
            self.drafts_accepted as f64 / self.drafts_verified as f64
        }
    }
}

pub(crate) struct Timings {
    pub t_target: f64,
    pub stage1_ms: f64,
    pub decode_ms: f64,
}

pub(crate) fn finish(
    tally: &Tally,
    gamma: usize,
    generated: usize,
    emitted_total: usize,
    mean_accepted_length: f64,
    timings: Timings,
) -> RunStats {
    let Timings {
        t_target,
        stage1_ms,
        decode_ms,
    } = timings;
    let rounds = tally.rounds.max(1) as f64;
    RunStats {
        generated,
        gamma,
        mean_accepted_length,
        tokens_per_round: emitted_total as f64 / rounds,
        tau_hat: tally.tau_hat(),
        drafts_verified: tally.drafts_verified,
        drafts_accepted: tally.drafts_accepted,
        verification_rounds: tally.rounds,
        rollback_count: tally.rollbacks,
        max_accepted_run: tally.max_run,
        accepted_histogram: tally.histogram.clone(),
        stage1_ms,
        decode_ms,
        total_latency_ms: stage1_ms + decode_ms,
        per_token_ms: decode_ms / generated as f64,
        tokens_per_second: if decode_ms > 0.0 {
            1000.0 * generated as f64 / decode_ms
        } else {
            f64::INFINITY
        },
        speedup_vs_autoregressive: if decode_ms > 0.0 {
            generated as f64 * t_target / decode_ms
        } else {
            f64::INFINITY
        },
        wall_clock_ms: None,
    }
}
