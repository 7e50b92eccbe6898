use serde::{Deserialize, Serialize};
use serde_json::json;

use super::trace::{Actor, EventKind, EventTrace};
use super::{PipelineConfig, PipelineError};
use crate::timing::TimingModel;

/// The draft branch did not finish its startup window under the target's
/// prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartupOverflow {
    pub draft_branch_ms: f64,
    pub target_prefill_ms: f64,
    pub startup_tokens: usize,
}

/// Schedule of the parallel prefilling stage. Times are milliseconds from
/// the start of the request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Plan {
    pub gamma: usize,
    pub target_done_ms: f64,
    pub prune_ms: f64,
    /// End of the draft prefill, which also yields the first token.
    pub draft_prefill_done_ms: f64,
    /// Ready time of each startup token after the first.
    pub startup_ready_ms: Vec<f64>,
    pub wall_ms: f64,
    pub overflow: Option<StartupOverflow>,
    pub trace: EventTrace,
}

impl Stage1Plan {
    pub fn startup_count(&self) -> usize {
        self.startup_ready_ms.len()
    }

    pub fn draft_branch_ms(&self) -> f64 {
        self.startup_ready_ms
            .last()
            .copied()
            .unwrap_or(self.draft_prefill_done_ms)
    }
}

/// Schedules Stage I: the target prefills the full context while the draft
/// waits for the early-layer broadcast, prunes, prefills the pruned context
/// and drafts up to `gamma` startup tokens. Without prefill latencies in the
/// timing model the stage takes no time and the startup window is full.
pub fn stage1_prefill(timing: &TimingModel, config: &PipelineConfig) -> Result<Stage1Plan, PipelineError> {
    config.validate()?;
    timing.validate()?;
    let gamma = config.resolve_gamma(timing)?;
    let t_d = timing.t_draft_at(config.alpha);
    let mut trace = EventTrace::new();
    let semantics = config.semantics;

    let Some(pf) = &timing.prefill else {
        trace.push(0.0, Actor::Target, EventKind::Prefill, json!({ "end_ms": 0.0, "semantics": semantics }));
        trace.push(0.0, Actor::Draft, EventKind::Prefill, json!({ "end_ms": 0.0 }));
        for i in 1..=gamma {
            trace.push(0.0, Actor::Draft, EventKind::StartupDraft, json!({ "index": i }));
        }
        return Ok(Stage1Plan {
            gamma,
            target_done_ms: 0.0,
            prune_ms: 0.0,
            draft_prefill_done_ms: 0.0,
            startup_ready_ms: vec![0.0; gamma],
            wall_ms: 0.0,
            overflow: None,
            trace,
        });
    };

    let target_done = pf.target_ms;
    let broadcast = pf.broadcast_fraction * pf.target_ms;
    let prune_done = broadcast + pf.prune_cost_ms;
    let draft_prefill_done = prune_done + pf.draft_ms.at(config.alpha);
    let full_branch = draft_prefill_done + gamma as f64 * t_d;

    trace.push(0.0, Actor::Target, EventKind::Prefill, json!({ "end_ms": target_done, "semantics": semantics }));
    trace.push(broadcast, Actor::Draft, EventKind::Prune, json!({ "alpha": config.alpha, "end_ms": prune_done }));
    trace.push(prune_done, Actor::Draft, EventKind::Prefill, json!({ "end_ms": draft_prefill_done }));

    let (startup, overflow, wall) = if full_branch <= target_done + 1e-9 {
        let ready: Vec<f64> = (1..=gamma).map(|i| draft_prefill_done + i as f64 * t_d).collect();
        (ready, None, target_done)
    } else {
        // Only the startup tokens finished before the target are kept.
        let ready: Vec<f64> = (1..=gamma)
            .map(|i| draft_prefill_done + i as f64 * t_d)
            .take_while(|&r| r <= target_done + 1e-9)
            .collect();
        let overflow = StartupOverflow {
            draft_branch_ms: full_branch,
            target_prefill_ms: target_done,
            startup_tokens: ready.len(),
        };
        (ready, Some(overflow), target_done.max(draft_prefill_done))
    };
    for (i, &r) in startup.iter().enumerate() {
        trace.push(r, Actor::Draft, EventKind::StartupDraft, json!({ "index": i + 1 }));
    }
    Ok(Stage1Plan {
        gamma,
        target_done_ms: target_done,
        prune_ms: broadcast,
        draft_prefill_done_ms: draft_prefill_done,
        startup_ready_ms: startup,
        wall_ms: wall,
        overflow,
        trace,
    })
}
