//! The two-stage parallel draft/verify pipeline.
//!
//! Stage I hides the draft's pruned prefill and a startup window under the
//! target's prefill. Stage II alternates between Pre-verify (check one draft
//! token ahead of time) and Post-verify (check a whole window while the draft
//! writes the next one), rolling the draft back to the accepted output on
//! every rejection. Time is simulated in milliseconds from a
//! [`TimingModel`]; the concurrent backend runs the same state machine with
//! the draft and target on separate threads.

mod engine;
mod exec;
mod stage1;
mod trace;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::{Mode, PendingToken, PipelineState};
pub use stage1::{stage1_prefill, Stage1Plan, StartupOverflow};
pub use trace::{check_trace, Actor, EventKind, EventTrace, TraceEvent, TraceIoError, TraceSummary, TraceViolation};

pub use crate::stats::RunStats;
pub use crate::timing::{LatencyCurve, PrefillTiming, PresetFile, Rounding, TimingModel, TimingPreset};

use crate::models::{ModelError, ModelHandle, MultimodalPrefix};
use crate::primitives::{SeededRng, TokenSequence};
use crate::specdec::SpecDecError;
use crate::timing::TimingError;
use engine::Engine;
use exec::{ChannelExecutor, DraftWorker, Executor, InlineExecutor, TargetWorker};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("no draft tokens are queued for verification")]
    EmptyWindow,
    #[error("step not allowed in {0:?} mode")]
    WrongMode(Mode),
    #[error("the {0} worker stopped")]
    ChannelClosed(&'static str),
    #[error("worker protocol error: {0}")]
    Protocol(&'static str),
    #[error("draft context after rollback hashes to {found:#x}, accepted output to {expected:#x}")]
    RollbackMismatch { expected: u64, found: u64 },
    #[error(transparent)]
    SpecDec(#[from] SpecDecError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How verification outcomes are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcceptanceSemantics {
    /// The real kernel: a window dies at its first rejection, which is
    /// replaced by a residual sample and triggers a rollback.
    #[default]
    Truncating,
    /// Each span runs `gamma` independent trials at the output frontier;
    /// rejected trials emit nothing and nothing rolls back.
    Independent,
    /// Cycles of two spans: the second window counts only when the first
    /// was accepted whole, otherwise the second span is lost to the rollback.
    TwoRound,
}

impl std::str::FromStr for AcceptanceSemantics {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "truncating" => Ok(Self::Truncating),
            "independent" => Ok(Self::Independent),
            "two-round" => Ok(Self::TwoRound),
            other => Err(format!("unknown acceptance semantics '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Window size; picked from the speed ratio when absent.
    #[serde(default)]
    pub gamma: Option<usize>,
    #[serde(default)]
    pub alpha: f64,
    /// Rounding for the automatic window; down when the pruned speed ratio
    /// is at least 2, up otherwise.
    #[serde(default)]
    pub rounding: Option<Rounding>,
    #[serde(alias = "K")]
    pub k: usize,
    #[serde(default)]
    pub semantics: AcceptanceSemantics,
}

impl PipelineConfig {
    pub fn new(gamma: usize, alpha: f64, k: usize) -> Self {
        Self {
            gamma: Some(gamma),
            alpha,
            rounding: None,
            k,
            semantics: AcceptanceSemantics::Truncating,
        }
    }

    pub fn with_semantics(mut self, semantics: AcceptanceSemantics) -> Self {
        self.semantics = semantics;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.gamma == Some(0) {
            return Err(PipelineError::InvalidConfig("gamma must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(PipelineError::InvalidConfig("K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PipelineError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    pub fn resolve_gamma(&self, timing: &TimingModel) -> Result<usize, PipelineError> {
        match self.gamma {
            Some(g) => Ok(g),
            None => {
                let rounding = self
                    .rounding
                    .unwrap_or_else(|| Rounding::default_for(timing.pruned_speed_ratio(self.alpha)));
                select_window(timing, self.alpha, rounding)
            }
        }
    }

    /// The draft's view of `prefix`: unchanged if it already carries a
    /// retained set, otherwise evenly pruned at `alpha`.
    pub fn draft_prefix(&self, prefix: &MultimodalPrefix) -> Result<MultimodalPrefix, PipelineError> {
        if prefix.retained_video().is_some() || self.alpha == 0.0 {
            Ok(prefix.clone())
        } else {
            Ok(prefix.clone().pruned_evenly(self.alpha)?)
        }
    }
}

/// Window size from the pruned speed ratio `T_p / T_q(alpha)`, rounded as
/// requested and never below 1.
pub fn select_window(timing: &TimingModel, alpha: f64, rounding: Rounding) -> Result<usize, PipelineError> {
    let t_q = timing.t_draft_at(alpha);
    if !(t_q > 0.0 && t_q.is_finite()) {
        return Err(TimingError::Invalid(format!("t_draft({alpha}) = {t_q}")).into());
    }
    let ratio = timing.t_target / t_q;
    // Ratios such as 420 / 46.667 should not fall just below an integer.
    let g = match rounding {
        Rounding::Down => (ratio + 1e-9).floor(),
        Rounding::Up => (ratio - 1e-9).ceil(),
    };
    Ok((g as usize).max(1))
}

struct Prepared {
    plan: Stage1Plan,
    draft: DraftWorker,
    target: TargetWorker,
    t_d: f64,
}

fn prepare(
    draft: &ModelHandle,
    target: &ModelHandle,
    prefix: &MultimodalPrefix,
    timing: &TimingModel,
    config: &PipelineConfig,
    rng: &SeededRng,
) -> Result<Prepared, PipelineError> {
    let plan = stage1_prefill(timing, config)?;
    let draft_prefix = config.draft_prefix(prefix)?;
    let target_prefix = prefix.clone().unpruned();
    Ok(Prepared {
        plan,
        draft: DraftWorker::new(draft.clone(), draft_prefix, rng.stream("draft")),
        target: TargetWorker::new(target.clone(), target_prefix, rng.stream("target")),
        t_d: timing.t_draft_at(config.alpha),
    })
}

fn drive<E: Executor>(
    exec: E,
    plan: Stage1Plan,
    timing: &TimingModel,
    config: &PipelineConfig,
    t_d: f64,
) -> Result<(TokenSequence, RunStats, EventTrace), PipelineError> {
    let mut engine = Engine::start(exec, plan, config.k, t_d, timing.t_target, config.semantics)?;
    engine.run()?;
    Ok(engine.finish(timing.t_target))
}

/// Runs both stages on the simulated clock until `config.k` tokens are
/// emitted. The target sees the full prefix; the draft sees the pruned one.
pub fn run_pipeline(
    draft: &ModelHandle,
    target: &ModelHandle,
    prefix: &MultimodalPrefix,
    timing: &TimingModel,
    config: &PipelineConfig,
    rng: &SeededRng,
) -> Result<(TokenSequence, RunStats, EventTrace), PipelineError> {
    let p = prepare(draft, target, prefix, timing, config, rng)?;
    drive(InlineExecutor::new(p.draft, p.target), p.plan, timing, config, p.t_d)
}

/// The same run with the draft and target on two threads that exchange
/// windows and outcomes over channels. Tokens match [`run_pipeline`] for the
/// same seed; `wall_clock_ms` holds the measured time.
pub fn run_concurrent_backend(
    draft: &ModelHandle,
    target: &ModelHandle,
    prefix: &MultimodalPrefix,
    timing: &TimingModel,
    config: &PipelineConfig,
    rng: &SeededRng,
) -> Result<(TokenSequence, RunStats), PipelineError> {
    let p = prepare(draft, target, prefix, timing, config, rng)?;
    let started = Instant::now();
    let result = std::thread::scope(|scope| {
        let exec = ChannelExecutor::spawn(scope, p.draft, p.target);
        drive(exec, p.plan, timing, config, p.t_d)
    });
    let (tokens, mut stats, _) = result?;
    stats.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    Ok((tokens, stats))
}

/// Step-by-step access to a simulated run under truncating acceptance.
pub struct Pipeline {
    engine: Engine<InlineExecutor>,
    t_target: f64,
}

impl Pipeline {
    /// Runs Stage I and the initial Pre-verify.
    pub fn start(
        draft: &ModelHandle,
        target: &ModelHandle,
        prefix: &MultimodalPrefix,
        timing: &TimingModel,
        config: &PipelineConfig,
        rng: &SeededRng,
    ) -> Result<Self, PipelineError> {
        if config.semantics != AcceptanceSemantics::Truncating {
            return Err(PipelineError::InvalidConfig(
                "stepping is only defined for truncating acceptance".into(),
            ));
        }
        let p = prepare(draft, target, prefix, timing, config, rng)?;
        let engine = Engine::start(
            InlineExecutor::new(p.draft, p.target),
            p.plan,
            config.k,
            p.t_d,
            timing.t_target,
            config.semantics,
        )?;
        Ok(Self {
            engine,
            t_target: timing.t_target,
        })
    }

    pub fn state(&self) -> &PipelineState {
        &self.engine.state
    }

    pub fn trace(&self) -> &EventTrace {
        &self.engine.trace
    }

    pub fn is_done(&self) -> bool {
        self.engine.is_done()
    }

    pub fn step_pre_verify(&mut self) -> Result<(), PipelineError> {
        self.engine.pre_verify(false)
    }

    pub fn step_post_verify(&mut self) -> Result<(), PipelineError> {
        self.engine.post_verify()
    }

    /// One step in whichever mode the pipeline is in.
    pub fn step(&mut self) -> Result<(), PipelineError> {
        self.engine.step()
    }

    pub fn finish(self) -> (TokenSequence, RunStats, EventTrace) {
        self.engine.finish(self.t_target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(name: &str) -> TimingPreset {
        PresetFile::builtin().get(name).unwrap().clone()
    }

    #[test]
    fn window_selection_matches_reference_pairings() {
        let big = preset("llava-ov-7b-72b").timing;
        assert_eq!(select_window(&big, 0.9, Rounding::Down).unwrap(), 9);
        assert_eq!(select_window(&big, 0.0, Rounding::Down).unwrap(), 5);
        let qwen = preset("qwen2.5-vl-7b-32b").timing;
        assert_eq!(select_window(&qwen, 0.9, Rounding::Down).unwrap(), 5);
        for name in ["llava-ov-7b-self", "qwen2.5-vl-7b-self"] {
            assert_eq!(select_window(&preset(name).timing, 0.9, Rounding::Up).unwrap(), 2);
        }
        assert_eq!(select_window(&TimingModel::constant(10.0, 5.0), 0.0, Rounding::Down).unwrap(), 1);
    }

    #[test]
    fn auto_gamma_uses_default_rounding() {
        let mut cfg = PipelineConfig::new(1, 0.9, 10);
        cfg.gamma = None;
        assert_eq!(cfg.resolve_gamma(&preset("llava-ov-7b-72b").timing).unwrap(), 9);
        assert_eq!(cfg.resolve_gamma(&preset("llava-ov-7b-self").timing).unwrap(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::new(0, 0.0, 4).validate().is_err());
        assert!(PipelineConfig::new(3, 1.5, 4).validate().is_err());
        assert!(PipelineConfig::new(3, 0.5, 0).validate().is_err());
        let cfg: PipelineConfig = serde_json::from_str(r#"{"K": 8, "alpha": 0.5, "semantics": "two-round"}"#).unwrap();
        assert_eq!(cfg.k, 8);
        assert_eq!(cfg.semantics, AcceptanceSemantics::TwoRound);
    }

    #[test]
    fn stage1_hides_draft_prefill() {
        let timing = preset("llava-ov-7b-72b").timing;
        let mut cfg = PipelineConfig::new(1, 0.9, 10);
        cfg.gamma = None;
        let plan = stage1_prefill(&timing, &cfg).unwrap();
        assert_eq!(plan.wall_ms, 44230.0);
        assert_eq!(plan.startup_count(), 9);
        assert!(plan.overflow.is_none());
        assert_eq!(plan.prune_ms, 0.25 * 44230.0);

        let mut slow = timing.clone();
        slow.prefill.as_mut().unwrap().draft_ms = LatencyCurve::Constant(50000.0);
        let plan = stage1_prefill(&slow, &cfg).unwrap();
        assert!(plan.overflow.is_some());
        assert!(plan.startup_count() < 9);
    }
}
