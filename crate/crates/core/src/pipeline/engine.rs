use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::exec::{DraftCmd, Executor, TargetCmd};
use super::stage1::Stage1Plan;
use super::trace::{Actor, EventKind, EventTrace};
use super::{AcceptanceSemantics, PipelineError};
use crate::models::TokenContext;
use crate::primitives::{Distribution, TokenId, TokenSequence};
use crate::stats::{self, RunStats, Tally, Timings};

/// Slack for comparing simulated clock values.
const CLOCK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    PreVerify,
    PostVerify,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingToken {
    pub token: TokenId,
    pub dist: Distribution,
    pub ready_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    pub mode: Mode,
    pub accepted: TokenSequence,
    pub pending: VecDeque<PendingToken>,
    /// Length of the draft model's context.
    pub draft_cursor: usize,
    /// Time the draft finished its last token.
    pub clock_draft: f64,
    /// Time the target finished its last span.
    pub clock_target: f64,
    pub verification_rounds: u64,
    /// The draft stopped because its queue was full rather than mid-token.
    pub(crate) draft_capped: bool,
}

pub(crate) struct Engine<E: Executor> {
    exec: E,
    pub state: PipelineState,
    accepted_ctx: TokenContext,
    pub trace: EventTrace,
    tally: Tally,
    gamma: usize,
    k: usize,
    t_d: f64,
    t_p: f64,
    t0: f64,
    semantics: AcceptanceSemantics,
}

impl<E: Executor> Engine<E> {
    /// Drafts the first token and the startup window of the plan, then runs
    /// the initial Pre-verify against the target's prefill output.
    pub fn start(
        mut exec: E,
        plan: Stage1Plan,
        k: usize,
        t_d: f64,
        t_p: f64,
        semantics: AcceptanceSemantics,
    ) -> Result<Self, PipelineError> {
        let gamma = plan.gamma;
        let t0 = plan.wall_ms;
        let mut trace = plan.trace.clone();
        let mut state = PipelineState {
            mode: Mode::PreVerify,
            accepted: TokenSequence::new(),
            pending: VecDeque::new(),
            draft_cursor: 0,
            clock_draft: t0,
            clock_target: t0,
            verification_rounds: 0,
            draft_capped: false,
        };
        if semantics == AcceptanceSemantics::Truncating {
            let drafted = exec.draft(1 + plan.startup_count())?;
            let ready = std::iter::once(plan.draft_prefill_done_ms).chain(plan.startup_ready_ms.iter().copied());
            for ((token, dist), ready_ms) in drafted.into_iter().zip(ready) {
                state.pending.push_back(PendingToken { token, dist, ready_ms });
            }
            // Put the drafted ids into the prefill and startup events.
            let mut ids = state.pending.iter().map(|p| p.token);
            for e in trace.events.iter_mut() {
                if e.actor == Actor::Draft && matches!(e.event, EventKind::Prefill | EventKind::StartupDraft) {
                    if let (Some(obj), Some(id)) = (e.payload.as_object_mut(), ids.next()) {
                        obj.insert("token".into(), json!(id));
                    }
                }
            }
            state.draft_cursor = state.pending.len();
            state.clock_draft = plan.draft_branch_ms();
            state.draft_capped = plan.startup_count() == gamma;
        }
        let mut engine = Self {
            exec,
            state,
            accepted_ctx: TokenContext::new(),
            trace,
            tally: Tally::new(gamma),
            gamma,
            k,
            t_d,
            t_p,
            t0,
            semantics,
        };
        if semantics == AcceptanceSemantics::Truncating {
            engine.pre_verify(true)?;
        }
        Ok(engine)
    }

    pub fn is_done(&self) -> bool {
        self.state.accepted.len() >= self.k
    }

    pub fn step(&mut self) -> Result<(), PipelineError> {
        match self.semantics {
            AcceptanceSemantics::Truncating => match self.state.mode {
                Mode::PreVerify => self.pre_verify(false),
                Mode::PostVerify => self.post_verify(),
            },
            AcceptanceSemantics::Independent => self.independent_span(),
            AcceptanceSemantics::TwoRound => self.two_round_cycle(),
        }
    }

    pub fn run(&mut self) -> Result<(), PipelineError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    fn draft_start(&self, t: f64) -> f64 {
        if self.state.draft_capped {
            self.state.clock_draft.max(t)
        } else {
            self.state.clock_draft
        }
    }

    /// Queues drafted tokens that occupy positions `pos..` and finished one
    /// draft forward apart from `start`.
    fn push_pending(&mut self, drafted: Vec<(TokenId, Distribution)>, start: f64, pos: usize) {
        for (i, (token, dist)) in drafted.into_iter().enumerate() {
            let ready_ms = start + (i + 1) as f64 * self.t_d;
            self.trace.push(
                ready_ms,
                Actor::Draft,
                EventKind::DraftToken,
                json!({ "pos": pos + i, "token": token }),
            );
            self.state.pending.push_back(PendingToken { token, dist, ready_ms });
            self.state.draft_cursor = pos + i + 1;
        }
    }

    fn emit(&mut self, at: f64, tokens: &[TokenId]) {
        let pos = self.state.accepted.len();
        self.trace.push(at, Actor::Target, EventKind::Emit, json!({ "pos": pos, "tokens": tokens }));
        self.state.accepted.extend_from_slice(tokens);
        for &t in tokens {
            self.accepted_ctx.push(t);
        }
    }

    /// Pre-rollback and restart: the draft context becomes the accepted
    /// output and drafting resumes at `at`.
    fn rollback(&mut self, at: f64) -> Result<(), PipelineError> {
        self.state.pending.clear();
        // Everything before the correction was drafted by the draft itself.
        let keep = self.state.accepted.len() - 1;
        let correction = self.state.accepted[keep];
        let hash = self.exec.rewind_draft(keep, vec![correction])?;
        let expected = self.accepted_ctx.hash();
        if hash != expected {
            return Err(PipelineError::RollbackMismatch { expected, found: hash });
        }
        self.trace.push(
            at,
            Actor::Draft,
            EventKind::Rollback,
            json!({ "to": self.state.accepted.len(), "hash": hash }),
        );
        self.state.draft_cursor = self.state.accepted.len();
        self.state.clock_draft = at;
        self.state.draft_capped = false;
        self.state.mode = Mode::PreVerify;
        self.tally.rollbacks += 1;
        self.tally.break_run();
        Ok(())
    }

    /// Verifies only the first queued draft token. The span costs one target
    /// forward, or lasts until that token exists; the draft keeps drafting
    /// meanwhile until `gamma + 1` tokens are queued.
    pub fn pre_verify(&mut self, initial: bool) -> Result<(), PipelineError> {
        if self.state.mode != Mode::PreVerify {
            return Err(PipelineError::WrongMode(Mode::PostVerify));
        }
        let t = self.state.clock_target;
        if self.state.pending.is_empty() {
            let start = self.draft_start(t);
            let drafted = self.exec.draft(1)?;
            self.push_pending(drafted, start, self.state.accepted.len());
            self.state.clock_draft = start + self.t_d;
            self.state.draft_capped = false;
        }
        let r0 = self.state.pending[0].ready_ms;
        let span_end = if initial { t.max(r0) } else { (t + self.t_p).max(r0) };

        let cap = self.gamma + 1;
        let start = self.draft_start(t);
        let mut n = 0;
        while self.state.pending.len() + n < cap && start + (n + 1) as f64 * self.t_d <= span_end + CLOCK_EPS {
            n += 1;
        }
        if n > 0 {
            self.exec.send_draft(DraftCmd::Draft(n))?;
        }
        let head = self.state.pending[0].clone();
        self.exec.send_target(TargetCmd::Verify {
            window: vec![head.token],
            dists: vec![head.dist],
        })?;
        let outcome = self.exec.recv_verified()?;
        let pos = self.state.accepted.len();
        self.trace.push(
            t,
            Actor::Target,
            EventKind::PreVerify,
            json!({
                "pos": pos,
                "window": [head.token],
                "accepted": outcome.accepted_count,
                "end_ms": span_end,
                "initial": initial,
            }),
        );
        if n > 0 {
            let drafted = self.exec.recv_drafted()?;
            let at = self.state.accepted.len() + self.state.pending.len();
            self.push_pending(drafted, start, at);
            self.state.clock_draft = start + n as f64 * self.t_d;
        }
        self.state.draft_capped = self.state.pending.len() >= cap;

        if !initial {
            self.tally.rounds += 1;
        }
        self.state.verification_rounds += 1;
        self.tally.drafts_verified += 1;
        self.state.clock_target = span_end;
        if outcome.accepted_count == 1 {
            self.tally.drafts_accepted += 1;
            self.tally.accept_run(1);
            self.state.pending.pop_front();
            self.emit(span_end, &[head.token]);
            self.state.mode = if self.state.pending.is_empty() {
                Mode::PreVerify
            } else {
                Mode::PostVerify
            };
        } else {
            let y = outcome.emitted[0];
            self.trace.push(span_end, Actor::Target, EventKind::Resample, json!({ "pos": pos, "token": y }));
            self.emit(span_end, &[y]);
            self.rollback(span_end)?;
        }
        Ok(())
    }

    /// Verifies every queued token in one target pass while the draft drafts
    /// the next `gamma` tokens. The span lasts `max(T_p, drafting time)`.
    pub fn post_verify(&mut self) -> Result<(), PipelineError> {
        if self.state.mode != Mode::PostVerify {
            return Err(PipelineError::WrongMode(Mode::PreVerify));
        }
        if self.state.pending.is_empty() {
            return Err(PipelineError::EmptyWindow);
        }
        let t = self.state.clock_target;
        let window: Vec<PendingToken> = self.state.pending.drain(..).collect();
        let ids: Vec<TokenId> = window.iter().map(|p| p.token).collect();
        let start = self.draft_start(t);
        self.exec.send_draft(DraftCmd::Draft(self.gamma))?;
        self.exec.send_target(TargetCmd::Verify {
            window: ids.clone(),
            dists: window.into_iter().map(|p| p.dist).collect(),
        })?;
        let outcome = self.exec.recv_verified()?;
        let drafted = self.exec.recv_drafted()?;
        let draft_done = start + self.gamma as f64 * self.t_d;
        let span_end = (t + self.t_p).max(draft_done);
        let pos = self.state.accepted.len();
        self.trace.push(
            t,
            Actor::Target,
            EventKind::PostVerify,
            json!({
                "pos": pos,
                "window": ids,
                "accepted": outcome.accepted_count,
                "end_ms": span_end,
            }),
        );
        // The new drafts sit behind the window in the draft's context.
        self.push_pending(drafted, start, pos + ids.len());
        self.state.clock_draft = draft_done;
        self.state.draft_capped = true;

        self.tally.rounds += 1;
        self.state.verification_rounds += 1;
        self.tally.drafts_verified += (outcome.accepted_count + usize::from(outcome.corrected)) as u64;
        self.tally.drafts_accepted += outcome.accepted_count as u64;
        if ids.len() == self.gamma {
            self.tally.histogram[outcome.accepted_count] += 1;
        }
        self.tally.accept_run(outcome.accepted_count);
        self.state.clock_target = span_end;
        if !outcome.corrected {
            self.emit(span_end, &ids);
        } else {
            let y = *outcome.emitted.ids().last().expect("correction emitted");
            self.trace.push(
                span_end,
                Actor::Target,
                EventKind::Resample,
                json!({ "pos": pos + outcome.accepted_count, "token": y }),
            );
            self.emit(span_end, outcome.emitted.ids());
            self.rollback(span_end)?;
        }
        Ok(())
    }

    fn span_ms(&self) -> f64 {
        self.t_p.max(self.gamma as f64 * self.t_d)
    }

    /// One proposal at the frontier judged by the envelope test.
    fn frontier_trial(&mut self) -> Result<(TokenId, bool), PipelineError> {
        self.exec.rewind_draft(self.state.accepted.len(), Vec::new())?;
        let (token, q) = self
            .exec
            .draft(1)?
            .pop()
            .ok_or(PipelineError::Protocol("draft returned no token"))?;
        let ok = self.exec.judge(token, q)?;
        self.tally.drafts_verified += 1;
        Ok((token, ok))
    }

    fn record_span(&mut self, kind: EventKind, window: &[TokenId], accepted: &[TokenId]) {
        let t = self.state.clock_target;
        let end = t + self.span_ms();
        self.trace.push(
            t,
            Actor::Target,
            kind,
            json!({ "pos": self.state.accepted.len(), "window": window, "accepted": accepted.len(), "end_ms": end }),
        );
        self.tally.rounds += 1;
        self.state.verification_rounds += 1;
        self.state.clock_target = end;
        if !accepted.is_empty() {
            let before = self.state.accepted.len();
            self.trace.push(end, Actor::Target, EventKind::Emit, json!({ "pos": before, "tokens": accepted }));
            self.state.accepted.extend_from_slice(accepted);
            for &x in accepted {
                self.accepted_ctx.push(x);
            }
        }
        self.tally.drafts_accepted += accepted.len() as u64;
    }

    /// `gamma` independent trials per span; rejected slots emit nothing.
    fn independent_span(&mut self) -> Result<(), PipelineError> {
        let mut window = Vec::with_capacity(self.gamma);
        let mut accepted = Vec::new();
        for _ in 0..self.gamma {
            let (x, ok) = self.frontier_trial()?;
            window.push(x);
            if ok {
                // Later slots condition on the tokens accepted so far.
                self.state.accepted.push(x);
                accepted.push(x);
                self.tally.accept_run(1);
            } else {
                self.tally.break_run();
            }
        }
        let before = self.state.accepted.len() - accepted.len();
        self.state.accepted.truncate(before);
        self.tally.histogram[accepted.len()] += 1;
        self.record_span(EventKind::PostVerify, &window, &accepted);
        Ok(())
    }

    /// Accepts proposals until the first rejection, at most `gamma`.
    fn truncated_round(&mut self) -> Result<(Vec<TokenId>, Vec<TokenId>), PipelineError> {
        let before = self.state.accepted.len();
        let mut window = Vec::new();
        let mut accepted = Vec::new();
        for _ in 0..self.gamma {
            let (x, ok) = self.frontier_trial()?;
            window.push(x);
            if !ok {
                break;
            }
            self.state.accepted.push(x);
            accepted.push(x);
        }
        self.state.accepted.truncate(before);
        self.tally.histogram[accepted.len()] += 1;
        Ok((window, accepted))
    }

    /// Two spans: the second round counts only when the first accepted the
    /// whole window; otherwise it is spent on the rollback.
    fn two_round_cycle(&mut self) -> Result<(), PipelineError> {
        let (w1, a1) = self.truncated_round()?;
        let full = a1.len() == self.gamma;
        self.tally.accept_run(a1.len());
        self.record_span(EventKind::PostVerify, &w1, &a1);
        if full {
            let (w2, a2) = self.truncated_round()?;
            self.tally.accept_run(a2.len());
            self.record_span(EventKind::PostVerify, &w2, &a2);
            if a2.len() < self.gamma {
                self.frontier_rollback()?;
            }
        } else {
            self.frontier_rollback()?;
            self.record_span(EventKind::PreVerify, &[], &[]);
        }
        Ok(())
    }

    /// Rollback of a frontier-trial round: the draft returns to the accepted
    /// output at the current target time.
    fn frontier_rollback(&mut self) -> Result<(), PipelineError> {
        let hash = self.exec.rewind_draft(self.state.accepted.len(), Vec::new())?;
        let expected = self.accepted_ctx.hash();
        if hash != expected {
            return Err(PipelineError::RollbackMismatch { expected, found: hash });
        }
        self.trace.push(
            self.state.clock_target,
            Actor::Draft,
            EventKind::Rollback,
            json!({ "to": self.state.accepted.len(), "hash": hash }),
        );
        self.tally.rollbacks += 1;
        self.tally.break_run();
        Ok(())
    }

    pub fn finish(self, t_target: f64) -> (TokenSequence, RunStats, EventTrace) {
        let mut tokens = self.state.accepted.clone();
        let emitted_total = tokens.len();
        tokens.truncate(self.k);
        let m = match self.semantics {
            AcceptanceSemantics::Truncating => self.tally.mean_run(),
            _ => self.tally.drafts_accepted as f64 / self.tally.rounds.max(1) as f64,
        };
        let stats = stats::finish(
            &self.tally,
            self.gamma,
            self.k,
            emitted_total,
            m,
            Timings {
                t_target,
                stage1_ms: self.t0,
                decode_ms: self.state.clock_target - self.t0,
            },
        );
        (tokens, stats, self.trace)
    }
}
