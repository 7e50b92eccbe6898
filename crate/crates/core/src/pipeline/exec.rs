//! Draft and target workers and the two ways of running them: inline on the
//! caller's thread, or on two threads that only exchange messages.

use std::collections::VecDeque;

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::PipelineError;
use crate::models::{ModelHandle, MultimodalPrefix, TokenContext};
use crate::primitives::{sample, Distribution, SeededRng, TokenId};
use crate::specdec::{envelope_accept, verify_in_context, SpecDecError, VerifyOutcome};

#[derive(Debug, Clone)]
pub(crate) enum DraftCmd {
    /// Truncate the draft context to `keep` tokens, then append `push`
    /// (pre-rollback). Replies with the hash of the new context.
    Rewind { keep: usize, push: Vec<TokenId> },
    /// Draft `n` tokens continuing the current context.
    Draft(usize),
}

#[derive(Debug, Clone)]
pub(crate) enum DraftReply {
    Reset(u64),
    Drafted(Vec<(TokenId, Distribution)>),
}

#[derive(Debug, Clone)]
pub(crate) enum TargetCmd {
    /// Truncating verification of a window, no bonus token.
    Verify {
        window: Vec<TokenId>,
        dists: Vec<Distribution>,
    },
    /// Envelope test of one proposal at the frontier.
    Judge { token: TokenId, q: Distribution },
}

#[derive(Debug, Clone)]
pub(crate) enum TargetReply {
    Verified(Result<VerifyOutcome, SpecDecError>),
    Judged(Result<bool, SpecDecError>),
}

pub(crate) struct DraftWorker {
    model: ModelHandle,
    prefix: MultimodalPrefix,
    ctx: TokenContext,
    rng: SeededRng,
}

impl DraftWorker {
    pub fn new(model: ModelHandle, prefix: MultimodalPrefix, rng: SeededRng) -> Self {
        Self {
            model,
            prefix,
            ctx: TokenContext::new(),
            rng,
        }
    }

    pub fn handle(&mut self, cmd: DraftCmd) -> DraftReply {
        match cmd {
            DraftCmd::Rewind { keep, push } => {
                self.ctx.truncate(keep);
                for t in push {
                    self.ctx.push(t);
                }
                DraftReply::Reset(self.ctx.hash())
            }
            DraftCmd::Draft(n) => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    let q = self.model.distribution_in(&self.prefix, &self.ctx);
                    let x = sample(&q, &mut self.rng);
                    self.ctx.push(x);
                    out.push((x, q));
                }
                DraftReply::Drafted(out)
            }
        }
    }
}

/// The target's context always equals the accepted output.
pub(crate) struct TargetWorker {
    model: ModelHandle,
    prefix: MultimodalPrefix,
    ctx: TokenContext,
    rng: SeededRng,
}

impl TargetWorker {
    pub fn new(model: ModelHandle, prefix: MultimodalPrefix, rng: SeededRng) -> Self {
        Self {
            model,
            prefix,
            ctx: TokenContext::new(),
            rng,
        }
    }

    pub fn handle(&mut self, cmd: TargetCmd) -> TargetReply {
        match cmd {
            TargetCmd::Verify { window, dists } => TargetReply::Verified(verify_in_context(
                &self.model,
                &self.prefix,
                &mut self.ctx,
                &window,
                &dists,
                &mut self.rng,
                false,
            )),
            TargetCmd::Judge { token, q } => {
                let p = self.model.distribution_in(&self.prefix, &self.ctx);
                let r = envelope_accept(&p, &q, token, &mut self.rng);
                if let Ok(true) = r {
                    self.ctx.push(token);
                }
                TargetReply::Judged(r)
            }
        }
    }
}

pub(crate) trait Executor {
    fn send_draft(&mut self, cmd: DraftCmd) -> Result<(), PipelineError>;
    fn recv_draft(&mut self) -> Result<DraftReply, PipelineError>;
    fn send_target(&mut self, cmd: TargetCmd) -> Result<(), PipelineError>;
    fn recv_target(&mut self) -> Result<TargetReply, PipelineError>;

    fn draft(&mut self, n: usize) -> Result<Vec<(TokenId, Distribution)>, PipelineError> {
        self.send_draft(DraftCmd::Draft(n))?;
        self.recv_drafted()
    }

    fn recv_drafted(&mut self) -> Result<Vec<(TokenId, Distribution)>, PipelineError> {
        match self.recv_draft()? {
            DraftReply::Drafted(v) => Ok(v),
            DraftReply::Reset(_) => Err(PipelineError::Protocol("expected drafted tokens")),
        }
    }

    fn rewind_draft(&mut self, keep: usize, push: Vec<TokenId>) -> Result<u64, PipelineError> {
        self.send_draft(DraftCmd::Rewind { keep, push })?;
        match self.recv_draft()? {
            DraftReply::Reset(h) => Ok(h),
            DraftReply::Drafted(_) => Err(PipelineError::Protocol("expected a reset reply")),
        }
    }

    fn recv_verified(&mut self) -> Result<VerifyOutcome, PipelineError> {
        match self.recv_target()? {
            TargetReply::Verified(r) => Ok(r?),
            TargetReply::Judged(_) => Err(PipelineError::Protocol("expected a verification")),
        }
    }

    fn judge(&mut self, token: TokenId, q: Distribution) -> Result<bool, PipelineError> {
        self.send_target(TargetCmd::Judge { token, q })?;
        match self.recv_target()? {
            TargetReply::Judged(r) => Ok(r?),
            TargetReply::Verified(_) => Err(PipelineError::Protocol("expected a judgement")),
        }
    }
}

/// Runs each command inline when it is sent.
pub(crate) struct InlineExecutor {
    draft: DraftWorker,
    target: TargetWorker,
    draft_out: VecDeque<DraftReply>,
    target_out: VecDeque<TargetReply>,
}

impl InlineExecutor {
    pub fn new(draft: DraftWorker, target: TargetWorker) -> Self {
        Self {
            draft,
            target,
            draft_out: VecDeque::new(),
            target_out: VecDeque::new(),
        }
    }
}

impl Executor for InlineExecutor {
    fn send_draft(&mut self, cmd: DraftCmd) -> Result<(), PipelineError> {
        let r = self.draft.handle(cmd);
        self.draft_out.push_back(r);
        Ok(())
    }

    fn recv_draft(&mut self) -> Result<DraftReply, PipelineError> {
        self.draft_out
            .pop_front()
            .ok_or(PipelineError::Protocol("no pending draft reply"))
    }

    fn send_target(&mut self, cmd: TargetCmd) -> Result<(), PipelineError> {
        let r = self.target.handle(cmd);
        self.target_out.push_back(r);
        Ok(())
    }

    fn recv_target(&mut self) -> Result<TargetReply, PipelineError> {
        self.target_out
            .pop_front()
            .ok_or(PipelineError::Protocol("no pending target reply"))
    }
}

/// Talks to workers running on their own threads.
pub(crate) struct ChannelExecutor {
    draft_tx: Option<Sender<DraftCmd>>,
    draft_rx: Receiver<DraftReply>,
    target_tx: Option<Sender<TargetCmd>>,
    target_rx: Receiver<TargetReply>,
}

impl ChannelExecutor {
    /// Spawns both workers in `scope`. They exit when the executor drops.
    pub fn spawn<'scope, 'env>(
        scope: &'scope std::thread::Scope<'scope, 'env>,
        mut draft: DraftWorker,
        mut target: TargetWorker,
    ) -> Self {
        let (draft_tx, draft_cmds) = unbounded::<DraftCmd>();
        let (draft_replies, draft_rx) = unbounded::<DraftReply>();
        let (target_tx, target_cmds) = unbounded::<TargetCmd>();
        let (target_replies, target_rx) = unbounded::<TargetReply>();
        scope.spawn(move || {
            for cmd in draft_cmds {
                if draft_replies.send(draft.handle(cmd)).is_err() {
                    break;
                }
            }
        });
        scope.spawn(move || {
            for cmd in target_cmds {
                if target_replies.send(target.handle(cmd)).is_err() {
                    break;
                }
            }
        });
        Self {
            draft_tx: Some(draft_tx),
            draft_rx,
            target_tx: Some(target_tx),
            target_rx,
        }
    }
}

impl Drop for ChannelExecutor {
    fn drop(&mut self) {
        // Closing the command channels ends the worker loops.
        self.draft_tx.take();
        self.target_tx.take();
    }
}

impl Executor for ChannelExecutor {
    fn send_draft(&mut self, cmd: DraftCmd) -> Result<(), PipelineError> {
        self.draft_tx
            .as_ref()
            .ok_or(PipelineError::ChannelClosed("draft"))?
            .send(cmd)
            .map_err(|_| PipelineError::ChannelClosed("draft"))
    }

    fn recv_draft(&mut self) -> Result<DraftReply, PipelineError> {
        self.draft_rx
            .recv()
            .map_err(|_| PipelineError::ChannelClosed("draft"))
    }

    fn send_target(&mut self, cmd: TargetCmd) -> Result<(), PipelineError> {
        self.target_tx
            .as_ref()
            .ok_or(PipelineError::ChannelClosed("target"))?
            .send(cmd)
            .map_err(|_| PipelineError::ChannelClosed("target"))
    }

    fn recv_target(&mut self) -> Result<TargetReply, PipelineError> {
        self.target_rx
            .recv()
            .map_err(|_| PipelineError::ChannelClosed("target"))
    }
}
