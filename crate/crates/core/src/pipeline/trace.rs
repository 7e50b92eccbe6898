use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::models::TokenContext;
use crate::primitives::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Draft,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Prefill,
    Prune,
    StartupDraft,
    DraftToken,
    PreVerify,
    PostVerify,
    Rollback,
    Resample,
    Emit,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        write!(f, "{}", s.as_ref().and_then(Value::as_str).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub ts_ms: f64,
    pub actor: Actor,
    pub event: EventKind,
    pub payload: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventTrace {
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EventTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, ts_ms: f64, actor: Actor, event: EventKind, payload: Value) {
        self.events.push(TraceEvent {
            ts_ms,
            actor,
            event,
            payload,
        });
    }

    pub fn extend(&mut self, other: EventTrace) {
        self.events.extend(other.events);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.event == kind)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TraceIoError> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|source| TraceIoError::Parse {
                line: i + 1,
                source,
            })?;
            events.push(e);
        }
        Ok(Self { events })
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceIoError> {
        Self::read_jsonl(text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("event {index} ({event}): {message}")]
pub struct TraceViolation {
    pub index: usize,
    pub event: String,
    pub message: String,
}

/// What a valid trace adds up to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub semantics: String,
    pub emitted: Vec<TokenId>,
    /// Verification events that cost target time.
    pub verification_spans: usize,
    pub rollbacks: usize,
    pub max_accepted_run: usize,
    pub end_ms: f64,
}

fn ids(v: &Value, key: &str) -> Option<Vec<TokenId>> {
    v.get(key)?
        .as_array()?
        .iter()
        .map(|x| x.as_u64().map(|n| n as TokenId))
        .collect()
}

fn uint(v: &Value, key: &str) -> Option<usize> {
    v.get(key)?.as_u64().map(|n| n as usize)
}

/// Re-checks the invariants of a pipeline trace:
/// per-actor timestamps never go backwards; every emit continues the output
/// and is covered by the verification just before it; the draft context after
/// each rollback hashes to the emitted prefix; and, under truncating
/// acceptance, Post-verify is only entered through an accepted Pre-verify
/// while every rollback is followed by Pre-verify.
pub fn check_trace(trace: &EventTrace) -> Result<TraceSummary, TraceViolation> {
    let fail = |index: usize, e: &TraceEvent, message: String| TraceViolation {
        index,
        event: e.event.to_string(),
        message,
    };
    let mut last_ts: HashMap<Actor, f64> = HashMap::new();
    let mut semantics = String::from("truncating");
    let mut emitted: Vec<TokenId> = Vec::new();
    let mut emitted_ctx = TokenContext::new();
    // (position, window length) of the latest verification not yet emitted.
    let mut covering: Option<(usize, usize)> = None;
    let mut spans = 0usize;
    let mut rollbacks = 0usize;
    let mut run = 0usize;
    let mut max_run = 0usize;
    // Whether the next verification may be Pre-verify / Post-verify.
    let mut may_pre = true;
    let mut may_post = false;
    let mut end_ms: f64 = 0.0;

    for (i, e) in trace.events.iter().enumerate() {
        let prev = last_ts.entry(e.actor).or_insert(f64::NEG_INFINITY);
        if e.ts_ms < *prev {
            return Err(fail(i, e, format!("timestamp {} before {}", e.ts_ms, prev)));
        }
        *prev = e.ts_ms;
        end_ms = end_ms.max(e.ts_ms);
        let p = &e.payload;
        let truncating = semantics == "truncating";
        match e.event {
            EventKind::Prefill => {
                if let Some(s) = p.get("semantics").and_then(Value::as_str) {
                    semantics = s.to_string();
                }
            }
            EventKind::PreVerify | EventKind::PostVerify => {
                let pos = uint(p, "pos").ok_or_else(|| fail(i, e, "missing pos".into()))?;
                let window = ids(p, "window").ok_or_else(|| fail(i, e, "missing window".into()))?;
                let accepted = uint(p, "accepted").ok_or_else(|| fail(i, e, "missing accepted".into()))?;
                if pos != emitted.len() {
                    return Err(fail(i, e, format!("verifies position {pos}, output has {}", emitted.len())));
                }
                if accepted > window.len() {
                    return Err(fail(i, e, "accepted more than the window".into()));
                }
                if let Some(end) = p.get("end_ms").and_then(Value::as_f64) {
                    if end < e.ts_ms {
                        return Err(fail(i, e, "span ends before it starts".into()));
                    }
                }
                // The first check reuses the target's prefill pass.
                if !p.get("initial").and_then(Value::as_bool).unwrap_or(false) {
                    spans += 1;
                }
                if truncating {
                    let pre = e.event == EventKind::PreVerify;
                    if pre && !may_pre {
                        return Err(fail(i, e, "Pre-verify after a fully accepted Post-verify".into()));
                    }
                    if !pre && !may_post {
                        return Err(fail(i, e, "Post-verify without an accepted Pre-verify".into()));
                    }
                    if pre && window.len() != 1 {
                        return Err(fail(i, e, "Pre-verify must check exactly one token".into()));
                    }
                    let full = accepted == window.len();
                    may_pre = pre && full;
                    may_post = full;
                    if !full {
                        // Only a rollback may follow; it re-enables Pre-verify.
                        may_pre = false;
                    }
                }
                covering = Some((pos, window.len()));
            }
            EventKind::Emit => {
                let pos = uint(p, "pos").ok_or_else(|| fail(i, e, "missing pos".into()))?;
                let tokens = ids(p, "tokens").ok_or_else(|| fail(i, e, "missing tokens".into()))?;
                let (vpos, vlen) = covering
                    .take()
                    .ok_or_else(|| fail(i, e, "emit without a preceding verification".into()))?;
                if pos != emitted.len() || pos != vpos {
                    return Err(fail(i, e, format!("emit at {pos}, expected {}", emitted.len())));
                }
                if tokens.len() > vlen + 1 {
                    return Err(fail(i, e, "emit extends past the verified window".into()));
                }
                emitted.extend_from_slice(&tokens);
                for &t in &tokens {
                    emitted_ctx.push(t);
                }
            }
            EventKind::Rollback => {
                let to = uint(p, "to").ok_or_else(|| fail(i, e, "missing to".into()))?;
                if to != emitted.len() {
                    return Err(fail(i, e, format!("rollback to {to}, output has {}", emitted.len())));
                }
                if let Some(h) = p.get("hash").and_then(Value::as_u64) {
                    if h != emitted_ctx.hash() {
                        return Err(fail(i, e, "draft context does not match the accepted prefix".into()));
                    }
                }
                rollbacks += 1;
                run = 0;
                if truncating {
                    may_pre = true;
                    may_post = false;
                }
            }
            EventKind::Resample => {}
            EventKind::Prune | EventKind::StartupDraft | EventKind::DraftToken => {}
        }
        if matches!(e.event, EventKind::PreVerify | EventKind::PostVerify) {
            let accepted = uint(p, "accepted").unwrap_or(0);
            run += accepted;
            max_run = max_run.max(run);
        }
    }
    Ok(TraceSummary {
        semantics,
        emitted,
        verification_spans: spans,
        rollbacks,
        max_accepted_run: max_run,
        end_ms,
    })
}
