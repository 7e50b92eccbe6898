use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use specpipe::primitives::TokenId;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INVARIANT: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    pub fn usage_msg(msg: &str) -> Self {
        Self::usage(anyhow::anyhow!(msg.to_string()))
    }

    pub fn invariant(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_INVARIANT,
            error: error.into(),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self {
            code: EXIT_FAILURE,
            error: e.into(),
        }
    }
}

pub trait UsageExt<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(Failure::usage)
    }
}

/// SHA-256 of the token ids as little-endian u32.
pub fn token_hash(tokens: &[TokenId]) -> String {
    let mut h = Sha256::new();
    for &t in tokens {
        h.update((t as u32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Everything that may differ between identical runs lives here.
pub fn metadata(extra: Value) -> Value {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let mut m = json!({
        "tool": "specpipe",
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix_ms": now as u64,
    });
    if let (Some(obj), Value::Object(more)) = (m.as_object_mut(), extra) {
        obj.extend(more);
    }
    m
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}
