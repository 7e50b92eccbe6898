//! Scripted draft/target pairs that replay a fixed decoding story.
//!
//! The target is a point mass on `script[k]` at position `k`. While the draft
//! context agrees with the script, the draft proposes `script[k]` where
//! `accept_mask[k]` is true and a wrong token otherwise. Once its context has
//! diverged at position `d` it follows the detour registered at `d`, so
//! discarded speculative windows have readable content too.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, PairRole};
use crate::primitives::{Distribution, TokenId, Vocab};

/// A wrong continuation the draft follows after diverging at `at`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detour {
    pub at: usize,
    pub tokens: Vec<TokenId>,
}

/// On-disk description of a scripted pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptSpec {
    pub script: Vec<TokenId>,
    #[serde(default)]
    pub accept_mask: Vec<bool>,
    /// Display strings indexed by token id.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub words: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detours: Vec<Detour>,
}

impl ScriptSpec {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| ModelError::Script(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// A target-only script that accepts everything.
    pub fn target_only(script: Vec<TokenId>) -> Self {
        let accept_mask = vec![true; script.len()];
        Self {
            script,
            accept_mask,
            words: Vec::new(),
            detours: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.script.is_empty() {
            return Err(ModelError::Script("script is empty".into()));
        }
        if !self.accept_mask.is_empty() && self.accept_mask.len() != self.script.len() {
            return Err(ModelError::Script(format!(
                "accept_mask has {} entries, script has {}",
                self.accept_mask.len(),
                self.script.len()
            )));
        }
        for d in &self.detours {
            if d.tokens.is_empty() {
                return Err(ModelError::Script(format!("detour at {} is empty", d.at)));
            }
            if d.at >= self.script.len() {
                return Err(ModelError::Script(format!(
                    "detour at {} lies beyond the script",
                    d.at
                )));
            }
            if d.tokens[0] == self.script[d.at] {
                return Err(ModelError::Script(format!(
                    "detour at {} starts with the scripted token",
                    d.at
                )));
            }
        }
        let vocab = self.vocab();
        let max_id = self
            .script
            .iter()
            .chain(self.detours.iter().flat_map(|d| d.tokens.iter()))
            .max()
            .copied()
            .unwrap_or(0);
        if !self.words.is_empty() && max_id as usize >= self.words.len() {
            return Err(ModelError::Script(format!(
                "token id {max_id} has no entry in words"
            )));
        }
        debug_assert!(vocab.contains(max_id));
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let max_id = self
            .script
            .iter()
            .chain(self.detours.iter().flat_map(|d| d.tokens.iter()))
            .max()
            .copied()
            .unwrap_or(0) as usize;
        Vocab::new(self.words.len().max(max_id + 2).max(2)).expect("size is at least 2")
    }

    pub fn word(&self, id: TokenId) -> String {
        self.words
            .get(id as usize)
            .cloned()
            .unwrap_or_else(|| format!("<{id}>"))
    }

    fn accepts(&self, k: usize) -> bool {
        self.accept_mask.get(k).copied().unwrap_or(true)
    }

    fn detour_at(&self, k: usize) -> Option<&Detour> {
        self.detours.iter().find(|d| d.at == k)
    }
}

/// One side of a scripted pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedModel {
    pub spec: ScriptSpec,
    pub role: PairRole,
}

impl ScriptedModel {
    pub fn next_token(&self, context: &[TokenId]) -> TokenId {
        let k = context.len();
        let spec = &self.spec;
        match self.role {
            PairRole::Target => spec.script.get(k).copied().unwrap_or(0),
            PairRole::Draft => {
                let diverged = context
                    .iter()
                    .zip(&spec.script)
                    .position(|(c, s)| c != s);
                match diverged {
                    None => {
                        if k >= spec.script.len() || spec.accepts(k) {
                            spec.script.get(k).copied().unwrap_or(0)
                        } else {
                            match spec.detour_at(k) {
                                Some(d) => d.tokens[0],
                                None => {
                                    (spec.script[k] + 1) % spec.vocab().size() as TokenId
                                }
                            }
                        }
                    }
                    Some(d) => {
                        let follow = spec
                            .detour_at(d)
                            .filter(|det| context.get(d) == Some(&det.tokens[0]))
                            .and_then(|det| det.tokens.get(k - d).copied());
                        follow.unwrap_or_else(|| spec.script.get(k).copied().unwrap_or(0))
                    }
                }
            }
        }
    }

    pub fn distribution(&self, context: &[TokenId]) -> Distribution {
        Distribution::point_mass(self.spec.vocab(), self.next_token(context))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ScriptSpec {
        ScriptSpec {
            script: vec![0, 1, 2, 3],
            accept_mask: vec![true, true, false, true],
            words: vec![],
            detours: vec![Detour {
                at: 2,
                tokens: vec![7, 8],
            }],
        }
    }

    #[test]
    fn target_replays_script() {
        let m = ScriptedModel {
            spec: ScriptSpec::target_only(vec![5, 6, 7]),
            role: PairRole::Target,
        };
        assert_eq!(m.next_token(&[]), 5);
        assert_eq!(m.next_token(&[5, 6]), 7);
        assert_eq!(m.distribution(&[]).prob(5), 1.0);
    }

    #[test]
    fn draft_follows_mask_then_detour() {
        let m = ScriptedModel {
            spec: spec(),
            role: PairRole::Draft,
        };
        assert_eq!(m.next_token(&[]), 0);
        assert_eq!(m.next_token(&[0, 1]), 7);
        assert_eq!(m.next_token(&[0, 1, 7]), 8);
        // Past the detour it falls back to the script.
        assert_eq!(m.next_token(&[0, 1, 7, 8]), 0);
        // Back on script after a correction.
        assert_eq!(m.next_token(&[0, 1, 2]), 3);
    }

    #[test]
    fn json_schema_is_validated() {
        let ok = r#"{"script":[1,2,3],"accept_mask":[true,true,false]}"#;
        assert!(ScriptSpec::from_json(ok).is_ok());
        let bad = r#"{"script":[1,2,3],"accept_mask":[true]}"#;
        assert!(ScriptSpec::from_json(bad).is_err());
        assert!(ScriptSpec::from_json(r#"{"script":[]}"#).is_err());
    }
}
