use serde::{Deserialize, Serialize};

use super::PrimitiveError;

pub type TokenId = u32;

/// Token alphabet; ids are `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self, PrimitiveError> {
        if size < 2 {
            return Err(PrimitiveError::VocabTooSmall(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.size
    }
}

/// An ordered list of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        Self { ids }
    }

    /// Builds a sequence and checks every id against `vocab`.
    pub fn checked(ids: Vec<TokenId>, vocab: Vocab) -> Result<Self, PrimitiveError> {
        let seq = Self { ids };
        seq.validate(vocab)?;
        Ok(seq)
    }

    pub fn validate(&self, vocab: Vocab) -> Result<(), PrimitiveError> {
        match self.ids.iter().find(|&&id| !vocab.contains(id)) {
            Some(&id) => Err(PrimitiveError::TokenOutOfRange {
                id,
                size: vocab.size(),
            }),
            None => Ok(()),
        }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: TokenId) {
        self.ids.push(id);
    }

    pub fn extend_from_slice(&mut self, ids: &[TokenId]) {
        self.ids.extend_from_slice(ids);
    }

    pub fn truncate(&mut self, len: usize) {
        self.ids.truncate(len);
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self::from_ids(ids)
    }
}

impl std::ops::Index<usize> for TokenSequence {
    type Output = TokenId;

    fn index(&self, index: usize) -> &TokenId {
        &self.ids[index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_rejects_degenerate_sizes() {
        assert_eq!(Vocab::new(1), Err(PrimitiveError::VocabTooSmall(1)));
        assert_eq!(Vocab::new(0), Err(PrimitiveError::VocabTooSmall(0)));
        assert_eq!(Vocab::new(2).unwrap().size(), 2);
    }

    #[test]
    fn checked_sequence_rejects_out_of_range_ids() {
        let vocab = Vocab::new(4).unwrap();
        assert!(TokenSequence::checked(vec![0, 3, 1], vocab).is_ok());
        assert_eq!(
            TokenSequence::checked(vec![0, 4], vocab),
            Err(PrimitiveError::TokenOutOfRange { id: 4, size: 4 })
        );
    }
}
