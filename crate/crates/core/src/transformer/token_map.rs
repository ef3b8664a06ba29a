//! Compact model vocabulary: the WordPiece ids a model actually uses,
//! renumbered densely so embedding and output layers stay small.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::wordpiece::SpecialIds;

pub const MODEL_PAD: usize = 0;
pub const MODEL_UNK: usize = 1;
pub const MODEL_BOS: usize = 2;
pub const MODEL_EOS: usize = 3;
pub const MODEL_SEP: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenMap {
    pieces: Vec<u32>,
    index: HashMap<u32, usize>,
}

impl From<Vec<u32>> for TokenMap {
    fn from(pieces: Vec<u32>) -> Self {
        let index = pieces.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        TokenMap { pieces, index }
    }
}

impl From<TokenMap> for Vec<u32> {
    fn from(m: TokenMap) -> Vec<u32> {
        m.pieces
    }
}

impl TokenMap {
    /// Reserved ids first (`[PAD]`, `[UNK]`, `[BOS]`, `[EOS]`, `*`), then
    /// `always` in order, then every other id seen in `sequences`, ascending.
    pub fn build<'a, I>(special: SpecialIds, always: &[u32], sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        let mut pieces = vec![special.pad, special.unk, special.bos, special.eos, special.separator];
        for &id in always {
            if !pieces.contains(&id) {
                pieces.push(id);
            }
        }
        let fixed: BTreeSet<u32> = pieces.iter().copied().collect();
        let rest: BTreeSet<u32> = sequences
            .into_iter()
            .flat_map(|s| s.iter().copied())
            .filter(|id| !fixed.contains(id))
            .collect();
        pieces.extend(rest);
        TokenMap::from(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Model id for a WordPiece id; unseen pieces map to the model's `[UNK]`.
    pub fn to_model(&self, piece: u32) -> usize {
        self.index.get(&piece).copied().unwrap_or(MODEL_UNK)
    }

    pub fn to_model_seq(&self, pieces: &[u32]) -> Vec<usize> {
        pieces.iter().map(|&p| self.to_model(p)).collect()
    }

    pub fn to_piece(&self, model_id: usize) -> Option<u32> {
        self.pieces.get(model_id).copied()
    }

    pub fn to_piece_seq(&self, ids: &[usize]) -> Vec<u32> {
        ids.iter().filter_map(|&i| self.to_piece(i)).collect()
    }

    pub fn pieces(&self) -> &[u32] {
        &self.pieces
    }
}
