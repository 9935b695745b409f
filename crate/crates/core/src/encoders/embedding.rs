use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};

/// Reserved id whose embedding row is pinned to zero.
pub const PAD_ID: usize = 0;

/// Question as vocabulary ids, in word order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::domain("token_sequence", "empty question"));
        }
        Ok(Self { ids })
    }

    pub fn checked(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Lookup {
                id: bad,
                limit: vocab_size,
            });
        }
        Self::new(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn reversed(&self) -> Self {
        Self {
            ids: self.ids.iter().rev().copied().collect(),
        }
    }

    /// Tokens reordered so that position `i` holds original token `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            ids: perm.iter().map(|&p| self.ids[p]).collect(),
        }
    }
}

/// Trainable word embeddings `[vocab x d_w]`, uniform in `[-0.1, 0.1]`.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let id = store.insert_uniform(name, &[vocab_size, dim], 0.1, rng)?;
        store.pin_zero_row(id, PAD_ID);
        Ok(Self {
            id,
            vocab_size,
            dim,
        })
    }

    /// `[n x d_w]` rows for the given tokens.
    pub fn embed(&self, g: &mut Graph<'_>, tokens: &TokenSequence) -> Result<Var> {
        if let Some(&bad) = tokens.ids().iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Lookup {
                id: bad,
                limit: self.vocab_size,
            });
        }
        let table = g.param(self.id);
        g.gather(table, tokens.ids())
    }
}

/// Learned absolute position vectors `[max_len x d]`.
#[derive(Clone, Debug)]
pub struct PositionTable {
    pub id: ParamId,
    pub max_len: usize,
    pub dim: usize,
}

impl PositionTable {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        max_len: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let id = store.insert_uniform(name, &[max_len, dim], 0.1, rng)?;
        Ok(Self { id, max_len, dim })
    }

    /// `q_i + p_i` for every position of the `[n x d]` sequence.
    pub fn add_position_encodings(&self, g: &mut Graph<'_>, seq: Var) -> Result<Var> {
        let n = g.value(seq).dims2().0;
        if n > self.max_len {
            return Err(Error::Length {
                len: n,
                max: self.max_len,
            });
        }
        let table = g.param(self.id);
        let p = g.slice_rows(table, 0, n)?;
        g.add(seq, p)
    }
}
