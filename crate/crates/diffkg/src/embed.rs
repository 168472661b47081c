//! Entity embeddings as concatenations of name-token embeddings.
//!
//! Each entity's name is tokenized; its embedding block is the sequence
//! of token embeddings, zero-padded to the corpus-wide maximum token
//! count `m`. The token index map is the structural half (shared with the
//! differentiable path); the materialized tensor is used by oracles,
//! inspection and tests.

use crate::kg::Vocab;
use crate::text::TokenVocab;
use crate::{Error, Result, Scalar};
use std::sync::Arc;

/// Token indices of every entity name, padded implicitly to `m`.
#[derive(Debug, Clone)]
pub struct EntityTokenMap {
    /// Per entity, the token ids of its normalized name (unpadded).
    pub tokens: Arc<Vec<Vec<u32>>>,
    /// Fixed token length every entity block is padded to.
    pub m: usize,
}

impl EntityTokenMap {
    /// Tokenize every entity name. `m` defaults to the maximum token
    /// count over all entities.
    pub fn build(entities: &Vocab, token_vocab: &TokenVocab, m: Option<usize>) -> Result<Self> {
        let mut tokens = Vec::with_capacity(entities.len());
        let mut max_len = 0usize;
        for i in 0..entities.len() {
            let ids = token_vocab.encode(entities.name(i));
            if ids.is_empty() {
                return Err(Error::BadData(format!("entity {:?} tokenizes to zero tokens", entities.name(i))));
            }
            max_len = max_len.max(ids.len());
            tokens.push(ids);
        }
        let m = match m {
            Some(m) if m >= max_len => m,
            Some(m) => {
                return Err(Error::BadConfig(format!("m={m} smaller than longest entity name ({max_len} tokens)")))
            }
            None => max_len,
        };
        Ok(Self { tokens: Arc::new(tokens), m })
    }

    pub fn n_entities(&self) -> usize {
        self.tokens.len()
    }
}

/// Materialized `N_E x m x d` block of token embeddings, zero-padded.
#[derive(Debug, Clone)]
pub struct EntityEmbeddingTensor<S> {
    data: Vec<S>,
    pub n_entities: usize,
    pub d: usize,
    pub m: usize,
}

impl<S: Scalar> EntityEmbeddingTensor<S> {
    /// Entity block of `m * d` values, token-position major.
    pub fn block(&self, entity: usize) -> &[S] {
        let stride = self.m * self.d;
        &self.data[entity * stride..(entity + 1) * stride]
    }

    /// Embedding of token position `pos` of an entity (zeros if padding).
    pub fn token_vec(&self, entity: usize, pos: usize) -> &[S] {
        let start = (entity * self.m + pos) * self.d;
        &self.data[start..start + self.d]
    }

    /// Mean over the token dimension with fixed divisor `m`.
    pub fn mean_pooled(&self, entity: usize) -> Vec<S> {
        let mut out = vec![S::zero(); self.d];
        for pos in 0..self.m {
            for (o, &v) in out.iter_mut().zip(self.token_vec(entity, pos)) {
                *o += v;
            }
        }
        let inv = S::one() / S::from_f64(self.m as f64);
        for o in out.iter_mut() {
            *o *= inv;
        }
        out
    }
}

/// Materialize the tensor from a token embedding table (`V x d`,
/// row-major).
pub fn build_entity_tensor<S: Scalar>(map: &EntityTokenMap, table: &[S], d: usize) -> EntityEmbeddingTensor<S> {
    let n = map.n_entities();
    let mut data = vec![S::zero(); n * map.m * d];
    for (e, ids) in map.tokens.iter().enumerate() {
        for (pos, &tok) in ids.iter().enumerate() {
            let dst = (e * map.m + pos) * d;
            let src = tok as usize * d;
            data[dst..dst + d].copy_from_slice(&table[src..src + d]);
        }
    }
    EntityEmbeddingTensor { data, n_entities: n, d, m: map.m }
}
