//! Frozen text embedder: a deterministic hashed character n-gram model.
//!
//! This stands in for a pretrained text encoder. Semantic relatedness becomes
//! lexical-overlap relatedness: two strings are close when they share
//! character n-grams. The embedder is stateless and bit-reproducible across
//! runs and platforms, which is what lets description embeddings be computed
//! once and stay frozen for the whole pipeline.

use crate::error::{Result, SaftError};
use crate::tensor::{l2_normalize, Tensor};
use serde::{Deserialize, Serialize};

const FNV_PRIME: u64 = 0x100000001b3;

/// Classic FNV-1a offset basis; default first hash seed.
pub const DEFAULT_SEED_A: u64 = 0xcbf29ce484222325;
/// Golden-ratio constant; default second hash seed (bucket signs).
pub const DEFAULT_SEED_B: u64 = 0x9e3779b97f4a7c15;

/// FNV-1a over `bytes`, starting from `seed` instead of the fixed basis.
pub fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = seed;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Deterministic hashed n-gram text embedder mapping strings into the shared
/// d-dimensional space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEmbedder {
    pub embed_dim: usize,
    pub ngram_size: usize,
    pub seed_a: u64,
    pub seed_b: u64,
}

impl TextEmbedder {
    pub fn new(embed_dim: usize, ngram_size: usize) -> Result<Self> {
        if embed_dim == 0 {
            return Err(SaftError::InvalidConfig("embed_dim must be >= 1".into()));
        }
        if ngram_size == 0 {
            return Err(SaftError::InvalidConfig("ngram_size must be >= 1".into()));
        }
        Ok(Self {
            embed_dim,
            ngram_size,
            seed_a: DEFAULT_SEED_A,
            seed_b: DEFAULT_SEED_B,
        })
    }

    /// Hash of the embedder configuration. Stored in bank files so stale
    /// embeddings are rejected on load.
    pub fn config_hash(&self) -> String {
        let repr = format!(
            "{}|{}|{:016x}|{:016x}",
            self.embed_dim, self.ngram_size, self.seed_a, self.seed_b
        );
        format!("{:016x}", fnv1a64(DEFAULT_SEED_A, repr.as_bytes()))
    }

    /// Embed `text`: lowercase, pad with '^'/'$' sentinels, hash every
    /// character n-gram into a signed bucket, then l2-normalize.
    pub fn embed_text(&self, text: &str) -> Result<Tensor> {
        if text.is_empty() {
            return Err(SaftError::DegenerateInput("embed_text on empty text".into()));
        }
        let lowered = text.to_lowercase();
        let padded: Vec<char> = std::iter::once('^')
            .chain(lowered.chars())
            .chain(std::iter::once('$'))
            .collect();
        let mut accum = Tensor::zeros(vec![self.embed_dim]);
        let n = self.ngram_size.min(padded.len());
        for window in padded.windows(n) {
            let gram: String = window.iter().collect();
            let idx = (fnv1a64(self.seed_a, gram.as_bytes()) % self.embed_dim as u64) as usize;
            let sign = if fnv1a64(self.seed_b, gram.as_bytes()) % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            accum.data_mut()[idx] += sign;
        }
        l2_normalize(&accum).map_err(|_| {
            SaftError::DegenerateInput(format!(
                "embed_text accumulated a zero vector for {text:?}"
            ))
        })
    }
}
