//! Semantic-aware adversarial fine-tuning for a dual-encoder image-text
//! model, end to end and fully deterministic: a tensor substrate with a
//! finite-difference gradient oracle, a small trainable image encoder paired
//! with a frozen hashed n-gram text embedder, per-class description
//! generation with relevance-based semantic filtering, ℓ∞ PGD attacks driven
//! by template or description-ensemble dissimilarity, bi-level adversarial
//! fine-tuning, and an evaluation suite covering zero-shot accuracy, the
//! clean-vs-adversarial similarity diagonal, and image-text retrieval.
//!
//! The text side is a deliberate stand-in: instead of a pretrained text
//! encoder, [`text::TextEmbedder`] hashes character n-grams, so "semantic
//! relatedness" here means lexical overlap. That keeps every pipeline stage
//! reproducible bit-for-bit while exercising the same description-filtering
//! and ensemble-attack machinery a full-scale system would use.

pub mod attack;
pub mod bank;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Result, SaftError};
