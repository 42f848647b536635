//! Slow-thinking generative sequential recommender.
//!
//! Items are mapped to short discrete "semantic ID" codes by a residual-quantized
//! autoencoder, user histories become token sequences, and an encoder-decoder
//! transformer is trained in three stages:
//!
//! 1. **Pretraining** on retrieval-augmented targets (tokens of similar items
//!    prepended to the target item's tokens) to stretch the decoder beyond
//!    one-item outputs.
//! 2. **Supervised fine-tuning** on reasoning traces collected by iterative
//!    residual inference, with a four-part objective (sequence likelihood,
//!    preference contrast against a direct-decoding reference, residual
//!    quantization alignment, and a state-target contrastive term).
//! 3. **Group-relative policy optimization** with a five-part reward suite
//!    (format, exact match, similarity, likelihood, ranking).
//!
//! Everything runs on CPU on top of a small reverse-mode autodiff substrate
//! ([`graph`]) that is generic over 32/64-bit precision ([`real::Real`]).

pub mod annotator;
pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod optim;
pub mod pretrain;
pub mod real;
pub mod rl;
pub mod rng;
pub mod sft;
pub mod tensor;
pub mod tokenizer;

pub use real::Real;
pub use tensor::Tensor;
