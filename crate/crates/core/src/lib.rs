//! Selective repair of tiny decoder-only language models via
//! gradient-sensitivity slicing.
//!
//! The crate trains small GPT-style models from scratch on a synthetic
//! character-level task, locates the transformer block most sensitive to a
//! batch of bad demonstrations (L2 norm of the NLL gradient per block), and
//! repairs only that block under an `alpha * NLL + KL` objective. Baselines
//! that update every parameter (with and without the KL term) and ablations
//! (least-sensitive block, fixed pre-selected block) run through the same
//! engine so their costs and outcomes are directly comparable.
//!
//! Module map:
//! - [`autograd`]: reverse-mode tape over dense f32 tensors.
//! - [`model`]: the decoder-only transformer plus its block-indexed
//!   parameter registry and checkpoint format.
//! - [`slicing`]: masked NLL, per-block sensitivity, slice selection,
//!   error-density statistics.
//! - [`repair`]: the repair loop, its baselines and ablations, RMSProp and
//!   the warmup/linear-decay schedule.
//! - [`data`]: synthetic corpus + paired bad/good demonstrations, the
//!   char-level tokenizer, JSONL persistence.
//! - [`eval`]: segment perplexity, toxicity scoring (local lexicon proxy and
//!   a remote HTTP scorer), cross-run comparison tables.
//! - [`accounting`]: closed-form FLOPs, pass counting, peak-memory sampling.
//! - [`pretrain`]: plain language-model training used to produce the base
//!   (contaminated) models that repair runs start from.

pub mod accounting;
pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pretrain;
pub mod repair;
pub mod rng;
pub mod slicing;

pub use error::{Error, Result};
