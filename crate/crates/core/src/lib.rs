//! Visual-linguistic causal intervention for radiology report generation.
//!
//! The crate is organised along the pipeline:
//!
//! - [`data`]: annotations, vocabulary, tokenization, image degradation and a
//!   synthetic chest-film corpus for desk-scale runs.
//! - [`nn`]: parameter store, layers, optimizer and checkpoint format on top of
//!   `candle-core`.
//! - [`backbone`]: convolutional stem, embeddings and the multiway
//!   encoder/decoder.
//! - [`vlp`]: prefix language modeling and degradation-aware masked image
//!   modeling.
//! - [`causal`]: attention rollout, visual and linguistic deconfounding and
//!   the parameter-free front-door fusion.
//! - [`scm`]: an exact discrete structural causal model used as ground truth
//!   for the adjustment formulas.
//! - [`metrics`]: BLEU, ROUGE-L, METEOR-lite, CIDEr and clinical efficacy.
//! - [`trainer`]: pre-training, fine-tuning, decoding and evaluation.

pub mod backbone;
pub mod causal;
pub mod data;
mod error;
pub mod metrics;
pub mod nn;
pub mod scm;
pub mod trainer;
pub mod vlp;

pub use error::{Error, Result};
