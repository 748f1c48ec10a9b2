//! Subtoken merging for Transformer models of source code.
//!
//! A BPE tokenizer splits compound identifiers such as `getUserDetails`
//! into several subtokens. This crate collapses each run of subtokens that
//! came from one lexeme back into a single vector inside the model, either
//! by averaging ([`merging::merge_mean`]) or by a learned softmax weighting
//! ([`merging::merge_learnable`]), at a configurable depth of a small
//! encoder-only or encoder-decoder Transformer.
//!
//! Around that core sit the pieces needed to measure the trade-off:
//!
//! * [`tokenizer`] - lexeme-aware BPE that records per-subtoken word ids.
//! * [`grouping`] - vectorized and nested-loop group index computation.
//! * [`autodiff`] - a small tape-based reverse-mode engine over `f64`.
//! * [`transformer`] - the model, with the merge layer insertable at any depth.
//! * [`flops`] - an analytic matmul FLOPs model driven by the length schedule.
//! * [`pareto`] - efficiency frontier and knee-point selection.
//! * [`harness`] - synthetic datasets, training, metrics and sweeps.

pub mod autodiff;
pub mod error;
pub mod flops;
pub mod grouping;
pub mod harness;
pub mod merging;
pub mod pareto;
pub mod tokenizer;
pub mod transformer;

pub use error::{Error, Result};
