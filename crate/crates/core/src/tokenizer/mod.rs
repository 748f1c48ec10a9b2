//! Lexeme-aware BPE tokenization.
//!
//! Every subtoken remembers which lexeme it was cut from, which is the
//! information the merge layer needs to put the pieces back together.

mod bpe;
mod lexer;
mod stats;
mod vocab;

pub use bpe::{decode_tokens, encode, segment_lexeme, train_bpe, TokenizedSequence};
pub use lexer::{pretokenize, Lexeme};
pub use stats::{inflation_stats, InflationReport};
pub use vocab::{Vocab, BOS_ID, CLS_ID, EOS_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS, UNK_ID};
