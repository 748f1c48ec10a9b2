//! Miniature post-LN Transformer with an optional merge layer after the
//! embedding or after any encoder layer.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Arch, MergeKind, MergeSpec, ModelConfig};
pub use model::{
    argmax, positional_encoding, Batch, DecoderOutput, EncoderOutput, TargetBatch, Transformer,
};
pub use params::{
    Attention, DecoderLayer, EncoderLayer, FeedForward, Linear, ModelParams, Norm, Params,
};
