//! Reusable neural building blocks on top of the autodiff tape.

mod layers;
mod params;

pub use layers::{
    add_positional, diagonal_bias, diagonal_key, positional_encoding, Conv1d, Conv1dSpec, DecoderLayer,
    Embedding, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerDecoder,
    TransformerEncoder, TransformerSpec, LAYER_NORM_EPS,
};
pub use params::{Ctx, ParamBuilder, ParamId, ParamStore};

/// Slope of the leaky ReLU between stacked convolutions.
pub const CONV_LEAKY_SLOPE: f64 = 0.2;
