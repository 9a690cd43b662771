//! Minimal dense numeric kernel: f64 matrices, a deterministic RNG, the
//! forward ops the connector needs, and analytic backward passes for each.

mod attention;
mod matrix;
mod ops;
mod rng;

pub use attention::{
    mh_cross_attention, mh_cross_attention_backward, mh_cross_attention_with_cache,
    AttentionCache, AttentionGrads, AttentionWeights, INIT_STD,
};
pub use matrix::{matmul, matmul_backward, Matrix};
pub use ops::{
    gelu, gelu_backward, gelu_scalar, layer_norm, layer_norm_backward, linear, linear_backward,
    softmax_rows, softmax_rows_backward, LayerNormGrads, LinearGrads,
};
pub use rng::Rng;
