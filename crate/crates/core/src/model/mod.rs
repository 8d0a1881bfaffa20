//! Prompt-conditioned segmentation network with a latent-injection path.

pub mod checkpoint;
mod network;
mod params;

pub use network::{
    decode, encode_image, encode_prompt, encoder_call_counts, forward_sample, forward_sample_dropout,
    forward_train, inject_latent, posterior_forward, prior_forward, reset_encoder_call_counts,
    DenseEmbedding, ImageEmbedding, Logits, Sampler, SparseTokens,
};
pub(crate) use network::{build_dropout_objective, build_objective, Graph, Objective};
pub use params::{ModelConfig, ModelParams, Param, ParamGroup};
