//! Toy latent video denoiser and its encoders.
//!
//! * [`latent_encode`] / [`latent_decode`]: exact patch codec between 32×32
//!   RGB frames and `[48, 8, 8]` latents.
//! * [`encode_text`]: word embeddings with an optional per-block subject
//!   embedding injected at the placeholder position.
//! * [`encode_image`]: linear projection of a condition latent to tokens.
//! * [`denoise_eps`]: attention-only ε-predictor exposing per-block
//!   cross-attention maps of the subject token.

mod codec;
mod config;
mod model;
mod text;

pub use codec::{latent_decode, latent_encode, latent_encode_frame};
pub use config::{DenoiserConfig, IMAGE_SIZE, LATENT_CHANNELS, LATENT_SIDE, PATCH, PIXEL_CHANNELS};
pub use model::{
    concat_condition, denoise_eps, encode_image, encode_prompt, encode_text, projection_name, timestep_embedding, AttnTrace,
    DenoiserWeights, TextConditioning, ATTN_KINDS, ATTN_ROLES,
};
#[allow(unused_imports)]
pub(crate) use model::GraphModel;
pub use text::{Vocab, FAMILY_WORDS, PLACEHOLDER};
