use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Pixel side length of every frame.
pub const IMAGE_SIZE: usize = 32;
/// Side length of the square patch folded into one latent position.
pub const PATCH: usize = 4;
pub const PIXEL_CHANNELS: usize = 3;
/// Latent grid side (`IMAGE_SIZE / PATCH`).
pub const LATENT_SIDE: usize = IMAGE_SIZE / PATCH;
/// Latent channels (`PATCH² · 3`).
pub const LATENT_CHANNELS: usize = PATCH * PATCH * PIXEL_CHANNELS;

/// Geometry and capacity of the toy video denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Frames per clip.
    pub frames: usize,
    pub d_model: usize,
    /// Number of attention blocks; each owns one cross-attention module.
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Diffusion steps the timestep embedding is defined over.
    pub timesteps: usize,
    pub max_text_len: usize,
    /// Hidden width of the per-block MLP as a multiple of `d_model`.
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            d_model: 64,
            n_blocks: 4,
            n_heads: 4,
            timesteps: 200,
            max_text_len: 16,
            mlp_ratio: 2,
        }
    }
}

impl DenoiserConfig {
    /// Small configuration used for gradient checks: 4 frames, `d_model` 16, two blocks.
    pub fn tiny() -> Self {
        Self {
            frames: 4,
            d_model: 16,
            n_blocks: 2,
            n_heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("timesteps", self.timesteps),
            ("max_text_len", self.max_text_len),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("denoiser config: {name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "denoiser config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::invalid("denoiser config: d_model must be even for the timestep embedding"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Latent positions per frame.
    pub fn tokens_per_frame(&self) -> usize {
        LATENT_SIDE * LATENT_SIDE
    }

    /// Shape of a clean or noisy latent clip: `[F, C, h, w]`.
    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE]
    }

    /// Stable SHA-256 of the canonical JSON form, used to tie checkpoints to a model.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
