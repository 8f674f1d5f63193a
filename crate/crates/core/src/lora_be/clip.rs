use serde::{Deserialize, Serialize};

use crate::denoiser::{Vocab, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

/// A short video of the subject with per-frame masks and a prompt that
/// mentions the subject through the placeholder token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceClip {
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
    pub prompt: String,
}

impl ReferenceClip {
    pub fn new(frames: Vec<Image>, masks: Vec<Mask>, prompt: impl Into<String>) -> Result<Self> {
        let clip = Self {
            frames,
            masks,
            prompt: prompt.into(),
        };
        clip.check_geometry()?;
        Ok(clip)
    }

    /// Frame/mask geometry checks that do not depend on a model config.
    pub fn check_geometry(&self) -> Result<()> {
        if self.frames.is_empty() || self.frames.len() != self.masks.len() {
            return Err(Error::shape(
                "reference clip",
                format!("{} masks (one per frame, >= 1 frame)", self.frames.len()),
                format!("{} masks", self.masks.len()),
            ));
        }
        for (f, (img, mask)) in self.frames.iter().zip(&self.masks).enumerate() {
            if img.width() != IMAGE_SIZE || img.height() != IMAGE_SIZE || mask.width() != IMAGE_SIZE || mask.height() != IMAGE_SIZE {
                return Err(Error::shape(
                    "reference clip frame",
                    format!("{IMAGE_SIZE}x{IMAGE_SIZE}"),
                    format!("frame {f}: {}x{}, mask {}x{}", img.width(), img.height(), mask.width(), mask.height()),
                ));
            }
            if mask.is_empty() {
                return Err(Error::invalid(format!("reference clip mask of frame {f} is empty")));
            }
        }
        Ok(())
    }

    /// Full validation against a frame count and the vocabulary: exactly one placeholder.
    pub fn validate(&self, frames: usize, vocab: &Vocab) -> Result<()> {
        self.check_geometry()?;
        if self.frames.len() != frames {
            return Err(Error::shape("reference clip", format!("{frames} frames"), format!("{} frames", self.frames.len())));
        }
        let tokens = vocab.tokenize(&self.prompt)?;
        let n = tokens.iter().filter(|&&t| t == vocab.placeholder_id()).count();
        if n != 1 {
            return Err(Error::invalid(format!(
                "reference clip prompt must contain exactly one placeholder, found {n}"
            )));
        }
        Ok(())
    }
}
