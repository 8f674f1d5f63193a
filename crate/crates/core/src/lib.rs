pub mod checkpoint;
pub mod denoiser;
pub mod diffcore;
pub mod diffusion;
mod error;
pub mod evaluate;
pub mod imaging;
pub mod lora_be;
pub mod metrics;
pub mod optim;
pub mod orchestrator;
pub mod pretrain;
pub mod storyboard;

pub use error::{Error, Result};
