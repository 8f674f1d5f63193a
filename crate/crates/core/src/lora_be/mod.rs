//! LoRA-BE customization: low-rank adapters on every attention projection,
//! block-wise subject embeddings, the attention localization loss,
//! background augmentation and the fine-tuning loop.

mod adapter;
mod augment;
mod clip;
mod gradcheck;
mod loss;
mod train;

pub use adapter::{lora_apply, BlockEmbeddings, LoraAdapters, LORA_A_STD};
pub use augment::augment_background;
pub use clip::ReferenceClip;
pub use gradcheck::customization_gradcheck;
pub use loss::{downsample_mask, latent_masks, ldm_loss, localization_loss, LocLoss};
pub(crate) use train::objective;
pub use train::{
    fine_tune, loss_and_grads, loss_value, train_step, Customization, EpochTelemetry, LossParts, TrainConfig, TrainSample,
    EMBEDDINGS_PARAM,
};
