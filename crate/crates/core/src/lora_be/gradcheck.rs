use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::{loss_and_grads, loss_value, Customization, TrainConfig, TrainSample};
use crate::denoiser::{DenoiserConfig, DenoiserWeights};
use crate::diffcore::{finite_diff_check_with, GradCheckOptions, GradCheckReport, Tensor};
use crate::diffusion::make_schedule;
use crate::error::Result;
use crate::storyboard::{family_sprite, parse_scene, reference_clip};

/// Finite-difference check of the full customization objective (noise
/// prediction plus localization, `λ = 1`) with respect to every LoRA factor
/// and the block-embedding table.
///
/// Adapters start from random nonzero `A` and `B` (a fresh `B = 0` would
/// hide errors in the `A` gradient) and the embeddings from a perturbed
/// donor row. Pass `opts.subsample = None` to check every scalar. A step of
/// `1e-4` balances truncation against round-off in the full-model loss.
pub fn customization_gradcheck(model: &DenoiserConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    model.validate()?;
    let weights = DenoiserWeights::init(model, seed)?;
    let sched = make_schedule(model.timesteps, 1e-4, 0.02)?;
    let spec = parse_scene("shot { bg: gradient(#102040,#60a0c0,vertical); subj: <subject> at (14,16) size 14; act: move_right speed 1 }")?;
    let clip = reference_clip(&spec, &family_sprite(2), model.frames)?;

    let base = Customization::init(&weights, &TrainConfig { seed, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let params = base.to_params().map_tensors(|t| {
        let noise = Tensor::randn(t.shape(), 0.3, &mut rng);
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    });
    let sample = TrainSample::draw(&clip, &sched, &mut rng)?;
    finite_diff_check_with(
        |p| loss_and_grads(&weights, &base.with_params(p)?, &sample, &sched, 1.0).map(|(l, g)| (l.total, g)),
        |p| loss_value(&weights, &base.with_params(p)?, &sample, &sched, 1.0).map(|l| l.total),
        &params,
        opts,
    )
}
