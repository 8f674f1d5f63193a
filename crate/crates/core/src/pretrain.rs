//! Pretraining of the toy base denoiser on a procedural sprite family.
//!
//! Every step renders a fresh random scene of one family member, prompted
//! with that member's word (`"a fox bounces on a checker background"`), and
//! takes one Adam step on all base weights against the noise-prediction loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserWeights, GraphModel, FAMILY_WORDS};
use crate::diffcore::{Graph, Tensor};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::lora_be::{objective, ReferenceClip, TrainSample};
use crate::optim::{Adam, AdamConfig};
use crate::storyboard::{family_sprite, random_scene, render_clip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Number of family members, each paired with one of [`FAMILY_WORDS`].
    pub family: usize,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 1e-3,
            seed: 0,
            family: FAMILY_WORDS.len(),
            min_size: 10,
            max_size: 16,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.family == 0 || self.family > FAMILY_WORDS.len() {
            return Err(Error::invalid(format!("family size must lie in [1, {}]", FAMILY_WORDS.len())));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size > 32 {
            return Err(Error::invalid("subject sizes must satisfy 4 <= min <= max <= 32"));
        }
        Ok(())
    }
}

/// A random training clip of family member `index`, prompted with its word.
pub fn family_clip<R: Rng + ?Sized>(index: usize, frames: usize, cfg: &PretrainConfig, rng: &mut R) -> Result<ReferenceClip> {
    let word = FAMILY_WORDS
        .get(index)
        .ok_or_else(|| Error::invalid(format!("no family member {index}")))?;
    let spec = random_scene(rng, word, cfg.min_size..=cfg.max_size);
    let (images, masks) = render_clip(&spec, Some(&family_sprite(index)), frames);
    ReferenceClip::new(images, masks, spec.prompt(word))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainTelemetry {
    pub step: usize,
    pub loss: f64,
}

/// Trains base weights from a seeded initialisation. The result is rounded to
/// `f32` so it survives a checkpoint round trip unchanged.
pub fn pretrain(
    model_cfg: &DenoiserConfig,
    cfg: &PretrainConfig,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(&PretrainTelemetry),
) -> Result<DenoiserWeights> {
    cfg.validate()?;
    if sched.steps() != model_cfg.timesteps {
        return Err(Error::invalid("schedule length differs from the denoiser's timestep count"));
    }
    let mut weights = DenoiserWeights::init(model_cfg, cfg.seed)?;
    weights.params.set_trainable(true);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    for step in 1..=cfg.steps {
        let member = rng.random_range(0..cfg.family);
        let clip = family_clip(member, model_cfg.frames, cfg, &mut rng)?;
        let sample = TrainSample::draw(&clip, sched, &mut rng)?;

        let mut g = Graph::new();
        let model = GraphModel::new(&mut g, &weights, true, None, false);
        let obj = objective(&mut g, &model, &sample, None, sched, 0.0)?;
        let loss = g.value(obj.total).item();
        let mut grads = g.backward(obj.total)?;
        let bound: Vec<(String, _)> = model.base.iter().map(|(n, v)| (n.to_string(), v)).collect();
        opt.begin_step();
        for (name, var) in bound {
            if let Some(grad) = grads.take(var) {
                let param = weights.params.get_mut(&name).expect("bound from these params");
                opt.update(&name, param, &grad)?;
            }
        }
        if !loss.is_finite() {
            return Err(Error::invalid(format!("pretraining diverged at step {step}")));
        }
        on_step(&PretrainTelemetry { step, loss });
    }
    weights.params = weights.params.map_tensors(Tensor::quantized_f32);
    weights.params.set_trainable(false);
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    #[test]
    fn short_pretraining_is_deterministic_and_lowers_loss() {
        let mc = DenoiserConfig {
            timesteps: 20,
            ..DenoiserConfig::tiny()
        };
        let sched = make_schedule(20, 1e-3, 0.2).unwrap();
        let cfg = PretrainConfig {
            steps: 60,
            lr: 3e-3,
            seed: 4,
            ..Default::default()
        };
        let mut losses = Vec::new();
        let a = pretrain(&mc, &cfg, &sched, |t| losses.push(t.loss)).unwrap();
        let b = pretrain(&mc, &cfg, &sched, |_| {}).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.params.iter().all(|(_, e)| !e.trainable));
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[40..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn family_clips_use_family_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = family_clip(2, 4, &PretrainConfig::default(), &mut rng).unwrap();
        assert!(c.prompt.contains(FAMILY_WORDS[2]));
        assert!(family_clip(99, 4, &PretrainConfig::default(), &mut rng).is_err());
    }
}
