//! Held-out evaluation of a customization against untrained adapters.
//!
//! Each evaluation shot is a seeded ground-truth clip of the subject. The
//! storyboard still is built from its first frame with the subject removed
//! (the clean background plus the true mask) and redrawn, then animated by
//! the model under test and compared with the ground truth.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserWeights, IMAGE_SIZE, PLACEHOLDER};
use crate::diffusion::{sample_shot, NoiseSchedule, SampleOptions, SamplerMode, ShotModel};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::lora_be::{Customization, TrainConfig};
use crate::metrics::{psnr_video, ssim, subject_fidelity, temporal_consistency, MetricReport};
use crate::storyboard::{generate_storyboard, random_scene, render_clip, Protocol, SceneSpec, SubjectProfile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub shots: usize,
    pub seed: u64,
    pub sample_steps: usize,
    pub sampler: SamplerMode,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: 6,
            seed: 0,
            sample_steps: 50,
            sampler: SamplerMode::Ddim,
            min_size: 10,
            max_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<String>,
    pub trained: MetricReport,
    pub untrained: MetricReport,
    /// Mean subject fidelity, trained minus untrained.
    pub fidelity_gain: f64,
}

/// The seeded held-out scenes for an evaluation.
pub fn eval_scenes(cfg: &EvalConfig) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.shots)
        .map(|_| random_scene(&mut rng, "subject", cfg.min_size..=cfg.max_size))
        .collect()
}

fn shot_metrics(video: &[Image], truth: &[Image], masks: &[crate::imaging::Mask], profile: &SubjectProfile) -> Result<IndexMap<String, f64>> {
    let mut m = IndexMap::new();
    m.insert("subject_fidelity".to_string(), subject_fidelity(video, masks, &profile.sprite)?.value);
    m.insert("psnr".to_string(), psnr_video(video, truth)?);
    let mut s = 0.0;
    for (a, b) in video.iter().zip(truth) {
        s += ssim(a, b)?;
    }
    m.insert("ssim".to_string(), s / video.len() as f64);
    if video.len() >= 2 {
        m.insert("temporal_consistency".to_string(), temporal_consistency(video)?);
    }
    Ok(m)
}

/// Samples every evaluation shot with `custom` and with freshly initialised
/// (untrained) adapters under identical seeds.
pub fn evaluate_customization(
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    profile: &SubjectProfile,
    custom: &Customization,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.shots == 0 || cfg.sample_steps == 0 {
        return Err(Error::invalid("evaluation needs at least one shot and one sampling step"));
    }
    let frames = weights.config.frames;
    let specs = eval_scenes(cfg);
    let truth: Vec<_> = specs.iter().map(|s| render_clip(s, Some(&profile.sprite), frames)).collect();
    let given = specs
        .iter()
        .zip(&truth)
        .map(|(s, (_, masks))| (s.background.draw(IMAGE_SIZE), masks[0].clone()))
        .collect();
    let board = generate_storyboard(&specs, profile, &Protocol::GivenBackgrounds(given))?;
    if let Some(f) = board.failures.first() {
        return Err(Error::invalid(format!("evaluation shot {} failed: {}", f.index, f.reason)));
    }
    let untrained = Customization::init(weights, &TrainConfig::default())?;
    let mut rows = [Vec::new(), Vec::new()];
    for shot in &board.shots {
        let (gt, masks) = &truth[shot.index];
        let prompt = shot.spec.prompt(PLACEHOLDER);
        let opts = SampleOptions {
            steps: cfg.sample_steps,
            seed: cfg.seed.wrapping_add(shot.index as u64),
            mode: cfg.sampler,
        };
        for (row, c) in rows.iter_mut().zip([custom, &untrained]) {
            let model = ShotModel {
                weights,
                adapters: Some(&c.adapters),
                embeds: Some(&c.embeds),
            };
            let video: Vec<Image> = sample_shot(model, &shot.image, &prompt, sched, &opts)?
                .iter()
                .map(Image::quantized)
                .collect();
            row.push(shot_metrics(&video, gt, masks, profile)?);
        }
    }
    let [t, u] = rows;
    let trained = MetricReport::from_shots(t)?;
    let untrained = MetricReport::from_shots(u)?;
    let fidelity_gain = trained.aggregate["subject_fidelity"].0 - untrained.aggregate["subject_fidelity"].0;
    Ok(EvalReport {
        scenes: specs.iter().map(SceneSpec::to_dsl).collect(),
        trained,
        untrained,
        fidelity_gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::diffusion::default_schedule;
    use crate::storyboard::family_sprite;

    #[test]
    fn untrained_against_itself_gains_nothing() {
        let w = DenoiserWeights::init(&DenoiserConfig::tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let profile = SubjectProfile::synthesize("kitty", family_sprite(8), 1, w.config.frames, &mut rng).unwrap();
        let custom = Customization::init(&w, &TrainConfig::default()).unwrap();
        let cfg = EvalConfig {
            shots: 2,
            sample_steps: 2,
            ..Default::default()
        };
        let r = evaluate_customization(&w, &default_schedule(), &profile, &custom, &cfg).unwrap();
        assert_eq!(r.fidelity_gain, 0.0);
        assert_eq!(r.trained, r.untrained);
        assert_eq!(r.scenes.len(), 2);
        assert!(r.trained.aggregate.contains_key("psnr"));
    }
}
