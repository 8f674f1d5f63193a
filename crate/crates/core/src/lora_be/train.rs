use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{BlockEmbeddings, LoraAdapters};
use super::augment::augment_background;
use super::clip::ReferenceClip;
use super::loss::{latent_masks, localization_loss_graph};
use crate::denoiser::{concat_condition, latent_encode, latent_encode_frame, DenoiserWeights, GraphModel, Vocab};
use crate::diffcore::{GradMap, Graph, ParamSet, Tensor, Var};
use crate::diffusion::{forward_noise, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

/// Name of the block-embedding table inside a combined parameter set.
pub const EMBEDDINGS_PARAM: &str = "subject.embeddings";

/// Fine-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_loc: f64,
    pub augment_prob: f64,
    pub seed: u64,
    pub rank: usize,
    pub lora_scale: f64,
    /// Word whose embedding initialises every block embedding.
    pub donor: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 400,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_loc: 1.0,
            augment_prob: 0.5,
            seed: 0,
            rank: 4,
            lora_scale: 1.0,
            donor: "character".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.beta1, self.beta2, self.adam_eps, self.lora_scale];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.epochs == 0 || self.rank == 0 {
            return Err(Error::invalid("learning rate, Adam constants, scale, epochs and rank must be positive"));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::invalid("Adam betas must be below 1"));
        }
        if !(self.lambda_loc.is_finite() && self.lambda_loc >= 0.0) {
            return Err(Error::invalid("lambda_loc must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::invalid("augment_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// The trainable customization: LoRA factors plus block embeddings, tied to
/// the base model through its config hash.
#[derive(Clone, Debug, PartialEq)]
pub struct Customization {
    pub adapters: LoraAdapters,
    pub embeds: BlockEmbeddings,
    pub config_hash: String,
}

impl Customization {
    /// Fresh adapters (`B = 0`) and donor-initialised embeddings.
    pub fn init(weights: &DenoiserWeights, cfg: &TrainConfig) -> Result<Self> {
        let vocab = Vocab::builtin();
        let donor = vocab
            .id(&cfg.donor)
            .ok_or_else(|| Error::UnknownToken(cfg.donor.clone()))?;
        Ok(Self {
            adapters: LoraAdapters::attach(weights, cfg.rank, cfg.lora_scale, cfg.seed)?,
            embeds: BlockEmbeddings::from_donor(weights, donor, vocab.placeholder_id())?,
            config_hash: weights.config.hash(),
        })
    }

    /// Adapter factors and the embedding table as one trainable parameter set.
    pub fn to_params(&self) -> ParamSet {
        let mut p = self.adapters.params().clone();
        p.insert(EMBEDDINGS_PARAM, self.embeds.table().clone(), true)
            .expect("embedding name is distinct from adapter names");
        p
    }

    /// Inverse of [`Customization::to_params`].
    pub fn with_params(&self, params: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        for name in self.adapters.params().names() {
            out.adapters.params_mut().set(name, params.require(name)?.clone())?;
        }
        let table = params.require(EMBEDDINGS_PARAM)?;
        if table.shape() != self.embeds.table().shape() {
            return Err(Error::shape("embeddings", format!("{:?}", self.embeds.table().shape()), format!("{:?}", table.shape())));
        }
        *out.embeds.table_mut() = table.clone();
        Ok(out)
    }

    /// Rounds every value to `f32`, the checkpoint precision.
    pub fn quantize(&mut self) {
        let q = self.adapters.params().map_tensors(Tensor::quantized_f32);
        *self.adapters.params_mut() = q;
        *self.embeds.table_mut() = self.embeds.table().quantized_f32();
    }
}

/// One noised training example drawn from a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// Clean latent video `[F, C, h, w]`.
    pub z0: Tensor,
    /// First-frame latent `[C, h, w]` used as the condition.
    pub cond: Tensor,
    pub tokens: Vec<usize>,
    pub t: usize,
    pub eps: Tensor,
    /// Latent masks `[F][h·w]`.
    pub masks: Vec<Vec<bool>>,
}

impl TrainSample {
    /// Draws `t ~ U[1, T]` and `ε ~ N(0, I)` for `clip`.
    pub fn draw<R: Rng + ?Sized>(clip: &ReferenceClip, sched: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        let z0 = latent_encode(&clip.frames)?;
        let cond = latent_encode_frame(&clip.frames[0])?;
        let tokens = Vocab::builtin().tokenize(&clip.prompt)?;
        let t = rng.random_range(1..=sched.steps());
        let eps = standard_normal(z0.shape(), rng);
        Ok(Self {
            z0,
            cond,
            tokens,
            t,
            eps,
            masks: latent_masks(&clip.masks)?,
        })
    }
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ldm: f64,
    /// `None` when the prompt has no subject placeholder.
    pub loc: Option<f64>,
    pub skipped_frames: usize,
}

pub(crate) struct Objective {
    pub total: Var,
    pub ldm: Var,
    pub loc: Option<Var>,
    pub skipped_frames: usize,
}

/// Builds `ldm_loss + λ·L_loc` on `g`. The localization term is present
/// whenever the sample's prompt holds the placeholder and `embeds` is given.
pub(crate) fn objective(
    g: &mut Graph,
    model: &GraphModel<'_>,
    sample: &TrainSample,
    embeds: Option<(Var, usize)>,
    sched: &NoiseSchedule,
    lambda_loc: f64,
) -> Result<Objective> {
    let z_t = forward_noise(&sample.z0, sample.t, &sample.eps, sched)?;
    let z_in = g.constant(concat_condition(&z_t, &sample.cond)?);
    let mut text = Vec::with_capacity(model.config.n_blocks);
    let mut subject = None;
    for k in 0..model.config.n_blocks {
        let (v, s) = model.text(g, &sample.tokens, k, embeds)?;
        text.push(v);
        subject = s;
    }
    let subject = subject.filter(|_| embeds.is_some());
    let cond = g.constant(sample.cond.clone());
    let image = model.image(g, cond)?;
    let (eps_hat, maps) = model.eps(g, z_in, &text, image, sample.t, subject)?;
    let target = g.constant(sample.eps.clone());
    let diff = g.sub(eps_hat, target)?;
    let sq = g.mul(diff, diff)?;
    let ldm = g.mean_all(sq);
    if maps.is_empty() {
        return Ok(Objective {
            total: ldm,
            ldm,
            loc: None,
            skipped_frames: 0,
        });
    }
    let (loc, skipped_frames) = localization_loss_graph(g, &maps, &sample.masks)?;
    let total = if lambda_loc == 0.0 {
        ldm
    } else {
        let weighted = g.scale(loc, lambda_loc);
        g.add(ldm, weighted)?
    };
    Ok(Objective {
        total,
        ldm,
        loc: Some(loc),
        skipped_frames,
    })
}

/// Loss and gradients with respect to the adapter factors and the
/// embedding table (keyed as in [`Customization::to_params`]). Base weights
/// enter the graph as non-differentiable leaves.
pub fn loss_and_grads(
    weights: &DenoiserWeights,
    custom: &Customization,
    sample: &TrainSample,
    sched: &NoiseSchedule,
    lambda_loc: f64,
) -> Result<(LossParts, GradMap)> {
    let mut g = Graph::new();
    let model = GraphModel::new(&mut g, weights, false, Some(&custom.adapters), true);
    let e = g.param(custom.embeds.table().clone());
    let obj = objective(&mut g, &model, sample, Some((e, custom.embeds.placeholder_id())), sched, lambda_loc)?;
    let mut grads = g.backward(obj.total)?;
    let mut out = GradMap::new();
    let (lora, _) = model.lora.as_ref().expect("adapters bound");
    for (name, var) in lora.iter() {
        let grad = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(g.value(var).shape()));
        out.insert(name.to_string(), grad);
    }
    let ge = grads
        .take(e)
        .unwrap_or_else(|| Tensor::zeros(custom.embeds.table().shape()));
    out.insert(EMBEDDINGS_PARAM.to_string(), ge);
    let parts = LossParts {
        total: g.value(obj.total).item(),
        ldm: g.value(obj.ldm).item(),
        loc: obj.loc.map(|v| g.value(v).item()),
        skipped_frames: obj.skipped_frames,
    };
    Ok((parts, out))
}

/// The loss of [`loss_and_grads`] without the backward pass.
pub fn loss_value(
    weights: &DenoiserWeights,
    custom: &Customization,
    sample: &TrainSample,
    sched: &NoiseSchedule,
    lambda_loc: f64,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let model = GraphModel::new(&mut g, weights, false, Some(&custom.adapters), true);
    let e = g.param(custom.embeds.table().clone());
    let obj = objective(&mut g, &model, sample, Some((e, custom.embeds.placeholder_id())), sched, lambda_loc)?;
    Ok(LossParts {
        total: g.value(obj.total).item(),
        ldm: g.value(obj.ldm).item(),
        loc: obj.loc.map(|v| g.value(v).item()),
        skipped_frames: obj.skipped_frames,
    })
}

/// One optimisation step on `clip`: optional background augmentation, a
/// fresh `(t, ε)` draw, and an Adam update of adapters and embeddings only.
pub fn train_step<R: Rng + ?Sized>(
    clip: &ReferenceClip,
    weights: &DenoiserWeights,
    custom: &mut Customization,
    opt: &mut Adam,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossParts> {
    let augmented;
    let clip = if cfg.augment_prob > 0.0 && rng.random::<f64>() < cfg.augment_prob {
        augmented = augment_background(clip, rng);
        &augmented
    } else {
        clip
    };
    let sample = TrainSample::draw(clip, sched, rng)?;
    let (parts, grads) = loss_and_grads(weights, custom, &sample, sched, cfg.lambda_loc)?;
    opt.begin_step();
    let names: Vec<String> = custom.adapters.params().names().map(str::to_string).collect();
    for name in &names {
        let param = custom.adapters.params_mut().get_mut(name).expect("adapter name");
        opt.update(name, param, &grads[name.as_str()])?;
    }
    opt.update(EMBEDDINGS_PARAM, custom.embeds.table_mut(), &grads[EMBEDDINGS_PARAM])?;
    Ok(parts)
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub loss: f64,
    pub ldm: f64,
    pub loc: Option<f64>,
}

/// Fine-tunes a fresh customization on `clips` for `cfg.epochs` epochs, each
/// a seeded shuffled pass with one step per clip. `on_epoch` receives the
/// per-epoch telemetry. The result is rounded to checkpoint precision.
pub fn fine_tune(
    clips: &[ReferenceClip],
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochTelemetry),
) -> Result<(Customization, Vec<EpochTelemetry>)> {
    if clips.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one reference clip"));
    }
    cfg.validate()?;
    let vocab = Vocab::builtin();
    for clip in clips {
        clip.validate(weights.config.frames, &vocab)?;
    }
    let mut custom = Customization::init(weights, cfg)?;
    let mut opt = Adam::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut telemetry = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut ldm, mut loc, mut n_loc) = (0.0, 0.0, 0.0, 0usize);
        for &i in &order {
            let p = train_step(&clips[i], weights, &mut custom, &mut opt, sched, cfg, &mut rng)?;
            loss += p.total;
            ldm += p.ldm;
            if let Some(l) = p.loc {
                loc += l;
                n_loc += 1;
            }
        }
        let n = order.len() as f64;
        let t = EpochTelemetry {
            epoch,
            loss: loss / n,
            ldm: ldm / n,
            loc: (n_loc > 0).then(|| loc / n_loc as f64),
        };
        tracing::debug!(epoch, loss = t.loss, ldm = t.ldm, loc = ?t.loc, "fine-tune epoch");
        on_epoch(&t);
        telemetry.push(t);
    }
    custom.quantize();
    Ok((custom, telemetry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::diffcore::{finite_diff_check, GradCheckOptions};
    use crate::diffusion::make_schedule;
    use crate::storyboard::{family_sprite, parse_scene, reference_clip};

    fn setup() -> (DenoiserWeights, NoiseSchedule, ReferenceClip) {
        let cfg = DenoiserConfig {
            timesteps: 20,
            ..DenoiserConfig::tiny()
        };
        let w = DenoiserWeights::init(&cfg, 3).unwrap();
        let sched = make_schedule(20, 1e-3, 0.2).unwrap();
        let spec = parse_scene("shot { bg: gradient(#102040,#60a0c0,vertical); subj: <subject> at (14,16) size 14; act: move_right speed 1 }").unwrap();
        let clip = reference_clip(&spec, &family_sprite(2), cfg.frames).unwrap();
        (w, sched, clip)
    }

    #[test]
    fn frozen_base_and_only_trainables_move() {
        let (w, sched, clip) = setup();
        let before = w.checksum();
        let cfg = TrainConfig { lr: 1e-2, ..Default::default() };
        let mut c = Customization::init(&w, &cfg).unwrap();
        let c0 = c.clone();
        let mut opt = Adam::new(cfg.adam());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..3 {
            let p = train_step(&clip, &w, &mut c, &mut opt, &sched, &cfg, &mut rng).unwrap();
            assert!(p.total.is_finite());
            assert!(p.loc.unwrap() <= 0.0 && p.loc.unwrap() >= -1.0);
        }
        assert_eq!(w.checksum(), before);
        assert_ne!(c.adapters, c0.adapters);
        assert_ne!(c.embeds, c0.embeds);
    }

    #[test]
    fn zero_lambda_is_plain_ldm() {
        let (w, sched, clip) = setup();
        let c = Customization::init(&w, &TrainConfig::default()).unwrap();
        let s = TrainSample::draw(&clip, &sched, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (p, _) = loss_and_grads(&w, &c, &s, &sched, 0.0).unwrap();
        assert_eq!(p.total, p.ldm);
        let (p1, _) = loss_and_grads(&w, &c, &s, &sched, 1.0).unwrap();
        assert_eq!(p1.ldm, p.ldm);
        assert_eq!(p1.total, p.ldm + p1.loc.unwrap());
    }

    #[test]
    fn gradients_match_finite_differences_on_a_subsample() {
        let (w, sched, clip) = setup();
        let mut c = Customization::init(&w, &TrainConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let randomized = c.adapters.params().map_tensors(|t| Tensor::randn(t.shape(), 0.3, &mut rng));
        *c.adapters.params_mut() = randomized;
        let s = TrainSample::draw(&clip, &sched, &mut rng).unwrap();
        let params = c.to_params();
        let report = finite_diff_check(
            |p| loss_and_grads(&w, &c.with_params(p)?, &s, &sched, 1.0).map(|(l, g)| (l.total, g)),
            &params,
            &GradCheckOptions {
                subsample: Some(40),
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn fine_tune_is_deterministic_and_rejects_empty_input() {
        let (w, sched, clip) = setup();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 9,
            ..Default::default()
        };
        let (a, ta) = fine_tune(&[clip.clone(), clip.clone()], &w, &sched, &cfg, |_| {}).unwrap();
        let (b, tb) = fine_tune(&[clip.clone(), clip], &w, &sched, &cfg, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 2);
        assert!(fine_tune(&[], &w, &sched, &cfg, |_| {}).is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda_loc: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { augment_prob: 1.5, ..Default::default() }.validate().is_err());
        let json = r#"{"lr": 0.001, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }
}
