//! Linear-β noise schedule, closed-form forward noising, DDPM/DDIM reverse
//! steps and the shot sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    concat_condition, denoise_eps, encode_image, encode_prompt, latent_decode, latent_encode_frame, DenoiserWeights,
    Vocab,
};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::lora_be::{BlockEmbeddings, LoraAdapters};

/// β/α/ᾱ tables. Index `t` runs over `0..=T`; index 0 is the clean state
/// (`ᾱ_0 = 1`, β_0 unused).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β interpolation from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "beta bounds must satisfy 0 < {beta_min} <= {beta_max} < 1"
            )));
        }
        let mut betas = vec![0.0; steps + 1];
        let mut alphas = vec![1.0; steps + 1];
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
            betas[t] = beta_min + (beta_max - beta_min) * frac;
            alphas[t] = 1.0 - betas[t];
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        Ok(Self {
            steps,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// ᾱ_t for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }
}

/// Default schedule: 200 steps, β from 1e-4 to 0.02.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_min, beta_max)
}

pub fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(200, 1e-4, 0.02).expect("default schedule is valid")
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`. `t = 0` returns `z0`.
pub fn forward_noise(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t > sched.steps {
        return Err(Error::invalid(format!("timestep {t} outside [0, {}]", sched.steps)));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::shape("forward_noise", format!("{:?}", z0.shape()), format!("{:?}", eps.shape())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ddpm,
    Ddim,
}

/// Predicted clean latent `ẑ0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_z0(eps_hat: &Tensor, z_t: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_map(eps_hat, |z, e| (z - b * e) / a)
}

/// Reverse step from `t` to `t_prev < t` (strided when `t_prev < t − 1`).
///
/// DDIM is deterministic. DDPM uses the posterior of the (possibly strided)
/// step with `β̃ = 1 − ᾱ_t/ᾱ_prev` and adds `σ·ξ` with
/// `σ² = β̃·(1−ᾱ_prev)/(1−ᾱ_t)`; `noise` must be supplied for DDPM unless σ = 0.
pub fn reverse_step(
    eps_hat: &Tensor,
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("reverse step needs t_prev < t, got {t_prev} >= {t}")));
    }
    if eps_hat.shape() != z_t.shape() {
        return Err(Error::shape("backward_step", format!("{:?}", z_t.shape()), format!("{:?}", eps_hat.shape())));
    }
    let z0 = predict_z0(eps_hat, z_t, t, sched)?;
    let (ab_t, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    match mode {
        SamplerMode::Ddim => {
            let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            z0.zip_map(eps_hat, |z, e| a * z + b * e)
        }
        SamplerMode::Ddpm => {
            let beta = 1.0 - ab_t / ab_prev;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
            let ct = (ab_t / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
            let mean = z0.zip_map(z_t, |a, b| c0 * a + ct * b)?;
            if var == 0.0 {
                return Ok(mean);
            }
            let xi = noise.ok_or_else(|| Error::invalid("ddpm step with nonzero variance needs a noise sample"))?;
            let sigma = var.sqrt();
            mean.zip_map(xi, |m, x| m + sigma * x)
        }
    }
}

/// One unit step `t → t − 1`.
pub fn backward_step<R: Rng + ?Sized>(
    eps_hat: &Tensor,
    z_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::invalid("backward_step needs t >= 1"));
    }
    let noise = match mode {
        SamplerMode::Ddpm if t > 1 => Some(standard_normal(z_t.shape(), rng)),
        _ => None,
    };
    reverse_step(eps_hat, z_t, t, t - 1, sched, mode, noise.as_ref())
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Evenly strided timesteps `T = t_S > … > t_1 ≥ 1` for `steps` sampler steps.
pub fn sampling_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.min(total);
    let mut ts: Vec<usize> = (1..=steps).map(|i| (i * total).div_ceil(steps)).collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// Everything a shot sample depends on besides the storyboard image and prompt.
#[derive(Clone, Copy)]
pub struct ShotModel<'a> {
    pub weights: &'a DenoiserWeights,
    pub adapters: Option<&'a LoraAdapters>,
    pub embeds: Option<&'a BlockEmbeddings>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub steps: usize,
    pub seed: u64,
    pub mode: SamplerMode,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            seed: 0,
            mode: SamplerMode::Ddim,
        }
    }
}

/// Animates one storyboard image: seeded `z_T`, condition latent broadcast over
/// frames and concatenated on channels at every step, decoded to pixels.
pub fn sample_shot(
    model: ShotModel<'_>,
    image: &Image,
    prompt: &str,
    sched: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<Vec<Image>> {
    let cfg = &model.weights.config;
    if sched.steps() != cfg.timesteps {
        return Err(Error::invalid(format!(
            "schedule has {} steps but the denoiser was built for {}",
            sched.steps(),
            cfg.timesteps
        )));
    }
    let cond = latent_encode_frame(image)?;
    let tokens = Vocab::builtin().tokenize(prompt)?;
    let text = encode_prompt(model.weights, &tokens, model.embeds)?;
    let img_tokens = encode_image(model.weights, &cond)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shape = cfg.latent_shape();
    let mut z = standard_normal(&shape, &mut rng);
    let ts = sampling_timesteps(sched.steps(), opts.steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let z_in = concat_condition(&z, &cond)?;
        let (eps, _) = denoise_eps(model.weights, &z_in, &text, &img_tokens, t, model.adapters, false)?;
        let noise = match opts.mode {
            SamplerMode::Ddpm if t_prev > 0 => Some(standard_normal(&shape, &mut rng)),
            _ => None,
        };
        z = reverse_step(&eps, &z, t, t_prev, sched, opts.mode, noise.as_ref())?;
    }
    latent_decode(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn first_alpha_bar_of_long_schedule() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_noise_closed_form() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        let z = forward_noise(&Tensor::scalar(1.0), 1, &Tensor::scalar(1.0), &s).unwrap();
        assert!((z.item() - 2f64.sqrt()).abs() < 1e-12);
        let z0 = Tensor::from_vec(vec![0.3, -2.0]);
        assert_eq!(forward_noise(&z0, 0, &Tensor::from_vec(vec![5.0, 5.0]), &s).unwrap(), z0);
        let zero = forward_noise(&Tensor::zeros(&[2]), 1, &Tensor::from_vec(vec![1.0, -1.0]), &s).unwrap();
        assert!((zero.data()[0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ddpm_first_step_is_deterministic() {
        let s = default_schedule();
        let z = Tensor::from_vec(vec![0.1, 0.2]);
        let e = Tensor::from_vec(vec![-0.5, 0.4]);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = backward_step(&e, &z, 1, &s, SamplerMode::Ddpm, &mut r1).unwrap();
        let b = backward_step(&e, &z, 1, &s, SamplerMode::Ddpm, &mut r2).unwrap();
        assert_eq!(a, b);
        assert!(backward_step(&e, &z, 0, &s, SamplerMode::Ddim, &mut r1).is_err());
        assert!(backward_step(&e, &z, 201, &s, SamplerMode::Ddim, &mut r1).is_err());
    }

    #[test]
    fn strided_timesteps_cover_range() {
        assert_eq!(sampling_timesteps(200, 50).first(), Some(&200));
        assert_eq!(sampling_timesteps(200, 50).last(), Some(&4));
        assert_eq!(sampling_timesteps(200, 50).len(), 50);
        assert_eq!(sampling_timesteps(10, 50), (1..=10).rev().collect::<Vec<_>>());
        assert!(sampling_timesteps(200, 0).is_empty());
    }

    #[test]
    fn marginal_at_t_is_nearly_standard_normal() {
        // The default T=200 schedule ends at ᾱ_T ≈ 0.134, far from 0; the
        // limit property is checked on a schedule long enough to reach it.
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z0 = Tensor::full(&[10_000], 1.5);
        let eps = standard_normal(&[10_000], &mut rng);
        let zt = forward_noise(&z0, 1000, &eps, &s).unwrap();
        let mean = zt.mean();
        let var = zt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ddim_oracle_inverts_any_step(t in 1usize..=200, seed in 0u64..1000) {
            let s = default_schedule();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = standard_normal(&[16], &mut rng);
            let eps = standard_normal(&[16], &mut rng);
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            let back = predict_z0(&eps, &zt, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(z0.data()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn ddim_chain_with_oracle_recovers_z0(t in 1usize..=200, seed in 0u64..1000) {
            let s = default_schedule();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = standard_normal(&[8], &mut rng);
            let eps = standard_normal(&[8], &mut rng);
            let mut z = forward_noise(&z0, t, &eps, &s).unwrap();
            for step in (1..=t).rev() {
                let ab = s.alpha_bar(step);
                let oracle = z.zip_map(&z0, |zt, z0| (zt - ab.sqrt() * z0) / (1.0 - ab).sqrt()).unwrap();
                z = backward_step(&oracle, &z, step, &s, SamplerMode::Ddim, &mut rng).unwrap();
            }
            prop_assert!(z.zip_map(&z0, |a, b| (a - b).abs()).unwrap().max_abs() <= 1e-8);
        }
    }
}
