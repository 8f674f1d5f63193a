//! Attention-only token denoiser.
//!
//! A latent clip `[F, 2C, h, w]` becomes `F·h·w` tokens of width `d_model`.
//! Each block applies, with pre-norm residuals: spatial self-attention within
//! a frame, cross-attention onto `[text ; image]` tokens, temporal attention
//! across frames at a fixed position, and a GELU MLP.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{DenoiserConfig, LATENT_CHANNELS, LATENT_SIDE};
use super::text::Vocab;
use crate::diffcore::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::lora_be::{BlockEmbeddings, LoraAdapters};

const LN_EPS: f64 = 1e-5;

/// Attention kinds inside one block, in evaluation order.
pub const ATTN_KINDS: [&str; 3] = ["self", "cross", "temporal"];
/// Projections inside one attention module.
pub const ATTN_ROLES: [&str; 4] = ["q", "k", "v", "out"];

/// Name of the weight matrix for one attention projection.
pub fn projection_name(block: usize, kind: &str, role: &str) -> String {
    format!("blocks.{block}.{kind}.{role}")
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Frozen base parameters of the denoiser and its text/image encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

impl DenoiserWeights {
    /// Seeded initialization; every entry is marked non-trainable.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let c = LATENT_CHANNELS;
        let hw = config.tokens_per_frame();
        let vocab = Vocab::builtin().len();
        let mut p = ParamSet::new();
        let lin = |d_in: usize| Init::Normal(1.0 / (d_in as f64).sqrt());
        let mut add = |name: String, shape: &[usize], init: Init| -> Result<()> {
            let t = match init {
                Init::Normal(std) => Tensor::randn(shape, std, &mut rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
            };
            p.insert(name, t, false)
        };

        add("tok_emb".into(), &[vocab, d], Init::Normal(1.0))?;
        add("text_pos".into(), &[config.max_text_len, d], Init::Normal(0.1))?;
        add("in_proj.w".into(), &[d, 2 * c], lin(2 * c))?;
        add("in_proj.b".into(), &[d], Init::Zeros)?;
        add("img_proj.w".into(), &[d, c], lin(c))?;
        add("img_proj.b".into(), &[d], Init::Zeros)?;
        add("pos_spatial".into(), &[hw, d], Init::Normal(0.1))?;
        add("pos_frame".into(), &[config.frames, 1, d], Init::Normal(0.1))?;
        add("time_proj.w".into(), &[d, d], lin(d))?;
        add("time_proj.b".into(), &[d], Init::Zeros)?;
        let hidden = d * config.mlp_ratio;
        for k in 0..config.n_blocks {
            for kind in ATTN_KINDS {
                add(format!("blocks.{k}.norm_{kind}.g"), &[d], Init::Ones)?;
                add(format!("blocks.{k}.norm_{kind}.b"), &[d], Init::Zeros)?;
                for role in ATTN_ROLES {
                    add(format!("{}.w", projection_name(k, kind, role)), &[d, d], lin(d))?;
                }
            }
            add(format!("blocks.{k}.norm_mlp.g"), &[d], Init::Ones)?;
            add(format!("blocks.{k}.norm_mlp.b"), &[d], Init::Zeros)?;
            add(format!("blocks.{k}.mlp.fc1.w"), &[hidden, d], lin(d))?;
            add(format!("blocks.{k}.mlp.fc1.b"), &[hidden], Init::Zeros)?;
            add(format!("blocks.{k}.mlp.fc2.w"), &[d, hidden], lin(hidden))?;
            add(format!("blocks.{k}.mlp.fc2.b"), &[d], Init::Zeros)?;
        }
        add("norm_out.g".into(), &[d], Init::Ones)?;
        add("norm_out.b".into(), &[d], Init::Zeros)?;
        add("out_proj.w".into(), &[c, d], lin(d))?;
        add("out_proj.b".into(), &[c], Init::Zeros)?;
        Ok(Self {
            config: config.clone(),
            params: p,
        })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

/// Per-block subject attention maps from one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnTrace {
    /// `D_k` as `[F, h, w]`, one per block.
    pub maps: Vec<Tensor>,
    /// Sequence index of the subject token inside the text.
    pub subject_index: usize,
    /// Number of text keys preceding the image keys in cross-attention.
    pub text_keys: usize,
    pub image_keys: usize,
}

/// Text conditioning for every block plus the placeholder position.
#[derive(Clone, Debug, PartialEq)]
pub struct TextConditioning {
    pub per_block: Vec<Tensor>,
    pub subject_index: Option<usize>,
}

/// Parameters placed on a [`Graph`], by name.
pub(crate) struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Places every entry of `params`; an entry receives gradients iff it is
    /// marked trainable in `params` and `trainable` is set.
    pub fn bind(g: &mut Graph, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, e)| (name.to_string(), g.leaf(e.tensor.clone(), trainable && e.trainable)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Graph-level view of the model: base weights plus optional LoRA factors.
pub(crate) struct GraphModel<'a> {
    pub config: &'a DenoiserConfig,
    pub base: Bound,
    pub lora: Option<(Bound, f64)>,
}

impl<'a> GraphModel<'a> {
    pub fn new(
        g: &mut Graph,
        weights: &'a DenoiserWeights,
        base_trainable: bool,
        adapters: Option<&LoraAdapters>,
        lora_trainable: bool,
    ) -> Self {
        Self {
            config: &weights.config,
            base: Bound::bind(g, &weights.params, base_trainable),
            lora: adapters.map(|a| (Bound::bind(g, a.params(), lora_trainable), a.scale())),
        }
    }

    /// `W·x (+ s·B·(A·x))` for a LoRA-targetable projection.
    fn project(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let y = g.linear(x, self.base.get(&format!("{name}.w"))?, None)?;
        let Some((lora, scale)) = &self.lora else { return Ok(y) };
        let a = lora.get(&format!("{name}.a"))?;
        let b = lora.get(&format!("{name}.b"))?;
        let ax = g.linear(x, a, None)?;
        let bax = g.linear(ax, b, None)?;
        let delta = if *scale == 1.0 { bax } else { g.scale(bax, *scale) };
        g.add(y, delta)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gain = self.base.get(&format!("{name}.g"))?;
        let bias = self.base.get(&format!("{name}.b"))?;
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Token embeddings `[L, d]`; the placeholder row (if any) is replaced by
    /// row `block` of `embeds`.
    pub fn text(&self, g: &mut Graph, tokens: &[usize], block: usize, embeds: Option<(Var, usize)>) -> Result<(Var, Option<usize>)> {
        let subject = subject_position(tokens, embeds.map(|(_, id)| id))?;
        if tokens.len() > self.config.max_text_len {
            return Err(Error::invalid(format!(
                "prompt has {} tokens, limit is {}",
                tokens.len(),
                self.config.max_text_len
            )));
        }
        let table = self.base.get("tok_emb")?;
        let vocab = g.value(table).shape()[0];
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::UnknownToken(format!("token id {bad}")));
        }
        let emb = g.gather_rows(table, tokens)?;
        let pos_idx: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.gather_rows(self.base.get("text_pos")?, &pos_idx)?;
        let mut out = g.add(emb, pos)?;
        if let (Some(i), Some((e, _))) = (subject, embeds) {
            let row = g.gather_rows(e, &[block])?;
            let pos_i = g.gather_rows(pos, &[i])?;
            let row = g.add(row, pos_i)?;
            out = g.replace_row(out, row, i)?;
        }
        Ok((out, subject))
    }

    /// Condition latent `[C, h, w]` to image tokens `[h·w, d]`.
    pub fn image(&self, g: &mut Graph, cond: Var) -> Result<Var> {
        let hw = self.config.tokens_per_frame();
        let flat = g.reshape(cond, &[1, LATENT_CHANNELS, hw])?;
        let tokens = g.permute3(flat, [0, 2, 1])?;
        let tokens = g.reshape(tokens, &[hw, LATENT_CHANNELS])?;
        g.linear(tokens, self.base.get("img_proj.w")?, Some(self.base.get("img_proj.b")?))
    }

    /// Predicts noise `[F, C, h, w]` from `z_in: [F, 2C, h, w]`. Returns the
    /// per-block subject maps when `subject` is given.
    pub fn eps(&self, g: &mut Graph, z_in: Var, text: &[Var], image: Var, t: usize, subject: Option<usize>) -> Result<(Var, Vec<Var>)> {
        let cfg = self.config;
        let (f, d, hw, heads) = (cfg.frames, cfg.d_model, cfg.tokens_per_frame(), cfg.n_heads);
        let shape = g.value(z_in).shape().to_vec();
        if shape != [f, 2 * LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE] {
            return Err(Error::shape(
                "denoise_eps",
                format!("[{f}, {}, {LATENT_SIDE}, {LATENT_SIDE}]", 2 * LATENT_CHANNELS),
                format!("{shape:?}"),
            ));
        }
        if t < 1 || t > cfg.timesteps {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", cfg.timesteps)));
        }
        if text.len() != cfg.n_blocks {
            return Err(Error::invalid(format!(
                "{} text conditionings for {} blocks",
                text.len(),
                cfg.n_blocks
            )));
        }
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

        let flat = g.reshape(z_in, &[f, 2 * LATENT_CHANNELS, hw])?;
        let tok = g.permute3(flat, [0, 2, 1])?;
        let mut x = g.linear(tok, self.base.get("in_proj.w")?, Some(self.base.get("in_proj.b")?))?;
        x = g.add(x, self.base.get("pos_spatial")?)?;
        x = g.add(x, self.base.get("pos_frame")?)?;
        let temb = g.constant(timestep_embedding(t, d));
        let temb = g.linear(temb, self.base.get("time_proj.w")?, Some(self.base.get("time_proj.b")?))?;
        let temb = g.gelu(temb);
        x = g.add(x, temb)?;

        let mut maps = Vec::new();
        for (k, &txt) in text.iter().enumerate() {
            // Spatial self-attention, one group per frame.
            let n = self.norm(g, x, &format!("blocks.{k}.norm_self"))?;
            let a = self.attend(g, n, n, k, "self", heads, scale)?.0;
            x = g.add(x, a)?;

            // Cross-attention: all video tokens against [text ; image].
            let n = self.norm(g, x, &format!("blocks.{k}.norm_cross"))?;
            let n = g.reshape(n, &[1, f * hw, d])?;
            let ctx = g.concat_rows(txt, image)?;
            let m = g.value(ctx).shape()[0];
            let ctx = g.reshape(ctx, &[1, m, d])?;
            let (a, p) = self.attend(g, n, ctx, k, "cross", heads, scale)?;
            if let Some(s) = subject {
                let col = g.select_last(p, s)?;
                let avg = g.mean_axis(col, 1)?;
                maps.push(g.reshape(avg, &[f, LATENT_SIDE, LATENT_SIDE])?);
            }
            let a = g.reshape(a, &[f, hw, d])?;
            x = g.add(x, a)?;

            // Temporal attention, one group per spatial position.
            let n = self.norm(g, x, &format!("blocks.{k}.norm_temporal"))?;
            let n = g.permute3(n, [1, 0, 2])?;
            let a = self.attend(g, n, n, k, "temporal", heads, scale)?.0;
            let a = g.permute3(a, [1, 0, 2])?;
            x = g.add(x, a)?;

            let n = self.norm(g, x, &format!("blocks.{k}.norm_mlp"))?;
            let h = g.linear(n, self.base.get(&format!("blocks.{k}.mlp.fc1.w"))?, Some(self.base.get(&format!("blocks.{k}.mlp.fc1.b"))?))?;
            let h = g.gelu(h);
            let h = g.linear(h, self.base.get(&format!("blocks.{k}.mlp.fc2.w"))?, Some(self.base.get(&format!("blocks.{k}.mlp.fc2.b"))?))?;
            x = g.add(x, h)?;
        }

        let n = self.norm(g, x, "norm_out")?;
        let out = g.linear(n, self.base.get("out_proj.w")?, Some(self.base.get("out_proj.b")?))?;
        let out = g.permute3(out, [0, 2, 1])?;
        let out = g.reshape(out, &[f, LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE])?;
        Ok((out, maps))
    }

    /// Multi-head attention of `queries: [G, nq, d]` onto `context: [G, nk, d]`;
    /// returns the projected output and the attention probabilities `[G, H, nq, nk]`.
    #[allow(clippy::too_many_arguments)]
    fn attend(&self, g: &mut Graph, queries: Var, context: Var, block: usize, kind: &str, heads: usize, scale: f64) -> Result<(Var, Var)> {
        let q = self.project(g, queries, &projection_name(block, kind, "q"))?;
        let k = self.project(g, context, &projection_name(block, kind, "k"))?;
        let v = self.project(g, context, &projection_name(block, kind, "v"))?;
        let s = g.attn_scores(q, k, heads, scale)?;
        let p = g.softmax(s);
        let mixed = g.attn_mix(p, v, heads)?;
        let out = self.project(g, mixed, &projection_name(block, kind, "out"))?;
        Ok((out, p))
    }
}

/// Index of the placeholder in `tokens`; more than one placeholder is rejected.
fn subject_position(tokens: &[usize], placeholder: Option<usize>) -> Result<Option<usize>> {
    let placeholder = placeholder.unwrap_or_else(|| Vocab::builtin().placeholder_id());
    let hits: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == placeholder)
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [] => Ok(None),
        [i] => Ok(Some(*i)),
        _ => Err(Error::invalid(format!("{} subject placeholders in one prompt; at most one is supported", hits.len()))),
    }
}

/// Sinusoidal embedding of step `t`: `[sin(t·ω_i), cos(t·ω_i)]` with
/// `ω_i = 10000^(−i/(d/2))`.
pub fn timestep_embedding(t: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::from_vec(out)
}

/// Text embedding `[L, d]` for one block, plus the placeholder index.
pub fn encode_text(
    weights: &DenoiserWeights,
    tokens: &[usize],
    block: usize,
    injector: Option<&BlockEmbeddings>,
) -> Result<(Tensor, Option<usize>)> {
    if block >= weights.config.n_blocks {
        return Err(Error::invalid(format!("block {block} out of range")));
    }
    let mut g = Graph::new();
    let model = GraphModel::new(&mut g, weights, false, None, false);
    let inj = injector.map(|e| (g.constant(e.table().clone()), e.placeholder_id()));
    let (v, subject) = model.text(&mut g, tokens, block, inj)?;
    Ok((g.value(v).clone(), subject))
}

/// Text embeddings for every block.
pub fn encode_prompt(weights: &DenoiserWeights, tokens: &[usize], injector: Option<&BlockEmbeddings>) -> Result<TextConditioning> {
    let mut per_block = Vec::with_capacity(weights.config.n_blocks);
    let mut subject_index = None;
    for k in 0..weights.config.n_blocks {
        let (t, s) = encode_text(weights, tokens, k, injector)?;
        per_block.push(t);
        subject_index = s;
    }
    Ok(TextConditioning { per_block, subject_index })
}

/// Condition latent frame `[C, h, w]` to image tokens `[h·w, d]`.
pub fn encode_image(weights: &DenoiserWeights, cond: &Tensor) -> Result<Tensor> {
    if cond.shape() != [LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE] {
        return Err(Error::shape(
            "encode_image",
            format!("[{LATENT_CHANNELS}, {LATENT_SIDE}, {LATENT_SIDE}]"),
            format!("{:?}", cond.shape()),
        ));
    }
    let mut g = Graph::new();
    let model = GraphModel::new(&mut g, weights, false, None, false);
    let c = g.constant(cond.clone());
    let v = model.image(&mut g, c)?;
    Ok(g.value(v).clone())
}

/// One denoiser evaluation. With `trace` set the subject maps are extracted;
/// this requires a placeholder in the prompt.
pub fn denoise_eps(
    weights: &DenoiserWeights,
    z_in: &Tensor,
    text: &TextConditioning,
    image_tokens: &Tensor,
    t: usize,
    adapters: Option<&LoraAdapters>,
    trace: bool,
) -> Result<(Tensor, Option<AttnTrace>)> {
    let subject = if trace {
        Some(text
            .subject_index
            .ok_or_else(|| Error::invalid("attention trace requested but the prompt has no subject placeholder"))?)
    } else {
        None
    };
    let mut g = Graph::new();
    let model = GraphModel::new(&mut g, weights, false, adapters, false);
    let z = g.constant(z_in.clone());
    let txt: Vec<Var> = text.per_block.iter().map(|t| g.constant(t.clone())).collect();
    let img = g.constant(image_tokens.clone());
    let (eps, maps) = model.eps(&mut g, z, &txt, img, t, subject)?;
    let trace = subject.map(|s| AttnTrace {
        maps: maps.iter().map(|&m| g.value(m).clone()).collect(),
        subject_index: s,
        text_keys: text.per_block[0].shape()[0],
        image_keys: image_tokens.shape()[0],
    });
    Ok((g.value(eps).clone(), trace))
}

/// Channel concatenation `[z_t ; cond]` with `cond: [C, h, w]` broadcast over frames.
pub fn concat_condition(z_t: &Tensor, cond: &Tensor) -> Result<Tensor> {
    let s = z_t.shape();
    if s.len() != 4 || cond.shape() != &s[1..] {
        return Err(Error::shape(
            "concat_condition",
            format!("condition {:?}", s.get(1..).unwrap_or(&[])),
            format!("{:?}", cond.shape()),
        ));
    }
    let per = cond.len();
    let mut data = Vec::with_capacity(z_t.len() * 2);
    for f in 0..s[0] {
        data.extend_from_slice(&z_t.data()[f * per..(f + 1) * per]);
        data.extend_from_slice(cond.data());
    }
    Tensor::new(vec![s[0], 2 * s[1], s[2], s[3]], data)
}
