//! Binary tensor container shared by base-model and customization checkpoints.
//!
//! Layout: magic `LRBE`, format version (`u32` LE), metadata length (`u32`
//! LE), UTF-8 JSON metadata, then every tensor as little-endian `f32` in
//! directory order. Values must be `f32`-representable for the round trip to
//! be exact; writers quantize first.

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserWeights, Vocab};
use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::lora_be::{BlockEmbeddings, Customization, LoraAdapters, EMBEDDINGS_PARAM};

pub const MAGIC: &[u8; 4] = b"LRBE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckpointKind {
    Base { config: DenoiserConfig },
    Customization { rank: usize, scale: f64, placeholder: String, targets: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub config_hash: String,
    pub content: CheckpointKind,
    pub tensors: Vec<TensorEntry>,
}

fn write_container(config_hash: &str, content: CheckpointKind, params: &ParamSet) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, e) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: e.tensor.shape().to_vec(),
            offset,
            trainable: e.trainable,
        });
        offset += e.tensor.len();
    }
    let meta = serde_json::to_vec(&Metadata {
        config_hash: config_hash.to_string(),
        content,
        tensors,
    })?;
    let mut out = Vec::with_capacity(12 + meta.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, e) in params.iter() {
        for &v in e.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))
}

/// Parses a container into its metadata and tensors.
pub fn read_container(bytes: &[u8]) -> Result<(Metadata, ParamSet)> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = read_u32(bytes, 8)? as usize;
    let meta_bytes = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Checkpoint("truncated metadata".into()))?;
    let meta: Metadata = serde_json::from_slice(meta_bytes).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let payload = &bytes[12 + len..];
    let mut params = ParamSet::new();
    let mut expected = 0;
    for t in &meta.tensors {
        let n: usize = t.shape.iter().product();
        if t.offset != expected {
            return Err(Error::Checkpoint(format!("tensor '{}' at offset {} (expected {expected})", t.name, t.offset)));
        }
        let raw = payload
            .get(t.offset * 4..(t.offset + n) * 4)
            .ok_or_else(|| Error::Checkpoint(format!("payload of '{}' is truncated", t.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?, t.trainable)?;
        expected += n;
    }
    if payload.len() != expected * 4 {
        return Err(Error::Checkpoint(format!("{} trailing payload bytes", payload.len() - expected * 4)));
    }
    Ok((meta, params))
}

/// Serializes base weights (values are rounded to `f32`).
pub fn save_base(weights: &DenoiserWeights) -> Result<Vec<u8>> {
    write_container(
        &weights.config.hash(),
        CheckpointKind::Base {
            config: weights.config.clone(),
        },
        &weights.params,
    )
}

pub fn load_base(bytes: &[u8]) -> Result<DenoiserWeights> {
    let (meta, params) = read_container(bytes)?;
    let CheckpointKind::Base { config } = meta.content else {
        return Err(Error::Checkpoint("not a base-model checkpoint".into()));
    };
    config.validate()?;
    if config.hash() != meta.config_hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    let reference = DenoiserWeights::init(&config, 0)?;
    if reference.params.names().ne(params.names()) {
        return Err(Error::Checkpoint("tensor directory does not match the config".into()));
    }
    for (name, e) in reference.params.iter() {
        if params.require(name)?.shape() != e.tensor.shape() {
            return Err(Error::Checkpoint(format!("tensor '{name}' has the wrong shape")));
        }
    }
    Ok(DenoiserWeights { config, params })
}

/// Serializes a customization (values are rounded to `f32`).
pub fn save_customization(custom: &Customization) -> Result<Vec<u8>> {
    let vocab = Vocab::builtin();
    let placeholder = vocab
        .word(custom.embeds.placeholder_id())
        .ok_or_else(|| Error::invalid("placeholder id outside the vocabulary"))?;
    write_container(
        &custom.config_hash,
        CheckpointKind::Customization {
            rank: custom.adapters.rank(),
            scale: custom.adapters.scale(),
            placeholder: placeholder.to_string(),
            targets: custom.adapters.targets().to_vec(),
        },
        &custom.to_params(),
    )
}

pub fn load_customization(bytes: &[u8]) -> Result<Customization> {
    let (meta, params) = read_container(bytes)?;
    let CheckpointKind::Customization {
        rank,
        scale,
        placeholder,
        targets,
    } = meta.content
    else {
        return Err(Error::Checkpoint("not a customization checkpoint".into()));
    };
    let placeholder_id = Vocab::builtin()
        .id(&placeholder)
        .ok_or_else(|| Error::Checkpoint(format!("unknown placeholder '{placeholder}'")))?;
    let mut lora = ParamSet::new();
    let mut table = None;
    for (name, e) in params.iter() {
        if name == EMBEDDINGS_PARAM {
            table = Some(e.tensor.clone());
        } else {
            lora.insert(name, e.tensor.clone(), true)?;
        }
    }
    let table = table.ok_or_else(|| Error::Checkpoint("missing block embeddings".into()))?;
    Ok(Customization {
        adapters: LoraAdapters::from_params(rank, scale, targets, lora)?,
        embeds: BlockEmbeddings::new(table, placeholder_id)?,
        config_hash: meta.config_hash,
    })
}

/// Loads a customization and checks it belongs to `weights`.
pub fn load_customization_for(bytes: &[u8], weights: &DenoiserWeights) -> Result<Customization> {
    let c = load_customization(bytes)?;
    if c.config_hash != weights.config.hash() {
        return Err(Error::Checkpoint("customization was trained for a different base config".into()));
    }
    Ok(c)
}
