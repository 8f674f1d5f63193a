use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{projection_name, DenoiserWeights, ATTN_KINDS, ATTN_ROLES};
use crate::diffcore::{linear, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of the Gaussian initialisation of every `A` factor.
pub const LORA_A_STD: f64 = 0.01;

/// Low-rank factors for every attention projection of a denoiser.
///
/// Entries are named `{projection}.a` (`[r, d_in]`) and `{projection}.b`
/// (`[d_out, r]`), e.g. `blocks.0.cross.k.a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters {
    rank: usize,
    scale: f64,
    targets: Vec<String>,
    params: ParamSet,
}

impl LoraAdapters {
    /// Attaches rank-`rank` adapters to all q/k/v/out projections of the
    /// self-, cross- and temporal-attention modules of every block. `B` starts
    /// at zero so the adapted model initially equals the base model.
    pub fn attach(weights: &DenoiserWeights, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut targets = Vec::new();
        for block in 0..weights.config.n_blocks {
            for kind in ATTN_KINDS {
                for role in ATTN_ROLES {
                    let name = projection_name(block, kind, role);
                    let w = weights.params.require(&format!("{name}.w"))?;
                    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
                    if rank == 0 || rank > d_in.min(d_out) {
                        return Err(Error::invalid(format!(
                            "LoRA rank {rank} must lie in [1, {}] for '{name}'",
                            d_in.min(d_out)
                        )));
                    }
                    params.insert(format!("{name}.a"), Tensor::randn(&[rank, d_in], LORA_A_STD, &mut rng), true)?;
                    params.insert(format!("{name}.b"), Tensor::zeros(&[d_out, rank]), true)?;
                    targets.push(name);
                }
            }
        }
        Ok(Self { rank, scale, targets, params })
    }

    /// Rebuilds adapters from stored factors, validating names and shapes.
    pub fn from_params(rank: usize, scale: f64, targets: Vec<String>, params: ParamSet) -> Result<Self> {
        if params.len() != targets.len() * 2 {
            return Err(Error::Checkpoint(format!(
                "{} adapter tensors for {} targets",
                params.len(),
                targets.len()
            )));
        }
        for t in &targets {
            let a = params.require(&format!("{t}.a"))?;
            let b = params.require(&format!("{t}.b"))?;
            if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != rank || b.shape()[1] != rank {
                return Err(Error::Checkpoint(format!("adapter '{t}' does not have rank {rank}")));
            }
        }
        Ok(Self { rank, scale, targets, params })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Number of adapted projections (`A`/`B` pairs).
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// `y = W·x + scale·B·(A·x)`.
pub fn lora_apply(x: &Tensor, w: &Tensor, a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let base = linear(x, w, None)?;
    let delta = linear(&linear(x, a, None)?, b, None)?;
    if delta.shape() != base.shape() {
        return Err(Error::shape(
            "lora_apply",
            format!("{:?}", base.shape()),
            format!("{:?}", delta.shape()),
        ));
    }
    base.zip_map(&delta, |y, dy| y + scale * dy)
}

/// One subject-token embedding per cross-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockEmbeddings {
    table: Tensor,
    placeholder_id: usize,
}

impl BlockEmbeddings {
    pub fn new(table: Tensor, placeholder_id: usize) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::shape("BlockEmbeddings", "[K, d_model]", format!("{:?}", table.shape())));
        }
        Ok(Self { table, placeholder_id })
    }

    /// Every row starts as the base embedding of `donor`.
    pub fn from_donor(weights: &DenoiserWeights, donor: usize, placeholder_id: usize) -> Result<Self> {
        let emb = weights.params.require("tok_emb")?;
        if donor >= emb.shape()[0] {
            return Err(Error::UnknownToken(format!("donor token id {donor}")));
        }
        let row = emb.row(donor).to_vec();
        let k = weights.config.n_blocks;
        let data = (0..k).flat_map(|_| row.iter().copied()).collect();
        Self::new(Tensor::new(vec![k, row.len()], data)?, placeholder_id)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }

    pub fn placeholder_id(&self) -> usize {
        self.placeholder_id
    }

    pub fn blocks(&self) -> usize {
        self.table.shape()[0]
    }
}
