//! Blended two-branch execution of attention blocks: one branch sees the soft
//! prompt through offset weights, the other the hardened prompt through the
//! original weights, and the outputs are mixed with `alpha_blend`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Conditioning, DenoiserModel};
use crate::error::{Error, Result};
use crate::lora::LoraOffsetSet;
use crate::token_space::{harden_prompt, hard_condition, soft_condition, ConceptEmbedding, Prompt, TokenDictionary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendConfig {
    pub alpha_blend: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { alpha_blend: 0.25 }
    }
}

impl BlendConfig {
    pub fn new(alpha_blend: f64) -> Result<Self> {
        let c = Self { alpha_blend };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_blend) {
            return Err(Error::config(format!("alpha_blend {} outside [0, 1]", self.alpha_blend)));
        }
        Ok(())
    }
}

/// A block whose behaviour depends on a conditioning sequence and, through
/// its projections, on optional low-rank offsets.
pub trait ConditionedBlock {
    fn forward(&self, f: &Tensor, cond: &Tensor, offsets: Option<&LoraOffsetSet>) -> Result<Tensor>;
}

/// `α · block(f, C, W+ΔW) + (1−α) · block(f, C_h, W)`. The limits `α ∈ {0, 1}`
/// return the corresponding branch unchanged (and skip the other).
pub fn blended_block(
    f: &Tensor,
    soft: &Tensor,
    hard: &Tensor,
    block: &dyn ConditionedBlock,
    offsets: Option<&LoraOffsetSet>,
    cfg: BlendConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let len = |c: &Tensor| c.dim(c.rank().saturating_sub(2));
    if soft.rank() != hard.rank() || len(soft)? != len(hard)? {
        return Err(Error::invalid(format!(
            "soft {:?} and hard {:?} conditioning differ in length",
            soft.dims(),
            hard.dims()
        )));
    }
    let a = cfg.alpha_blend;
    if a == 1.0 {
        return block.forward(f, soft, offsets);
    }
    if a == 0.0 {
        return block.forward(f, hard, None);
    }
    let adapted = block.forward(f, soft, offsets)?;
    let original = block.forward(f, &hard.to_dtype(soft.dtype())?, None)?;
    Ok(adapted.affine(a, 0.0)?.add(&original.affine(1.0 - a, 0.0)?)?)
}

/// The soft (`C`) and hard (`C_h`) conditioning for a batch of concept prompts,
/// one `v_star` row per prompt. `C` is differentiable in `v_star`; `C_h` is not.
pub fn dual_conditions(prompts: &[Prompt], v_star: &Tensor, dict: &TokenDictionary) -> Result<(Tensor, Tensor)> {
    let rows = v_star.detach().to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?;
    let hardened = prompts
        .iter()
        .zip(rows)
        .map(|(p, v)| harden_prompt(p, &ConceptEmbedding(v), dict))
        .collect::<Result<Vec<_>>>()?;
    Ok((soft_condition(prompts, v_star, dict)?, hard_condition(&hardened, dict)?))
}

/// Denoiser forward in which every attention block runs [`blended_block`].
#[allow(clippy::too_many_arguments)]
pub fn dual_forward(
    model: &DenoiserModel,
    z_t: &Tensor,
    t: &[usize],
    prompts: &[Prompt],
    v_star: &Tensor,
    offsets: Option<&LoraOffsetSet>,
    dict: &TokenDictionary,
    cfg: BlendConfig,
) -> Result<Tensor> {
    if let Some(p) = prompts.iter().find(|p| p.placeholder().is_none()) {
        return Err(Error::invalid(format!("prompt '{}' has no placeholder", p.render(dict))));
    }
    let (soft, hard) = dual_conditions(prompts, v_star, dict)?;
    model.forward(
        z_t,
        t,
        Conditioning::Dual {
            soft: &soft,
            hard: &hard,
            offsets,
            blend: cfg,
        },
    )
}
