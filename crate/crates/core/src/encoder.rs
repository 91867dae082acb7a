//! The tuning encoder: image-backbone features of the concept image and
//! denoiser bottleneck features of the current noisy generation go through a
//! shared convolutional trunk into two heads — one predicting the concept
//! embedding, one predicting a low-rank offset for every attention projection.
//! The layers producing `B` start at zero, so a fresh encoder predicts `ΔW = 0`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::ImageBackbone;
use crate::checkpoint::Checkpoint;
use crate::denoiser::DenoiserModel;
use crate::dual_path::{dual_forward, BlendConfig};
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, LoraOffset, LoraOffsetSet, ProjectionSpec};
use crate::nn::{conv2d, init_conv, init_linear, linear, ParamTable, Rng};
use crate::token_space::{ConceptEmbedding, Prompt, TokenDictionary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Side of the common feature grid both sources are resampled to.
    pub grid: usize,
    pub trunk_width: usize,
    pub lora: LoraConfig,
    /// Standard deviation of the `A`-head weights.
    pub a_init_std: f64,
    /// Refinement iterations used at inference.
    pub refine_steps: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            trunk_width: 128,
            lora: LoraConfig::default(),
            a_init_std: 0.02,
            refine_steps: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.trunk_width == 0 || self.refine_steps == 0 {
            return Err(Error::config("encoder grid, trunk_width and refine_steps must be positive"));
        }
        if self.lora.rank == 0 || !(self.lora.alpha > 0.0) {
            return Err(Error::config("lora rank and alpha must be positive"));
        }
        Ok(())
    }
}

/// The frozen models the encoder reads from.
#[derive(Clone, Copy)]
pub struct FrozenModels<'a> {
    pub backbone: &'a ImageBackbone,
    pub denoiser: &'a DenoiserModel,
    pub dict: &'a TokenDictionary,
}

#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub image_features: Tensor,
    pub denoiser_features: Tensor,
}

impl FeatureBundle {
    /// Channel concatenation, image features first.
    pub fn stacked(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.image_features, &self.denoiser_features], 1)?)
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.image_features.dim(1)? + self.denoiser_features.dim(1)?)
    }
}

/// Batched encoder prediction: `v_star` is `B × d`, offsets carry batch `B`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub v_star: Tensor,
    pub offsets: LoraOffsetSet,
}

impl EncoderOutput {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.v_star.dim(0)?)
    }

    /// Sample `i` with 2-D offsets.
    pub fn select(&self, i: usize) -> Result<(ConceptEmbedding, LoraOffsetSet)> {
        Ok((ConceptEmbedding::from_tensor(&self.v_star.get(i)?)?, self.offsets.select(i)?))
    }

    pub fn detach(&self) -> Self {
        Self {
            v_star: self.v_star.detach(),
            offsets: self.offsets.detach(),
        }
    }
}

/// Interpolation matrix `out × n` with aligned corners.
fn bilinear_matrix(n: usize, out: usize) -> Vec<f32> {
    let mut m = vec![0f32; out * n];
    for p in 0..out {
        let src = if out == 1 {
            (n - 1) as f64 / 2.0
        } else {
            p as f64 * (n - 1) as f64 / (out - 1) as f64
        };
        let lo = (src.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = src - lo as f64;
        m[p * n + lo] += (1.0 - frac) as f32;
        if hi != lo {
            m[p * n + hi] += frac as f32;
        }
    }
    m
}

/// Bilinear resampling of `B × C × H × W` to `B × C × out × out` (aligned
/// corners), computed as `R_h · X · R_wᵀ`.
pub fn resample_bilinear(x: &Tensor, out: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if out == 0 {
        return Err(Error::invalid("resample target must be positive"));
    }
    if h == out && w == out {
        return Ok(x.clone());
    }
    let rh = Tensor::from_vec(bilinear_matrix(h, out), (out, h), &Device::Cpu)?.to_dtype(x.dtype())?;
    let rw = Tensor::from_vec(bilinear_matrix(w, out), (out, w), &Device::Cpu)?.to_dtype(x.dtype())?;
    let rows = rh.broadcast_matmul(&x.contiguous()?)?;
    Ok(rows.broadcast_matmul(&rw.t()?.contiguous()?)?)
}

/// Frozen features of `images` (`B × 3 × S × S`) and of the noisy batch `z_t`.
pub fn extract_features(
    images: &Tensor,
    z_t: &Tensor,
    t: &[usize],
    frozen: FrozenModels<'_>,
    grid: usize,
) -> Result<FeatureBundle> {
    if images.dims() != z_t.dims() {
        return Err(Error::invalid(format!(
            "concept images {:?} and noisy batch {:?} differ in shape",
            images.dims(),
            z_t.dims()
        )));
    }
    let image_features = frozen.backbone.features(images)?.detach();
    let denoiser_features = frozen.denoiser.encoder_features(z_t, t)?.detach();
    Ok(FeatureBundle {
        image_features: resample_bilinear(&image_features, grid)?,
        denoiser_features: resample_bilinear(&denoiser_features, grid)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncoderDims {
    in_channels: usize,
    embed_dim: usize,
    registry: Vec<ProjectionSpec>,
}

#[derive(Debug, Clone)]
pub struct TuningEncoder {
    config: EncoderConfig,
    dims: EncoderDims,
    params: ParamTable,
}

const TRUNK_BLOCKS: usize = 4;

impl TuningEncoder {
    pub fn new(
        config: EncoderConfig,
        registry: &[ProjectionSpec],
        in_channels: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, "encoder-init");
        let mut p = ParamTable::new();
        let tw = config.trunk_width;
        for i in 0..TRUNK_BLOCKS {
            init_conv(&mut p, &mut rng, &format!("trunk.{i}"), if i == 0 { in_channels } else { tw }, tw, 3, 1.0)?;
        }
        init_linear(&mut p, &mut rng, "head.embed", tw, embed_dim, true)?;
        let r = config.lora.rank;
        for spec in registry {
            if r > spec.d_in.min(spec.d_out) {
                return Err(Error::config(format!("rank {r} too large for projection {}", spec.name)));
            }
            let a = format!("hyper.{}.a", spec.name);
            p.insert(format!("{a}.weight"), rng.normal_tensor(&[tw, spec.d_in * r], config.a_init_std, &Device::Cpu)?)?;
            p.insert(format!("{a}.bias"), Tensor::zeros(spec.d_in * r, DType::F32, &Device::Cpu)?)?;
            let b = format!("hyper.{}.b", spec.name);
            p.insert(format!("{b}.weight"), Tensor::zeros((tw, r * spec.d_out), DType::F32, &Device::Cpu)?)?;
            p.insert(format!("{b}.bias"), Tensor::zeros(r * spec.d_out, DType::F32, &Device::Cpu)?)?;
        }
        Ok(Self {
            config,
            dims: EncoderDims {
                in_channels,
                embed_dim,
                registry: registry.to_vec(),
            },
            params: p,
        })
    }

    /// An encoder sized for `frozen`.
    pub fn for_models(config: EncoderConfig, frozen: FrozenModels<'_>, seed: u64) -> Result<Self> {
        let in_channels = frozen.backbone.channels() + frozen.denoiser.config().widths[2];
        Self::new(
            config,
            frozen.denoiser.attention_projections(),
            in_channels,
            frozen.dict.dim(),
            seed,
        )
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTable {
        &mut self.params
    }

    pub fn registry(&self) -> &[ProjectionSpec] {
        &self.dims.registry
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            dims: self.dims.clone(),
            params: self.params.deep_clone()?,
        })
    }

    /// Global trunk vector, `B × trunk_width`.
    pub fn trunk(&self, bundle: &FeatureBundle) -> Result<Tensor> {
        let mut h = bundle.stacked()?;
        if h.dim(1)? != self.dims.in_channels {
            return Err(Error::invalid(format!(
                "feature bundle has {} channels, encoder expects {}",
                h.dim(1)?,
                self.dims.in_channels
            )));
        }
        for i in 0..TRUNK_BLOCKS {
            h = conv2d(&self.params, &format!("trunk.{i}"), &h, 2)?.silu()?;
        }
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    pub fn predict(&self, bundle: &FeatureBundle) -> Result<EncoderOutput> {
        let g = self.trunk(bundle)?;
        let b = g.dim(0)?;
        let v_star = linear(&self.params, "head.embed", &g)?;
        let r = self.config.lora.rank;
        let scale = self.config.lora.scale();
        let offsets = self
            .dims
            .registry
            .iter()
            .map(|spec| {
                let a = linear(&self.params, &format!("hyper.{}.a", spec.name), &g)?.reshape((b, spec.d_in, r))?;
                let bm = linear(&self.params, &format!("hyper.{}.b", spec.name), &g)?.reshape((b, r, spec.d_out))?;
                LoraOffset::new(spec.name.clone(), a, bm, scale)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderOutput {
            v_star,
            offsets: LoraOffsetSet::new(offsets, &self.dims.registry)?,
        })
    }

    /// Refinement timesteps, descending from `T − 1`.
    pub fn refine_timesteps(timesteps: usize, steps: usize) -> Vec<usize> {
        (0..steps).map(|i| (timesteps - 1) * (steps - i) / steps).collect()
    }

    /// Predict from the concept image (`1 × 3 × S × S`) starting at pure noise,
    /// moving the noisy generation forward with the blended denoiser between
    /// predictions. `steps = 1` is a single prediction at `T − 1`.
    pub fn iterative_refine(
        &self,
        image: &Tensor,
        prompt: &Prompt,
        steps: usize,
        seed: u64,
        frozen: FrozenModels<'_>,
        blend: BlendConfig,
    ) -> Result<EncoderOutput> {
        if steps == 0 {
            return Err(Error::invalid("refinement needs at least one step"));
        }
        let model = frozen.denoiser;
        let schedule = model.config().schedule()?;
        let ts = Self::refine_timesteps(schedule.len(), steps);
        let mut rng = Rng::derive(seed, "refine");
        let mut z = rng.normal_tensor(image.dims(), 1.0, &Device::Cpu)?;
        let mut out = None;
        for (i, &t) in ts.iter().enumerate() {
            let pred = self
                .predict(&extract_features(image, &z, &[t], frozen, self.config.grid)?)?
                .detach();
            if let Some(&t_next) = ts.get(i + 1) {
                let eps = dual_forward(
                    model,
                    &z,
                    &[t],
                    std::slice::from_ref(prompt),
                    &pred.v_star,
                    Some(&pred.offsets),
                    frozen.dict,
                    blend,
                )?
                .detach();
                let ab = schedule.alpha_bar(t)?;
                let ab_next = schedule.alpha_bar(t_next)?;
                let x0 = z
                    .affine(1.0 / ab.sqrt(), 0.0)?
                    .sub(&eps.affine((1.0 - ab).sqrt() / ab.sqrt(), 0.0)?)?
                    .clamp(-1f32, 1f32)?;
                z = x0.affine(ab_next.sqrt(), 0.0)?.add(&eps.affine((1.0 - ab_next).sqrt(), 0.0)?)?;
            }
            out = Some(pred);
        }
        Ok(out.expect("at least one refinement step"))
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.put_params("encoder", &self.params)?;
        ckpt.set_meta("encoder.config", &self.config)?;
        ckpt.set_meta("encoder.dims", &self.dims)
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let config: EncoderConfig = ckpt.meta("encoder.config")?;
        config.validate()?;
        Ok(Self {
            config,
            dims: ckpt.meta("encoder.dims")?,
            params: ckpt.params("encoder")?,
        })
    }
}
