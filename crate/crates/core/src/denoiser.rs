//! A small text-conditioned UNet denoiser operating directly on RGB pixels,
//! its DDPM noise schedule, the noise-prediction loss and an ancestral sampler.
//!
//! Layout (widths `w1, w2, w3`):
//!
//! ```text
//! conv_in ─ down1.res ─┬─ down1.pool ─ down2.res ─ down2.attn ─┬─ down2.pool ─ mid.res ─ mid.attn
//!                      │                                       │                            │
//!          out ─ up1.res ┴ up1.conv ─────── up2.attn ─ up2.res ┴─────────── up2.conv ───────┘
//! ```
//!
//! Each `*.attn` block holds bias-free self- and cross-attention projections
//! `q, k, v, out`; together they form the projection registry that low-rank
//! offsets address.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dual_path::{self, BlendConfig, ConditionedBlock};
use crate::error::{Error, Result};
use crate::lora::{apply_offset, LoraOffsetSet, ProjectionSpec};
use crate::nn::{conv2d, group_norm, init_conv, init_linear, init_norm, layer_norm, linear, softmax_last, ParamTable, Rng};
use crate::token_space::TokenDictionary;

pub const ATTENTION_BLOCKS: [&str; 3] = ["down2.attn", "mid.attn", "up2.attn"];
/// Largest acceptable `ᾱ_T`.
pub const MAX_TERMINAL_ALPHA_BAR: f64 = 1e-2;
const PROJECTIONS: [&str; 4] = ["q", "k", "v", "out"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub widths: [usize; 3],
    pub embed_dim: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub groups: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            widths: [32, 64, 128],
            embed_dim: 128,
            seq_len: 8,
            heads: 4,
            groups: 8,
            timesteps: 200,
            // 1e-4..2e-2 would leave alpha_bar_T = 0.13 over 200 steps; 5e-2
            // brings it to 6e-3 while keeping half the chain above SNR 0.3.
            beta_start: 1e-4,
            beta_end: 5e-2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::config(format!("image_size {} must be a positive multiple of 4", self.image_size)));
        }
        for &w in &self.widths {
            if w == 0 || w % self.heads != 0 || w % self.groups.min(w) != 0 {
                return Err(Error::config(format!(
                    "width {w} must be divisible by heads ({}) and groups ({})",
                    self.heads, self.groups
                )));
            }
        }
        if self.channels == 0 || self.embed_dim == 0 || self.seq_len == 0 || self.heads == 0 || self.groups == 0 {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        let schedule = NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)?;
        // Sampling starts from N(0, I); training must end there too.
        let last = schedule.alpha_bars()[schedule.len() - 1];
        if last > MAX_TERMINAL_ALPHA_BAR {
            return Err(Error::config(format!(
                "final alpha_bar {last:.3e} leaves signal at the last timestep; raise beta_end or timesteps"
            )));
        }
        Ok(())
    }

    pub fn time_dim(&self) -> usize {
        2 * self.widths[0]
    }

    /// Spatial side of the bottleneck (`mid.*`) features.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    /// The projection registry, in block order, `self` before `cross`.
    pub fn projection_registry(&self) -> Vec<ProjectionSpec> {
        let [_, w2, w3] = self.widths;
        let mut out = Vec::with_capacity(24);
        for (block, c) in ATTENTION_BLOCKS.iter().zip([w2, w3, w2]) {
            for p in PROJECTIONS {
                out.push(ProjectionSpec { name: format!("{block}.self.{p}"), d_in: c, d_out: c });
            }
            for p in PROJECTIONS {
                let d_in = if p == "k" || p == "v" { self.embed_dim } else { c };
                out.push(ProjectionSpec { name: format!("{block}.cross.{p}"), d_in, d_out: c });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::config("schedule needs at least 2 timesteps"));
        }
        let betas = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::config("betas must lie in (0, 1)"));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} out of range 0..{}", self.len())))
    }

    /// `S` evenly spaced timesteps, ascending, always ending at `T − 1`.
    pub fn respaced(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(Error::invalid(format!("steps must be in 1..={t}, got {steps}")));
        }
        Ok((0..steps).map(|j| (j + 1) * t / steps - 1).collect())
    }
}

/// `√ᾱ_t · x0 + √(1−ᾱ_t) · eps`, one `ᾱ` per sample.
pub fn add_noise(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let abs = t.iter().map(|&ti| schedule.alpha_bar(ti)).collect::<Result<Vec<_>>>()?;
    noise_with_alpha_bars(x0, &abs, eps)
}

/// The forward process for explicit `ᾱ` values (which may include the 0 and 1 limits).
pub fn noise_with_alpha_bars(x0: &Tensor, alpha_bars: &[f64], eps: &Tensor) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::invalid(format!("x0 {:?} and eps {:?} differ in shape", x0.dims(), eps.dims())));
    }
    let b = x0.dim(0)?;
    if alpha_bars.len() != b {
        return Err(Error::invalid(format!("{} timesteps for a batch of {b}", alpha_bars.len())));
    }
    if alpha_bars.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::invalid("alpha_bar outside [0, 1]"));
    }
    let coef = |f: fn(f64) -> f64| -> Result<Tensor> {
        let mut shape = vec![b];
        shape.extend(std::iter::repeat(1).take(x0.rank() - 1));
        let v: Vec<f64> = alpha_bars.iter().map(|&a| f(a)).collect();
        Ok(Tensor::from_vec(v, shape, x0.device())?.to_dtype(x0.dtype())?)
    };
    let signal = coef(|a| a.sqrt())?;
    let noise = coef(|a| (1.0 - a).sqrt())?;
    Ok(x0.broadcast_mul(&signal)?.add(&eps.broadcast_mul(&noise)?)?)
}

/// Mean of squared differences.
pub fn diffusion_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_hat.dims() != eps.dims() {
        return Err(Error::invalid(format!(
            "prediction {:?} and target {:?} differ in shape",
            eps_hat.dims(),
            eps.dims()
        )));
    }
    Ok(eps_hat.sub(eps)?.sqr()?.mean_all()?)
}

/// How the attention blocks are conditioned during one forward pass.
#[derive(Clone, Copy)]
pub enum Conditioning<'a> {
    /// One path: `cond` (`B × L × d`) with optional offsets.
    Single { cond: &'a Tensor, offsets: Option<&'a LoraOffsetSet> },
    /// Every attention block blends a soft/adapted and a hard/original branch.
    Dual {
        soft: &'a Tensor,
        hard: &'a Tensor,
        offsets: Option<&'a LoraOffsetSet>,
        blend: BlendConfig,
    },
}

impl Conditioning<'_> {
    fn primary(&self) -> &Tensor {
        match self {
            Conditioning::Single { cond, .. } => cond,
            Conditioning::Dual { soft, .. } => soft,
        }
    }

    fn offsets(&self) -> Option<&LoraOffsetSet> {
        match *self {
            Conditioning::Single { offsets, .. } | Conditioning::Dual { offsets, .. } => offsets,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamTable,
    registry: Vec<ProjectionSpec>,
    /// Dictionary row of the null token, `d` values.
    null_token: Vec<f32>,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, dict: &TokenDictionary, seed: u64) -> Result<Self> {
        config.validate()?;
        if dict.dim() != config.embed_dim {
            return Err(Error::config(format!(
                "dictionary width {} != denoiser embed_dim {}",
                dict.dim(),
                config.embed_dim
            )));
        }
        let mut rng = Rng::derive(seed, "denoiser-init");
        let mut p = ParamTable::new();
        let [w1, w2, w3] = config.widths;
        let td = config.time_dim();
        init_linear(&mut p, &mut rng, "time.lin1", w1, td, true)?;
        init_linear(&mut p, &mut rng, "time.lin2", td, td, true)?;
        init_conv(&mut p, &mut rng, "conv_in", config.channels, w1, 3, 1.0)?;
        init_res(&mut p, &mut rng, "down1.res", w1, w1, td)?;
        init_conv(&mut p, &mut rng, "down1.pool", w1, w2, 3, 1.0)?;
        init_res(&mut p, &mut rng, "down2.res", w2, w2, td)?;
        init_attn(&mut p, &mut rng, "down2.attn", w2, config.embed_dim)?;
        init_conv(&mut p, &mut rng, "down2.pool", w2, w3, 3, 1.0)?;
        init_res(&mut p, &mut rng, "mid.res", w3, w3, td)?;
        init_attn(&mut p, &mut rng, "mid.attn", w3, config.embed_dim)?;
        init_conv(&mut p, &mut rng, "up2.conv", w3, w2, 3, 1.0)?;
        init_res(&mut p, &mut rng, "up2.res", 2 * w2, w2, td)?;
        init_attn(&mut p, &mut rng, "up2.attn", w2, config.embed_dim)?;
        init_conv(&mut p, &mut rng, "up1.conv", w2, w1, 3, 1.0)?;
        init_res(&mut p, &mut rng, "up1.res", 2 * w1, w1, td)?;
        init_norm(&mut p, "out.norm", w1)?;
        init_conv(&mut p, &mut rng, "out.conv", w1, config.channels, 3, 0.1)?;
        let registry = config.projection_registry();
        Ok(Self {
            config,
            params: p,
            registry,
            null_token: dict.row(crate::token_space::NULL_TOKEN).to_vec(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.set_trainable(trainable);
    }

    pub fn attention_projections(&self) -> &[ProjectionSpec] {
        &self.registry
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: self.params.deep_clone()?,
            registry: self.registry.clone(),
            null_token: self.null_token.clone(),
        })
    }

    /// Every offset must name a registered projection with matching shape.
    pub fn check_offsets(&self, offsets: &LoraOffsetSet) -> Result<()> {
        for o in offsets.iter() {
            let spec = self
                .registry
                .iter()
                .find(|p| p.name == o.layer_name)
                .ok_or_else(|| Error::config(format!("offset names unknown projection {}", o.layer_name)))?;
            if spec.d_in != o.d_in() || spec.d_out != o.d_out() {
                return Err(Error::invalid(format!("offset {} has the wrong shape", o.layer_name)));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.put_params("denoiser", &self.params)?;
        ckpt.put_raw("denoiser_buffers/null_token", vec![self.null_token.len()], self.null_token.clone())?;
        ckpt.set_meta("denoiser.config", &self.config)?;
        ckpt.set_meta("denoiser.projections", &self.registry)
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let config: DenoiserConfig = ckpt.meta("denoiser.config")?;
        config.validate()?;
        let registry: Vec<ProjectionSpec> = ckpt.meta("denoiser.projections")?;
        if registry != config.projection_registry() {
            return Err(Error::Format("stored projection registry does not match the configuration".into()));
        }
        let (_, null) = ckpt.raw("denoiser_buffers/null_token")?;
        Ok(Self {
            params: ckpt.params("denoiser")?,
            null_token: null.to_vec(),
            registry,
            config,
        })
    }

    /// The designated empty-prompt conditioning, `B × L × d`.
    pub fn empty_condition(&self, batch: usize) -> Result<Tensor> {
        let row = Tensor::from_vec(self.null_token.clone(), (1, 1, self.config.embed_dim), &Device::Cpu)?;
        Ok(row.broadcast_as((batch, self.config.seq_len, self.config.embed_dim))?.contiguous()?)
    }

    /// `x · W'` where `W' = W + ΔW` if `offsets` cover `name`.
    pub fn project(&self, x: &Tensor, name: &str, offsets: Option<&LoraOffsetSet>) -> Result<Tensor> {
        let w = self.params.get(&format!("{name}.weight"))?;
        match offsets.and_then(|o| o.get(name)) {
            Some(off) => {
                let w = apply_offset(&w, off)?;
                if w.rank() == 3 {
                    Ok(x.contiguous()?.matmul(&w)?)
                } else {
                    Ok(x.broadcast_matmul(&w)?)
                }
            }
            None => Ok(x.broadcast_matmul(&w)?),
        }
    }

    pub fn predict_noise(
        &self,
        z_t: &Tensor,
        t: &[usize],
        cond: &Tensor,
        offsets: Option<&LoraOffsetSet>,
    ) -> Result<Tensor> {
        self.forward(z_t, t, Conditioning::Single { cond, offsets })
    }

    pub fn forward(&self, z_t: &Tensor, t: &[usize], cond: Conditioning<'_>) -> Result<Tensor> {
        self.check_inputs(z_t, t, &cond)?;
        self.forward_with(z_t, t, &mut |name, f| self.attention(name, f, &cond))
    }

    /// The network skeleton with every attention block delegated to `attn(name, f)`.
    /// Inputs are not validated; [`DenoiserModel::forward`] is the checked entry point.
    pub fn forward_with(
        &self,
        z_t: &Tensor,
        t: &[usize],
        attn: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let p = &self.params;
        let temb = self.time_embedding(t)?;
        let h = conv2d(p, "conv_in", z_t, 1)?;
        let h1 = self.res_block("down1.res", &h, &temb)?;
        let h = conv2d(p, "down1.pool", &h1, 2)?;
        let h = self.res_block("down2.res", &h, &temb)?;
        let h2 = attn("down2.attn", &h)?;
        let h = conv2d(p, "down2.pool", &h2, 2)?;
        let h = self.res_block("mid.res", &h, &temb)?;
        let h = attn("mid.attn", &h)?;

        let s2 = self.config.image_size / 2;
        let h = conv2d(p, "up2.conv", &h.upsample_nearest2d(s2, s2)?, 1)?;
        let h = self.res_block("up2.res", &Tensor::cat(&[&h, &h2], 1)?, &temb)?;
        let h = attn("up2.attn", &h)?;
        let s1 = self.config.image_size;
        let h = conv2d(p, "up1.conv", &h.upsample_nearest2d(s1, s1)?, 1)?;
        let h = self.res_block("up1.res", &Tensor::cat(&[&h, &h1], 1)?, &temb)?;
        let h = group_norm(p, "out.norm", &h, self.config.groups)?.silu()?;
        conv2d(p, "out.conv", &h, 1)
    }

    /// Bottleneck features (output of `mid.attn`) under the empty prompt.
    pub fn encoder_features(&self, z_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let b = z_t.dim(0)?;
        let cond = self.empty_condition(b)?;
        let cond = Conditioning::Single { cond: &cond, offsets: None };
        self.check_inputs(z_t, t, &cond)?;
        let temb = self.time_embedding(t)?;
        let h = conv2d(&self.params, "conv_in", z_t, 1)?;
        let h = self.res_block("down1.res", &h, &temb)?;
        let h = conv2d(&self.params, "down1.pool", &h, 2)?;
        let h = self.res_block("down2.res", &h, &temb)?;
        let h = self.attention("down2.attn", &h, &cond)?;
        let h = conv2d(&self.params, "down2.pool", &h, 2)?;
        let h = self.res_block("mid.res", &h, &temb)?;
        self.attention("mid.attn", &h, &cond)
    }

    fn check_inputs(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning<'_>) -> Result<(usize, usize)> {
        let (b, c, h, w) = z_t.dims4()?;
        let s = self.config.image_size;
        if c != self.config.channels || h != s || w != s {
            return Err(Error::invalid(format!(
                "expected B×{}×{s}×{s} input, got {:?}",
                self.config.channels,
                z_t.dims()
            )));
        }
        if t.len() != b {
            return Err(Error::invalid(format!("{} timesteps for a batch of {b}", t.len())));
        }
        if let Some(bad) = t.iter().find(|&&x| x >= self.config.timesteps) {
            return Err(Error::invalid(format!("timestep {bad} out of range 0..{}", self.config.timesteps)));
        }
        let check_cond = |c: &Tensor| -> Result<usize> {
            let (cb, l, d) = c.dims3()?;
            if d != self.config.embed_dim {
                return Err(Error::invalid(format!(
                    "conditioning width {d} != embed_dim {}",
                    self.config.embed_dim
                )));
            }
            if cb != b {
                return Err(Error::invalid(format!("conditioning batch {cb} != image batch {b}")));
            }
            Ok(l)
        };
        let l = check_cond(cond.primary())?;
        if let Conditioning::Dual { hard, .. } = cond {
            if check_cond(hard)? != l {
                return Err(Error::invalid("soft and hard conditioning differ in sequence length"));
            }
        }
        if let Some(o) = cond.offsets() {
            self.check_offsets(o)?;
            if let Some(ob) = o.batch() {
                if ob != b {
                    return Err(Error::invalid(format!("offsets carry batch {ob}, inputs {b}")));
                }
            }
        }
        Ok((b, l))
    }

    fn time_embedding(&self, t: &[usize]) -> Result<Tensor> {
        let dim = self.config.widths[0];
        let half = dim / 2;
        let mut v = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                v.push((ti as f64 * freq).sin() as f32);
            }
            for i in 0..dim - half {
                let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
                v.push((ti as f64 * freq).cos() as f32);
            }
        }
        let e = Tensor::from_vec(v, (t.len(), dim), &Device::Cpu)?;
        let e = linear(&self.params, "time.lin1", &e)?.silu()?;
        linear(&self.params, "time.lin2", &e)
    }

    fn res_block(&self, prefix: &str, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let g = self.config.groups;
        let h = group_norm(&self.params, &format!("{prefix}.norm1"), x, g)?.silu()?;
        let h = conv2d(&self.params, &format!("{prefix}.conv1"), &h, 1)?;
        let tproj = linear(&self.params, &format!("{prefix}.time"), &temb.silu()?)?;
        let h = h.broadcast_add(&tproj.unsqueeze(2)?.unsqueeze(3)?)?;
        let h = group_norm(&self.params, &format!("{prefix}.norm2"), &h, g)?.silu()?;
        let h = conv2d(&self.params, &format!("{prefix}.conv2"), &h, 1)?;
        let skip_name = format!("{prefix}.skip");
        let skip = if self.params.contains(&format!("{skip_name}.weight")) {
            conv2d(&self.params, &skip_name, x, 1)?
        } else {
            x.clone()
        };
        Ok(h.add(&skip)?)
    }

    fn attention(&self, name: &str, f: &Tensor, cond: &Conditioning<'_>) -> Result<Tensor> {
        let block = AttentionBlock { model: self, name };
        match *cond {
            Conditioning::Single { cond, offsets } => block.forward(f, cond, offsets),
            Conditioning::Dual { soft, hard, offsets, blend } => {
                dual_path::blended_block(f, soft, hard, &block, offsets, blend)
            }
        }
    }
}

/// One named attention block of a [`DenoiserModel`].
pub struct AttentionBlock<'m> {
    pub model: &'m DenoiserModel,
    pub name: &'m str,
}

impl ConditionedBlock for AttentionBlock<'_> {
    fn forward(&self, f: &Tensor, cond: &Tensor, offsets: Option<&LoraOffsetSet>) -> Result<Tensor> {
        let m = self.model;
        let p = &m.params;
        let name = self.name;
        let (b, c, h, w) = f.dims4()?;
        let heads = m.config.heads;
        let to_tokens = |x: &Tensor| -> Result<Tensor> { Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?) };

        let x = to_tokens(f)?;
        let hn = to_tokens(&group_norm(p, &format!("{name}.norm"), f, m.config.groups)?)?;
        let q = m.project(&hn, &format!("{name}.self.q"), offsets)?;
        let k = m.project(&hn, &format!("{name}.self.k"), offsets)?;
        let v = m.project(&hn, &format!("{name}.self.v"), offsets)?;
        let a = multi_head_attention(&q, &k, &v, heads)?;
        let x = x.add(&m.project(&a, &format!("{name}.self.out"), offsets)?)?;

        let hn = layer_norm(p, &format!("{name}.ln"), &x)?;
        // Dictionary rows are unit-norm; scaled by sqrt(d) their entries are
        // O(1) like the features, otherwise the text path trains far too slowly.
        let cond = &cond.affine((m.config.embed_dim as f64).sqrt(), 0.0)?;
        let q = m.project(&hn, &format!("{name}.cross.q"), offsets)?;
        let k = m.project(cond, &format!("{name}.cross.k"), offsets)?;
        let v = m.project(cond, &format!("{name}.cross.v"), offsets)?;
        let a = multi_head_attention(&q, &k, &v, heads)?;
        let x = x.add(&m.project(&a, &format!("{name}.cross.out"), offsets)?)?;

        Ok(x.transpose(1, 2)?.reshape((b, c, h, w))?)
    }
}

fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = q.dims3()?;
    let m = k.dim(1)?;
    let hd = c / heads;
    let split = |x: &Tensor, len: usize| -> Result<Tensor> {
        Ok(x
            .reshape((b, len, heads, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * heads, len, hd))?)
    };
    let (q, k, v) = (split(q, n)?, split(k, m)?, split(v, m)?);
    let scores = q.matmul(&k.t()?.contiguous()?)?.affine(1.0 / (hd as f64).sqrt(), 0.0)?;
    let attn = softmax_last(&scores)?;
    let o = attn.matmul(&v)?;
    Ok(o.reshape((b, heads, n, hd))?.transpose(1, 2)?.reshape((b, n, c))?)
}

fn init_res(p: &mut ParamTable, rng: &mut Rng, prefix: &str, c_in: usize, c_out: usize, td: usize) -> Result<()> {
    init_norm(p, &format!("{prefix}.norm1"), c_in)?;
    init_conv(p, rng, &format!("{prefix}.conv1"), c_in, c_out, 3, 1.0)?;
    init_linear(p, rng, &format!("{prefix}.time"), td, c_out, true)?;
    init_norm(p, &format!("{prefix}.norm2"), c_out)?;
    init_conv(p, rng, &format!("{prefix}.conv2"), c_out, c_out, 3, 0.3)?;
    if c_in != c_out {
        init_conv(p, rng, &format!("{prefix}.skip"), c_in, c_out, 1, 1.0)?;
    }
    Ok(())
}

fn init_attn(p: &mut ParamTable, rng: &mut Rng, prefix: &str, c: usize, d: usize) -> Result<()> {
    init_norm(p, &format!("{prefix}.norm"), c)?;
    init_norm(p, &format!("{prefix}.ln"), c)?;
    for kind in ["self", "cross"] {
        for proj in PROJECTIONS {
            let d_in = if kind == "cross" && (proj == "k" || proj == "v") { d } else { c };
            init_linear(p, rng, &format!("{prefix}.{kind}.{proj}"), d_in, c, false)?;
        }
    }
    // Output projections start small so fresh blocks are near-identity.
    for kind in ["self", "cross"] {
        let name = format!("{prefix}.{kind}.out.weight");
        let w = p.get(&name)?.affine(0.2, 0.0)?;
        p.set(&name, &w)?;
    }
    Ok(())
}

/// Ancestral sampling over `steps` respaced timesteps from per-sample seeded
/// noise. `eps_fn(z, t)` predicts the noise for the whole batch.
pub fn sample_with<F>(
    mut eps_fn: F,
    shape: (usize, usize, usize, usize),
    schedule: &NoiseSchedule,
    steps: usize,
    seeds: &[u64],
) -> Result<Tensor>
where
    F: FnMut(&Tensor, &[usize]) -> Result<Tensor>,
{
    let (b, c, h, w) = shape;
    if seeds.len() != b {
        return Err(Error::invalid(format!("{} seeds for a batch of {b}", seeds.len())));
    }
    let taus = schedule.respaced(steps)?;
    let per = c * h * w;
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| Rng::derive(s, "sample")).collect();
    let draw = |rngs: &mut [Rng]| -> Result<Tensor> {
        let mut v = Vec::with_capacity(b * per);
        for r in rngs.iter_mut() {
            v.extend(r.normal_vec(per, 1.0));
        }
        Ok(Tensor::from_vec(v, (b, c, h, w), &Device::Cpu)?)
    };
    let mut z = draw(&mut rngs)?;
    for i in (0..taus.len()).rev() {
        let tau = taus[i];
        let ab = schedule.alpha_bar(tau)?;
        let ab_prev = if i > 0 { schedule.alpha_bar(taus[i - 1])? } else { 1.0 };
        let eps = eps_fn(&z, &vec![tau; b])?.detach();
        let x0 = z
            .affine(1.0 / ab.sqrt(), 0.0)?
            .sub(&eps.affine((1.0 - ab).sqrt() / ab.sqrt(), 0.0)?)?
            .clamp(-1f32, 1f32)?;
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let cz = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean = x0.affine(c0, 0.0)?.add(&z.affine(cz, 0.0)?)?;
        z = if i > 0 {
            let var = beta * (1.0 - ab_prev) / (1.0 - ab);
            mean.add(&draw(&mut rngs)?.affine(var.sqrt(), 0.0)?)?
        } else {
            mean
        };
    }
    Ok(z.clamp(-1f32, 1f32)?)
}

/// Sample one image per row of `cond` (`B × L × d`), seeded per row.
pub fn sample(
    model: &DenoiserModel,
    cond: &Tensor,
    offsets: Option<&LoraOffsetSet>,
    steps: usize,
    seeds: &[u64],
) -> Result<Tensor> {
    let cfg = model.config();
    let b = cond.dim(0)?;
    let schedule = cfg.schedule()?;
    sample_with(
        |z, t| model.predict_noise(z, t, cond, offsets),
        (b, cfg.channels, cfg.image_size, cfg.image_size),
        &schedule,
        steps,
        seeds,
    )
}
