//! Parameter storage, seeded randomness, the handful of layers the models
//! share, and an Adam optimizer whose state can be checkpointed.

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var, D};
use indexmap::IndexMap;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Seeded ChaCha stream whose position can be saved and restored exactly.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, stored as a decimal string (u128 does not fit JSON numbers).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from this seed and a label.
    pub fn derive(seed: u64, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        Self::new(u64::from_le_bytes(b))
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_word_pos(state.word_pos);
        Self {
            seed: state.seed,
            inner,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f32> {
        (0..n).map(|_| (self.normal() * std) as f32).collect()
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64, device: &Device) -> Result<Tensor> {
        let n = shape.iter().product();
        Ok(Tensor::from_vec(self.normal_vec(n, std), shape, device)?)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// Named parameters of one network. Frozen tables hand out detached
/// tensors, so no gradient is ever recorded for them.
#[derive(Debug, Clone)]
pub struct ParamTable {
    vars: IndexMap<String, Var>,
    trainable: bool,
}

impl Default for ParamTable {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamTable {
    pub fn new() -> Self {
        Self {
            vars: IndexMap::new(),
            trainable: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        self.vars.insert(name, Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        Ok(if self.trainable {
            v.as_tensor().clone()
        } else {
            v.as_detached_tensor()
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Overwrite the stored value in place.
    pub fn set(&self, name: &str, t: &Tensor) -> Result<()> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if v.shape() != t.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                v.shape(),
                t.shape()
            )));
        }
        v.set(t)?;
        Ok(())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copy with fresh storage; mutating the copy never touches `self`.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().copy()?.detach())?;
        }
        out.trainable = self.trainable;
        Ok(out)
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in flat_f32(v.as_tensor())? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

pub fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

// ---------------------------------------------------------------------------
// Initializers

pub fn init_linear(
    params: &mut ParamTable,
    rng: &mut Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
) -> Result<()> {
    let std = 1.0 / (d_in as f64).sqrt();
    params.insert(
        format!("{prefix}.weight"),
        rng.normal_tensor(&[d_in, d_out], std, &Device::Cpu)?,
    )?;
    if bias {
        params.insert(format!("{prefix}.bias"), Tensor::zeros(d_out, DType::F32, &Device::Cpu)?)?;
    }
    Ok(())
}

pub fn init_conv(
    params: &mut ParamTable,
    rng: &mut Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    gain: f64,
) -> Result<()> {
    let fan_in = c_in * kernel * kernel;
    let std = gain * (2.0 / fan_in as f64).sqrt();
    params.insert(
        format!("{prefix}.weight"),
        rng.normal_tensor(&[c_out, c_in, kernel, kernel], std, &Device::Cpu)?,
    )?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(c_out, DType::F32, &Device::Cpu)?)?;
    Ok(())
}

pub fn init_norm(params: &mut ParamTable, prefix: &str, channels: usize) -> Result<()> {
    params.insert(format!("{prefix}.gamma"), Tensor::ones(channels, DType::F32, &Device::Cpu)?)?;
    params.insert(format!("{prefix}.beta"), Tensor::zeros(channels, DType::F32, &Device::Cpu)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Layers

/// Row-vector convention: `x · W (+ b)` with `W` stored `D_in × D_out`.
pub fn linear(params: &ParamTable, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let y = x.broadcast_matmul(&w)?;
    let bias_name = format!("{prefix}.bias");
    if params.contains(&bias_name) {
        Ok(y.broadcast_add(&params.get(&bias_name)?)?)
    } else {
        Ok(y)
    }
}

pub fn conv2d(params: &ParamTable, prefix: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let k = w.dim(2)?;
    let y = x.conv2d(&w, k / 2, stride, 1, 1)?;
    let b = params.get(&format!("{prefix}.bias"))?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

pub fn group_norm(params: &ParamTable, prefix: &str, x: &Tensor, groups: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let g = groups.min(c);
    if c % g != 0 {
        return Err(Error::config(format!("{c} channels not divisible into {g} groups")));
    }
    let xg = x.reshape((b, g, (c / g) * h * w))?;
    let mean = xg.mean_keepdim(D::Minus1)?;
    let centered = xg.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    let normed = normed.reshape((b, c, h, w))?;
    let gamma = params.get(&format!("{prefix}.gamma"))?.reshape((1, c, 1, 1))?;
    let beta = params.get(&format!("{prefix}.beta"))?.reshape((1, c, 1, 1))?;
    Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

pub fn layer_norm(params: &ParamTable, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    let gamma = params.get(&format!("{prefix}.gamma"))?;
    let beta = params.get(&format!("{prefix}.beta"))?;
    Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

/// Softmax over the last dimension; the max shift is treated as a constant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Mean softmax cross-entropy for integer class targets.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let n = logits.dim(0)?;
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_vec(
        targets.iter().map(|&t| t as u32).collect::<Vec<_>>(),
        (n, 1),
        logits.device(),
    )?;
    let picked = log_probs.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a named set of variables. Moments are exposed so the full
/// optimizer state can be written into a checkpoint.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    vars: IndexMap<String, Var>,
    first: IndexMap<String, Tensor>,
    second: IndexMap<String, Tensor>,
    steps: usize,
}

impl Adam {
    pub fn new(vars: IndexMap<String, Var>, cfg: AdamConfig) -> Result<Self> {
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        for (k, v) in &vars {
            first.insert(k.clone(), v.zeros_like()?);
            second.insert(k.clone(), v.zeros_like()?);
        }
        Ok(Self {
            cfg,
            vars,
            first,
            second,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry their op graph; keep it out of the moments or
            // every step's graph stays alive through the running averages.
            let g = g.detach();
            let m = self.first[name].affine(b1, 0.0)?.add(&g.affine(1.0 - b1, 0.0)?)?;
            let v = self.second[name]
                .affine(b2, 0.0)?
                .add(&g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.cfg.eps)?;
            let update = m.affine(lr / bc1, 0.0)?.div(&denom)?;
            var.set(&var.as_tensor().detach().sub(&update)?)?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// Moment tensors as `(name, first, second)` plus the step counter.
    pub fn export(&self) -> (usize, Vec<(String, Tensor, Tensor)>) {
        let entries = self
            .vars
            .keys()
            .map(|k| (k.clone(), self.first[k].clone(), self.second[k].clone()))
            .collect();
        (self.steps, entries)
    }

    pub fn restore(&mut self, steps: usize, moments: Vec<(String, Tensor, Tensor)>) -> Result<()> {
        for (name, m, v) in moments {
            if !self.vars.contains_key(&name) {
                return Err(Error::Format(format!("optimizer state for unknown variable {name}")));
            }
            self.first.insert(name.clone(), m);
            self.second.insert(name, v);
        }
        self.steps = steps;
        Ok(())
    }
}

/// Linear warm-up from 0 to `base` over `warmup` steps, then cosine decay to 0
/// at `total`. Steps past `total` clamp to 0.
pub fn warmup_cosine(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}
