//! Low-rank weight offsets `ΔW = scale · A · B` on named attention projections.
//!
//! `A` is `D_in × r` and `B` is `r × D_out`, matching the row-vector
//! convention of the denoiser (`y = x · W`). An offset may also carry a
//! leading batch dimension (`N × D_in × r`, `N × r × D_out`) when the
//! hypernetwork predicts a different offset for every sample in a batch.

use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::nn::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 1.0 }
    }
}

impl LoraConfig {
    /// The constant factor applied to `A · B`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// A registered projection matrix of the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone)]
pub struct LoraOffset {
    pub layer_name: String,
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LoraOffset {
    pub fn new(layer_name: impl Into<String>, a: Tensor, b: Tensor, scale: f64) -> Result<Self> {
        let layer_name = layer_name.into();
        let bad = |m: String| Error::invalid(format!("offset {layer_name}: {m}"));
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(bad(format!("scale must be positive, got {scale}")));
        }
        let (ar, br) = (a.rank(), b.rank());
        if ar != br || !(ar == 2 || ar == 3) {
            return Err(bad(format!("A and B must both be 2-D or both 3-D, got {:?} and {:?}", a.dims(), b.dims())));
        }
        if ar == 3 && a.dim(0)? != b.dim(0)? {
            return Err(bad("batch sizes of A and B differ".into()));
        }
        let (d_in, r) = (a.dim(ar - 2)?, a.dim(ar - 1)?);
        let (rb, d_out) = (b.dim(ar - 2)?, b.dim(ar - 1)?);
        if r != rb {
            return Err(bad(format!("inner ranks differ: A has {r}, B has {rb}")));
        }
        if r == 0 || r > d_in.min(d_out) {
            return Err(bad(format!("rank {r} outside 1..={}", d_in.min(d_out))));
        }
        Ok(Self {
            layer_name,
            a,
            b,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.dims()[self.a.rank() - 1]
    }

    pub fn d_in(&self) -> usize {
        self.a.dims()[self.a.rank() - 2]
    }

    pub fn d_out(&self) -> usize {
        self.b.dims()[self.b.rank() - 1]
    }

    /// Leading batch size, if the offset is per-sample.
    pub fn batch(&self) -> Option<usize> {
        (self.a.rank() == 3).then(|| self.a.dims()[0])
    }

    /// Materialized `scale · A · B` (batched if the offset is).
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.a.matmul(&self.b)?.affine(self.scale, 0.0)?)
    }

    pub fn select(&self, i: usize) -> Result<Self> {
        match self.batch() {
            Some(_) => Self::new(self.layer_name.clone(), self.a.get(i)?, self.b.get(i)?, self.scale),
            None => Ok(self.clone()),
        }
    }

    pub fn detach(&self) -> Self {
        Self {
            layer_name: self.layer_name.clone(),
            a: self.a.detach(),
            b: self.b.detach(),
            scale: self.scale,
        }
    }
}

/// `W + scale · A · B`; `W` is left untouched.
pub fn apply_offset(w: &Tensor, offset: &LoraOffset) -> Result<Tensor> {
    let (d_in, d_out) = w.dims2()?;
    if d_in != offset.d_in() || d_out != offset.d_out() {
        return Err(Error::invalid(format!(
            "offset {} is {}x{}, weight is {d_in}x{d_out}",
            offset.layer_name,
            offset.d_in(),
            offset.d_out()
        )));
    }
    let delta = offset.delta()?.to_dtype(w.dtype())?;
    Ok(w.broadcast_add(&delta)?)
}

/// One offset per registered projection, in registry order.
#[derive(Debug, Clone)]
pub struct LoraOffsetSet {
    offsets: IndexMap<String, LoraOffset>,
}

impl LoraOffsetSet {
    /// Validates total coverage of `registry` and shape agreement.
    pub fn new(offsets: Vec<LoraOffset>, registry: &[ProjectionSpec]) -> Result<Self> {
        let mut map: IndexMap<String, LoraOffset> = offsets.into_iter().map(|o| (o.layer_name.clone(), o)).collect();
        if let Some(stray) = map.keys().find(|k| !registry.iter().any(|p| &p.name == *k)) {
            return Err(Error::config(format!("offset names unknown projection {stray}")));
        }
        let mut ordered = IndexMap::with_capacity(registry.len());
        let mut batch = None;
        for p in registry {
            let o = map
                .shift_remove(&p.name)
                .ok_or_else(|| Error::config(format!("no offset for projection {}", p.name)))?;
            if o.d_in() != p.d_in || o.d_out() != p.d_out {
                return Err(Error::invalid(format!(
                    "offset {} is {}x{}, projection is {}x{}",
                    p.name,
                    o.d_in(),
                    o.d_out(),
                    p.d_in,
                    p.d_out
                )));
            }
            if ordered.is_empty() {
                batch = o.batch();
            } else if o.batch() != batch {
                return Err(Error::invalid("offsets in a set must share one batch layout"));
            }
            ordered.insert(p.name.clone(), o);
        }
        Ok(Self { offsets: ordered })
    }

    /// All-zero `A` and `B`.
    pub fn zeros(registry: &[ProjectionSpec], cfg: LoraConfig) -> Result<Self> {
        let offsets = registry
            .iter()
            .map(|p| {
                LoraOffset::new(
                    p.name.clone(),
                    Tensor::zeros((p.d_in, cfg.rank), DType::F32, &Device::Cpu)?,
                    Tensor::zeros((cfg.rank, p.d_out), DType::F32, &Device::Cpu)?,
                    cfg.scale(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(offsets, registry)
    }

    /// Gaussian `A` and `B` with standard deviation `std`, for tests and probes.
    pub fn random(registry: &[ProjectionSpec], cfg: LoraConfig, std: f64, rng: &mut Rng) -> Result<Self> {
        let offsets = registry
            .iter()
            .map(|p| {
                LoraOffset::new(
                    p.name.clone(),
                    rng.normal_tensor(&[p.d_in, cfg.rank], std, &Device::Cpu)?,
                    rng.normal_tensor(&[cfg.rank, p.d_out], std, &Device::Cpu)?,
                    cfg.scale(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(offsets, registry)
    }

    pub fn get(&self, name: &str) -> Option<&LoraOffset> {
        self.offsets.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraOffset> {
        self.offsets.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.offsets.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn batch(&self) -> Option<usize> {
        self.offsets.values().next().and_then(|o| o.batch())
    }

    pub fn select(&self, i: usize) -> Result<Self> {
        Ok(Self {
            offsets: self
                .offsets
                .iter()
                .map(|(k, o)| Ok((k.clone(), o.select(i)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            offsets: self.offsets.iter().map(|(k, o)| (k.clone(), o.detach())).collect(),
        }
    }

    /// Fresh storage copies of every `A` and `B`.
    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            offsets: self
                .offsets
                .iter()
                .map(|(k, o)| {
                    Ok((
                        k.clone(),
                        LoraOffset {
                            layer_name: o.layer_name.clone(),
                            a: o.a.copy()?.detach(),
                            b: o.b.copy()?.detach(),
                            scale: o.scale,
                        },
                    ))
                })
                .collect::<Result<_>>()?,
        })
    }

    /// Negate every `A`, giving `-ΔW`.
    pub fn negated(&self) -> Result<Self> {
        Ok(Self {
            offsets: self
                .offsets
                .iter()
                .map(|(k, o)| {
                    Ok((
                        k.clone(),
                        LoraOffset {
                            layer_name: o.layer_name.clone(),
                            a: o.a.neg()?,
                            b: o.b.clone(),
                            scale: o.scale,
                        },
                    ))
                })
                .collect::<Result<_>>()?,
        })
    }

    /// Wrap every `A` and `B` in trainable variables, returning the set that
    /// reads through them and the variables keyed `<layer>.a` / `<layer>.b`.
    pub fn to_vars(&self) -> Result<(Self, IndexMap<String, Var>)> {
        let mut vars = IndexMap::new();
        let mut offsets = IndexMap::new();
        for (k, o) in &self.offsets {
            let a = Var::from_tensor(&o.a.copy()?)?;
            let b = Var::from_tensor(&o.b.copy()?)?;
            offsets.insert(
                k.clone(),
                LoraOffset {
                    layer_name: k.clone(),
                    a: a.as_tensor().clone(),
                    b: b.as_tensor().clone(),
                    scale: o.scale,
                },
            );
            vars.insert(format!("{k}.a"), a);
            vars.insert(format!("{k}.b"), b);
        }
        Ok((Self { offsets }, vars))
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint, ns: &str) -> Result<()> {
        let mut scales = IndexMap::new();
        for (k, o) in &self.offsets {
            ckpt.put_tensor(format!("{ns}/{k}.a"), &o.a)?;
            ckpt.put_tensor(format!("{ns}/{k}.b"), &o.b)?;
            scales.insert(k.clone(), o.scale);
        }
        ckpt.set_meta(&format!("{ns}.scales"), &scales)
    }

    pub fn read_from(ckpt: &Checkpoint, ns: &str, registry: &[ProjectionSpec]) -> Result<Self> {
        let scales: IndexMap<String, f64> = ckpt.meta(&format!("{ns}.scales"))?;
        let offsets = registry
            .iter()
            .map(|p| {
                let scale = *scales
                    .get(&p.name)
                    .ok_or_else(|| Error::Format(format!("no scale stored for {}", p.name)))?;
                LoraOffset::new(
                    p.name.clone(),
                    ckpt.tensor(&format!("{ns}/{}.a", p.name))?,
                    ckpt.tensor(&format!("{ns}/{}.b", p.name))?,
                    scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(offsets, registry)
    }
}

/// `Σ_layers ‖scale · A · B‖²_F`, summed over the batch if there is one.
pub fn offsets_l2(offsets: &LoraOffsetSet) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for o in offsets.iter() {
        let term = o.delta()?.sqr()?.sum_all()?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("empty offset set"))
}

/// `Σ_layers ‖ΔW_cur − ΔW_init‖²_F`.
pub fn offsets_distance_sq(cur: &LoraOffsetSet, init: &LoraOffsetSet) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (c, i) in cur.iter().zip(init.iter()) {
        let term = c.delta()?.sub(&i.delta()?)?.sqr()?.sum_all()?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("empty offset set"))
}

/// Deep copy of `model` with every projection replaced by `W + ΔW`.
pub fn merge_offsets(model: &DenoiserModel, offsets: &LoraOffsetSet) -> Result<DenoiserModel> {
    if offsets.batch().is_some() {
        return Err(Error::invalid("cannot merge per-sample offsets into one model"));
    }
    model.check_offsets(offsets)?;
    let merged = model.deep_clone()?;
    for p in model.attention_projections() {
        let name = format!("{}.weight", p.name);
        let w = model.params().get(&name)?;
        let off = offsets
            .get(&p.name)
            .ok_or_else(|| Error::config(format!("no offset for projection {}", p.name)))?;
        merged.params().set(&name, &apply_offset(&w, off)?)?;
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{flat_f64, scalar_f64};

    fn host(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
    }

    /// Explicit triple loop, the independent oracle for `W + s·A·B`.
    fn triple_loop(w: &[Vec<f64>], a: &[Vec<f64>], b: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
        let mut out = w.to_vec();
        for i in 0..w.len() {
            for j in 0..w[0].len() {
                let mut acc = 0.0;
                for k in 0..b.len() {
                    acc += a[i][k] * b[k][j];
                }
                out[i][j] += s * acc;
            }
        }
        out
    }

    #[test]
    fn zero_factor_is_identity() -> Result<()> {
        let mut rng = Rng::new(1);
        let w = rng.normal_tensor(&[4, 5], 1.0, &Device::Cpu)?;
        let a = rng.normal_tensor(&[4, 2], 1.0, &Device::Cpu)?;
        let b = rng.normal_tensor(&[2, 5], 1.0, &Device::Cpu)?;
        let zb = LoraOffset::new("x", a.clone(), b.zeros_like()?, 0.5)?;
        assert_eq!(host(&apply_offset(&w, &zb)?), host(&w));
        let za = LoraOffset::new("x", a.zeros_like()?, b, 0.5)?;
        assert_eq!(host(&apply_offset(&w, &za)?), host(&w));
        Ok(())
    }

    #[test]
    fn matches_triple_loop_oracle() -> Result<()> {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let w = rng.normal_tensor(&[4, 4], 1.0, &Device::Cpu)?;
            let a = rng.normal_tensor(&[4, 2], 1.0, &Device::Cpu)?;
            let b = rng.normal_tensor(&[2, 4], 1.0, &Device::Cpu)?;
            let o = LoraOffset::new("x", a.clone(), b.clone(), 0.5)?;
            let got = host(&apply_offset(&w, &o)?);
            let want = triple_loop(&host(&w), &host(&a), &host(&b), 0.5);
            for (gr, wr) in got.iter().zip(&want) {
                for (g, x) in gr.iter().zip(wr) {
                    assert!((g - x).abs() <= 1e-5 * x.abs().max(1.0));
                }
            }
        }
        Ok(())
    }

    #[test]
    fn shape_and_rank_validation() -> Result<()> {
        let z = |r, c| Tensor::zeros((r, c), DType::F32, &Device::Cpu).unwrap();
        assert!(LoraOffset::new("x", z(4, 2), z(3, 4), 1.0).is_err());
        assert!(LoraOffset::new("x", z(2, 3), z(3, 2), 1.0).is_err()); // r > min(D_in, D_out)
        assert!(LoraOffset::new("x", z(4, 2), z(2, 4), 0.0).is_err());
        let o = LoraOffset::new("x", z(4, 2), z(2, 4), 1.0)?;
        assert!(matches!(apply_offset(&z(5, 4), &o), Err(Error::InvalidInput(_))));
        Ok(())
    }

    fn registry() -> Vec<ProjectionSpec> {
        vec![
            ProjectionSpec { name: "p".into(), d_in: 3, d_out: 3 },
            ProjectionSpec { name: "q".into(), d_in: 5, d_out: 2 },
        ]
    }

    #[test]
    fn offsets_l2_cases() -> Result<()> {
        let reg = registry();
        let zero = LoraOffsetSet::zeros(&reg, LoraConfig { rank: 2, alpha: 2.0 })?;
        assert_eq!(scalar_f64(&offsets_l2(&zero)?)?, 0.0);

        // ΔW = I₃ via A = I₃, B = I₃, scale 1 → 3
        let eye = Tensor::eye(3, DType::F32, &Device::Cpu)?;
        let id = LoraOffset::new("p", eye.clone(), eye, 1.0)?;
        let q = LoraOffset::new(
            "q",
            Tensor::zeros((5, 2), DType::F32, &Device::Cpu)?,
            Tensor::zeros((2, 2), DType::F32, &Device::Cpu)?,
            1.0,
        )?;
        let set = LoraOffsetSet::new(vec![id, q], &reg)?;
        assert!((scalar_f64(&offsets_l2(&set)?)? - 3.0).abs() < 1e-6);

        // materialization oracle
        let mut rng = Rng::new(3);
        let set = LoraOffsetSet::random(&reg, LoraConfig { rank: 2, alpha: 1.0 }, 1.0, &mut rng)?;
        let mut want = 0.0;
        for o in set.iter() {
            let a = host(&o.a);
            let b = host(&o.b);
            let zero_w = vec![vec![0.0; o.d_out()]; o.d_in()];
            for row in triple_loop(&zero_w, &a, &b, o.scale) {
                want += row.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let got = scalar_f64(&offsets_l2(&set)?)?;
        assert!((got - want).abs() < 1e-5 * want);
        Ok(())
    }

    #[test]
    fn coverage_is_total() -> Result<()> {
        let reg = registry();
        let z = |r, c| Tensor::zeros((r, c), DType::F32, &Device::Cpu).unwrap();
        let only_p = vec![LoraOffset::new("p", z(3, 1), z(1, 3), 1.0)?];
        assert!(matches!(LoraOffsetSet::new(only_p, &reg), Err(Error::Config(_))));
        let stray = vec![
            LoraOffset::new("p", z(3, 1), z(1, 3), 1.0)?,
            LoraOffset::new("q", z(5, 1), z(1, 2), 1.0)?,
            LoraOffset::new("zz", z(3, 1), z(1, 3), 1.0)?,
        ];
        assert!(matches!(LoraOffsetSet::new(stray, &reg), Err(Error::Config(_))));
        Ok(())
    }

    #[test]
    fn scales_compose_linearly() -> Result<()> {
        let mut rng = Rng::new(4);
        let w = rng.normal_tensor(&[6, 6], 1.0, &Device::Cpu)?;
        let a = rng.normal_tensor(&[6, 3], 1.0, &Device::Cpu)?;
        let b = rng.normal_tensor(&[3, 6], 1.0, &Device::Cpu)?;
        let (c1, c2) = (0.3, 1.7);
        let once = apply_offset(&apply_offset(&w, &LoraOffset::new("x", a.clone(), b.clone(), c1)?)?, &LoraOffset::new("x", a.clone(), b.clone(), c2)?)?;
        let joint = apply_offset(&w, &LoraOffset::new("x", a, b, c1 + c2)?)?;
        for (x, y) in flat_f64(&once)?.iter().zip(flat_f64(&joint)?) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
        Ok(())
    }

    #[test]
    fn delta_rank_is_bounded_by_r() -> Result<()> {
        // rank via Gaussian elimination on the 8x8 materialized offset
        let mut rng = Rng::new(5);
        for r in 1..=3 {
            let a = rng.normal_tensor(&[8, r], 1.0, &Device::Cpu)?.to_dtype(DType::F64)?;
            let b = rng.normal_tensor(&[r, 8], 1.0, &Device::Cpu)?.to_dtype(DType::F64)?;
            let d = host(&LoraOffset::new("x", a, b, 0.25)?.delta()?);
            assert_eq!(numerical_rank(d, 1e-9), r);
        }
        Ok(())
    }

    fn numerical_rank(mut m: Vec<Vec<f64>>, tol: f64) -> usize {
        let (rows, cols) = (m.len(), m[0].len());
        let mut rank = 0;
        for c in 0..cols {
            let Some(p) = (rank..rows).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())) else { break };
            if m[p][c].abs() < tol {
                continue;
            }
            m.swap(rank, p);
            for i in 0..rows {
                if i != rank {
                    let f = m[i][c] / m[rank][c];
                    for k in 0..cols {
                        m[i][k] -= f * m[rank][k];
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn checkpoint_round_trip() -> Result<()> {
        let reg = registry();
        let mut rng = Rng::new(6);
        let set = LoraOffsetSet::random(&reg, LoraConfig { rank: 2, alpha: 1.0 }, 1.0, &mut rng)?;
        let mut c = Checkpoint::new();
        set.write_to(&mut c, "offsets")?;
        let back = LoraOffsetSet::read_from(&c, "offsets", &reg)?;
        for (x, y) in set.iter().zip(back.iter()) {
            assert_eq!(flat_f64(&x.a)?, flat_f64(&y.a)?);
            assert_eq!(flat_f64(&x.b)?, flat_f64(&y.b)?);
            assert_eq!(x.scale, y.scale);
        }
        Ok(())
    }

    #[test]
    fn l2_gradient_matches_finite_differences() -> Result<()> {
        let mut rng = Rng::new(11);
        let a = Tensor::new(rng.normal_vec(12, 1.0), &Device::Cpu)?.reshape((4, 3))?.to_dtype(DType::F64)?;
        let b = Tensor::new(rng.normal_vec(15, 1.0), &Device::Cpu)?.reshape((3, 5))?.to_dtype(DType::F64)?;
        let registry = [ProjectionSpec { name: "p".into(), d_in: 4, d_out: 5 }];
        let loss = |a: &Tensor| -> Result<Tensor> {
            let set = LoraOffsetSet::new(vec![LoraOffset::new("p", a.clone(), b.clone(), 0.5)?], &registry)?;
            offsets_l2(&set)
        };
        let var = candle_core::Var::from_tensor(&a)?;
        let grads = loss(var.as_tensor())?.backward()?;
        let g = flat_f64(grads.get(var.as_tensor()).expect("gradient reaches A"))?;
        let base = flat_f64(&a)?;
        let h = 1e-6;
        for k in 0..base.len() {
            let shifted = |d: f64| -> Result<f64> {
                let mut v = base.clone();
                v[k] += d;
                scalar_f64(&loss(&Tensor::from_vec(v, (4, 3), &Device::Cpu)?)?)
            };
            let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * fd.abs().max(1.0), "{k}: {fd} vs {}", g[k]);
        }
        Ok(())
    }
}
