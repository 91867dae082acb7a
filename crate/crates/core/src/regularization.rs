//! Embedding regularizers: the nearest-neighbour contrastive loss (dictionary
//! neighbours as positives, batch peers as negatives), a plain nearest-token
//! cosine pull used for ablations, and the squared-norm penalty.
//!
//! Everything follows the dtype of the embeddings passed in, so the same code
//! serves f32 training and f64 gradient checks.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token_space::{nearest_tokens, TokenDictionary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub k: usize,
    pub tau: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { k: 5, tau: 0.07 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.k == 0 || self.k > vocab {
            return Err(Error::config(format!("k must be in 1..={vocab}, got {}", self.k)));
        }
        Ok(())
    }
}

/// `Σ v²`.
pub fn embedding_l2(v: &Tensor) -> Result<Tensor> {
    Ok(v.sqr()?.sum_all()?)
}

/// Mean over rows of `Σ v²` for a `B × d` batch.
pub fn embedding_l2_batch(v: &Tensor) -> Result<Tensor> {
    Ok(v.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Contrastive loss for one embedding `v_star` (`d`) against its top-`k`
/// dictionary neighbours and the peers in `negatives` (`P × d`, possibly
/// `P = 0` or absent). Neighbour selection is a stop-gradient operation.
pub fn contrastive_loss(
    v_star: &Tensor,
    negatives: Option<&Tensor>,
    dict: &TokenDictionary,
    cfg: &ContrastiveConfig,
) -> Result<Tensor> {
    if dict.is_empty() {
        return Err(Error::config("empty dictionary"));
    }
    cfg.validate(dict.len())?;
    let positives = neighbour_ids(v_star, dict, cfg.k)?;
    contrastive_loss_fixed(v_star, &positives, negatives, dict, cfg.tau)
}

/// [`contrastive_loss`] with the positive set given explicitly.
pub fn contrastive_loss_fixed(
    v_star: &Tensor,
    positives: &[usize],
    negatives: Option<&Tensor>,
    dict: &TokenDictionary,
    tau: f64,
) -> Result<Tensor> {
    if positives.is_empty() {
        return Err(Error::invalid("positive set is empty"));
    }
    let d = dict.dim();
    let v = v_star.flatten_all()?;
    if v.dim(0)? != d {
        return Err(Error::invalid(format!("embedding width {} != dictionary width {d}", v.dim(0)?)));
    }
    let vn = unit_rows(&v.unsqueeze(0)?)?;
    let pos = dictionary_rows(dict, positives, v.dtype())?;
    let pos_logits = vn.matmul(&pos.t()?)?.affine(1.0 / tau, 0.0)?.squeeze(0)?;
    let neg_logits = match negatives {
        Some(n) if n.dim(0)? > 0 => {
            if n.dims2()?.1 != d {
                return Err(Error::invalid("negative embeddings have the wrong width"));
            }
            let nn = unit_rows(&n.to_dtype(v.dtype())?)?;
            Some(vn.matmul(&nn.t()?)?.affine(1.0 / tau, 0.0)?.squeeze(0)?)
        }
        _ => None,
    };
    match neg_logits {
        None => Ok(Tensor::zeros((), v.dtype(), v.device())?),
        Some(neg) => softplus(&log_sum_exp(&neg)?.sub(&log_sum_exp(&pos_logits)?)?),
    }
}

/// Mean contrastive loss over a `B × d` batch where each row's negatives are
/// the other rows.
pub fn contrastive_loss_batch(v: &Tensor, dict: &TokenDictionary, cfg: &ContrastiveConfig) -> Result<Tensor> {
    let b = v.dim(0)?;
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let others: Vec<u32> = (0..b as u32).filter(|&j| j as usize != i).collect();
        let negatives = if others.is_empty() {
            None
        } else {
            let idx = Tensor::from_vec(others.clone(), others.len(), v.device())?;
            Some(v.index_select(&idx, 0)?)
        };
        terms.push(contrastive_loss(&v.get(i)?, negatives.as_ref(), dict, cfg)?);
    }
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

/// `1 − cos(v, T_nn)` averaged over rows, `T_nn` the nearest token of each row.
pub fn nn_cosine_loss(v: &Tensor, dict: &TokenDictionary) -> Result<Tensor> {
    let b = v.dim(0)?;
    let mut ids = Vec::with_capacity(b);
    for i in 0..b {
        ids.push(neighbour_ids(&v.get(i)?, dict, 1)?[0]);
    }
    let vn = unit_rows(v)?;
    let targets = dictionary_rows(dict, &ids, v.dtype())?;
    let cos = vn.mul(&targets)?.sum(D::Minus1)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

fn neighbour_ids(v: &Tensor, dict: &TokenDictionary, k: usize) -> Result<Vec<usize>> {
    let host = v.detach().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(nearest_tokens(&host, dict, k)?.token_ids)
}

fn dictionary_rows(dict: &TokenDictionary, ids: &[usize], dtype: DType) -> Result<Tensor> {
    let idx = Tensor::from_vec(ids.iter().map(|&i| i as u32).collect::<Vec<_>>(), ids.len(), dict.tensor().device())?;
    unit_rows(&dict.tensor().index_select(&idx, 0)?.to_dtype(dtype)?)
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norms.detach().min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if min <= 0.0 || !min.is_finite() {
        return Err(Error::invalid("zero-norm embedding in contrastive loss"));
    }
    Ok(x.broadcast_div(&norms)?)
}

/// Max-shifted `log Σ exp(x)` over a vector.
fn log_sum_exp(x: &Tensor) -> Result<Tensor> {
    let m = x.detach().max_all()?;
    let s = x.broadcast_sub(&m)?.exp()?.sum_all()?;
    Ok(s.log()?.add(&m)?)
}

/// `log(1 + eˣ)` without overflow or cancellation.
fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?.add(&log1p(&x.abs()?.neg()?.exp()?)?)?)
}

/// `log(1 + r)` for `r ≥ 0`, switching to a cubic series below `1e-4` where
/// `1 + r` would round away most of `r`.
fn log1p(r: &Tensor) -> Result<Tensor> {
    let small = r.lt(1e-4)?.to_dtype(r.dtype())?;
    let large = small.affine(-1.0, 1.0)?;
    let r2 = r.sqr()?;
    let series = r.sub(&r2.affine(0.5, 0.0)?)?.add(&r2.mul(r)?.affine(1.0 / 3.0, 0.0)?)?;
    let direct = r.affine(1.0, 1.0)?.log()?;
    Ok(series.mul(&small)?.add(&direct.mul(&large)?)?)
}
