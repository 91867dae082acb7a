//! Frozen image backbone: a three-layer convolutional classifier trained on
//! the corpus to recognise shape, colour, texture and context. Its last
//! spatial layer supplies the image half of the encoder's features.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{images_to_tensor, Corpus, Context, COLORS, SHAPES, TEXTURES};
use crate::error::{Error, Result};
use crate::nn::{conv2d, cross_entropy, init_conv, init_linear, linear, warmup_cosine, Adam, AdamConfig, ParamTable, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: [usize; 3],
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            steps: 400,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

const HEADS: [(&str, usize); 4] = [
    ("head.shape", SHAPES.len()),
    ("head.color", COLORS.len()),
    ("head.texture", TEXTURES.len()),
    ("head.context", Context::ALL.len()),
];

#[derive(Debug, Clone)]
pub struct ImageBackbone {
    config: BackboneConfig,
    params: ParamTable,
}

impl ImageBackbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        if config.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        let mut rng = Rng::derive(seed, "backbone-init");
        let mut p = ParamTable::new();
        let [c1, c2, c3] = config.widths;
        init_conv(&mut p, &mut rng, "conv1", 3, c1, 3, 1.0)?;
        init_conv(&mut p, &mut rng, "conv2", c1, c2, 3, 1.0)?;
        init_conv(&mut p, &mut rng, "conv3", c2, c3, 3, 1.0)?;
        for (name, n) in HEADS {
            init_linear(&mut p, &mut rng, name, c3, n, true)?;
        }
        p.set_trainable(false);
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn channels(&self) -> usize {
        self.config.widths[2]
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    /// Last spatial layer, `B × C × S/4 × S/4`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let h = conv2d(p, "conv1", images, 1)?.silu()?;
        let h = conv2d(p, "conv2", &h, 2)?.silu()?;
        Ok(conv2d(p, "conv3", &h, 2)?.silu()?)
    }

    /// Per-attribute logits in head order (shape, colour, texture, context).
    pub fn logits(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let pooled = self.features(images)?.mean(D::Minus1)?.mean(D::Minus1)?;
        HEADS.iter().map(|(name, _)| linear(&self.params, name, &pooled)).collect()
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.put_params("backbone", &self.params)?;
        ckpt.set_meta("backbone.config", &self.config)
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            config: ckpt.meta("backbone.config")?,
            params: ckpt.params("backbone")?,
        })
    }

    /// Supervised training on the non-held-out concepts; returns per-step losses.
    pub fn train(&mut self, corpus: &Corpus, seed: u64) -> Result<Vec<f64>> {
        let train = corpus.sample_ids_for(&corpus.catalog.train_ids());
        if train.is_empty() {
            return Err(Error::config("no training images for the backbone"));
        }
        self.params.set_trainable(true);
        let mut opt = Adam::new(self.params.vars().clone(), AdamConfig::default())?;
        let mut rng = Rng::derive(seed, "backbone-train");
        let cfg = self.config.clone();
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| train[rng.below(train.len())]).collect();
            let images = images_to_tensor(&idx.iter().map(|&i| &corpus.samples[i].image).collect::<Vec<_>>())?;
            let targets: [Vec<usize>; 4] = [
                idx.iter().map(|&i| corpus.concept(corpus.samples[i].concept).shape).collect(),
                idx.iter().map(|&i| corpus.concept(corpus.samples[i].concept).color).collect(),
                idx.iter().map(|&i| corpus.concept(corpus.samples[i].concept).texture).collect(),
                idx.iter().map(|&i| corpus.samples[i].context.index()).collect(),
            ];
            let logits = self.logits(&images)?;
            let mut loss = cross_entropy(&logits[0], &targets[0])?;
            for (l, t) in logits.iter().zip(&targets).skip(1) {
                loss = loss.add(&cross_entropy(l, t)?)?;
            }
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { step, detail: "backbone loss".into() });
            }
            losses.push(value);
            let grads = loss.backward()?;
            opt.step(&grads, warmup_cosine(step, cfg.lr, cfg.steps / 20, cfg.steps))?;
        }
        self.params.set_trainable(false);
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;

    #[test]
    fn feature_shape_and_frozen_by_default() -> Result<()> {
        let bb = ImageBackbone::new(BackboneConfig::default(), 0)?;
        let x = Tensor::zeros((2, 3, 16, 16), candle_core::DType::F32, &candle_core::Device::Cpu)?;
        assert_eq!(bb.features(&x)?.dims(), &[2, 64, 4, 4]);
        assert!(!bb.params().is_trainable());
        Ok(())
    }

    #[test]
    fn training_reduces_loss() -> Result<()> {
        let corpus = Corpus::generate(CorpusSpec {
            n_concepts: 20,
            images_per_concept: 4,
            image_size: 16,
            vocab_size: 64,
            embed_dim: 16,
            seed: 0,
        })?;
        let mut bb = ImageBackbone::new(
            BackboneConfig {
                widths: [8, 16, 16],
                steps: 60,
                batch_size: 16,
                lr: 5e-3,
            },
            0,
        )?;
        let losses = bb.train(&corpus, 0)?;
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(!bb.params().is_trainable());
        Ok(())
    }
}
