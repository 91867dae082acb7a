//! The frozen world everything else builds on: the synthetic corpus and its
//! dictionary, the image backbone, the caption-trained base denoiser and the
//! evaluation scorer. Building is deterministic in the config, so results can
//! be cached on disk under a hash of it.

use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, ImageBackbone};
use crate::checkpoint::{write_dir_atomic, Checkpoint};
use crate::corpus::{images_to_tensor, Corpus, CorpusSpec};
use crate::denoiser::{add_noise, diffusion_loss, DenoiserConfig, DenoiserModel};
use crate::encoder::FrozenModels;
use crate::error::{Error, Result};
use crate::evaluator::{ScorerConfig, TwoTowerScorer};
use crate::nn::{warmup_cosine, Adam, AdamConfig, Rng};
use crate::token_space::{hard_condition, Prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Share of captions naming the concept by its word; a further
    /// `p_description` use its attribute description, the rest are empty.
    pub p_word: f64,
    pub p_description: f64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            p_word: 0.5,
            p_description: 0.4,
        }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || (self.steps > 0 && self.warmup_steps >= self.steps) {
            return Err(Error::config("denoiser training needs batch_size > 0, lr > 0, warmup < steps"));
        }
        if !(self.p_word >= 0.0 && self.p_description >= 0.0 && self.p_word + self.p_description <= 1.0) {
            return Err(Error::config("caption shares must be nonnegative and sum to at most 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoundationConfig {
    pub corpus: CorpusSpec,
    pub denoiser: DenoiserConfig,
    pub denoiser_train: DenoiserTrainConfig,
    pub backbone: BackboneConfig,
    pub scorer: ScorerConfig,
    pub seed: u64,
}

impl Default for FoundationConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            denoiser: DenoiserConfig::default(),
            denoiser_train: DenoiserTrainConfig::default(),
            backbone: BackboneConfig::default(),
            scorer: ScorerConfig::default(),
            seed: 0,
        }
    }
}

impl FoundationConfig {
    /// Reduced sizes that fit a single CPU core in minutes.
    pub fn tiny() -> Self {
        Self {
            corpus: CorpusSpec {
                n_concepts: 100,
                images_per_concept: 6,
                image_size: 16,
                vocab_size: 256,
                embed_dim: 32,
                seed: 0,
            },
            denoiser: DenoiserConfig {
                image_size: 16,
                widths: [16, 32, 32],
                embed_dim: 32,
                heads: 2,
                groups: 8,
                ..DenoiserConfig::default()
            },
            denoiser_train: DenoiserTrainConfig {
                steps: 4000,
                ..DenoiserTrainConfig::default()
            },
            backbone: BackboneConfig {
                widths: [8, 16, 32],
                steps: 300,
                ..BackboneConfig::default()
            },
            scorer: ScorerConfig {
                widths: [16, 32, 32],
                steps: 400,
                ..ScorerConfig::default()
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.denoiser_train.validate()?;
        self.scorer.validate()?;
        if self.corpus.image_size != self.denoiser.image_size || self.corpus.embed_dim != self.denoiser.embed_dim {
            return Err(Error::config("corpus and denoiser must agree on image_size and embed_dim"));
        }
        Ok(())
    }

    /// Stable short hash of the config, used as a cache key.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Base text-to-image training on the non-held-out concepts.
pub fn train_denoiser(model: &mut DenoiserModel, corpus: &Corpus, cfg: &DenoiserTrainConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let train = corpus.sample_ids_for(&corpus.catalog.train_ids());
    if train.is_empty() {
        return Err(Error::config("no training images for the denoiser"));
    }
    let mc = model.config().clone();
    let schedule = mc.schedule()?;
    let dict = &corpus.dictionary;
    model.set_trainable(true);
    let mut opt = Adam::new(model.params().vars().clone(), AdamConfig::default())?;
    let mut rng = Rng::derive(seed, "denoiser-train");
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| train[rng.below(train.len())]).collect();
        let x0 = images_to_tensor(&idx.iter().map(|&i| &corpus.samples[i].image).collect::<Vec<_>>())?;
        let prompts = idx
            .iter()
            .map(|&i| {
                let s = &corpus.samples[i];
                let u = rng.uniform();
                if u < cfg.p_word {
                    Prompt::parse(&corpus.word_caption(s), dict, mc.seq_len)
                } else if u < cfg.p_word + cfg.p_description {
                    Prompt::parse(&corpus.description_caption(s), dict, mc.seq_len)
                } else {
                    Ok(Prompt::empty(mc.seq_len))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let cond = hard_condition(&prompts, dict)?;
        let t: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(mc.timesteps)).collect();
        let eps = rng.normal_tensor(x0.dims(), 1.0, &Device::Cpu)?;
        let z_t = add_noise(&x0, &t, &eps, &schedule)?;
        let loss = diffusion_loss(&model.predict_noise(&z_t, &t, &cond, None)?, &eps)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            model.set_trainable(false);
            return Err(Error::NonFinite { step, detail: "denoiser loss".into() });
        }
        losses.push(value);
        if step % 100 == 0 {
            log::info!("denoiser step {step} loss {value:.4}");
        }
        let grads = loss.backward()?;
        opt.step(&grads, warmup_cosine(step, cfg.lr, cfg.warmup_steps, cfg.steps))?;
    }
    model.set_trainable(false);
    Ok(losses)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FoundationLosses {
    pub denoiser: Vec<f64>,
    pub backbone: Vec<f64>,
    pub scorer: Vec<f64>,
}

pub struct Foundation {
    pub config: FoundationConfig,
    pub corpus: Corpus,
    pub backbone: ImageBackbone,
    pub denoiser: DenoiserModel,
    pub scorer: TwoTowerScorer,
    pub losses: FoundationLosses,
}

const FOUNDATION_CKPT: &str = "models";

impl Foundation {
    pub fn build(config: FoundationConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let corpus = Corpus::generate(config.corpus.clone())?;
        log::info!("training backbone");
        let mut backbone = ImageBackbone::new(config.backbone.clone(), seed)?;
        let bb_losses = backbone.train(&corpus, seed)?;
        log::info!("training base denoiser");
        let mut denoiser = DenoiserModel::new(config.denoiser.clone(), &corpus.dictionary, seed)?;
        let dn_losses = train_denoiser(&mut denoiser, &corpus, &config.denoiser_train, seed)?;
        log::info!("training scorer");
        let mut scorer = TwoTowerScorer::new(config.scorer.clone(), &corpus.dictionary, seed)?;
        let sc_losses = scorer.train(&corpus, seed)?;
        Ok(Self {
            config,
            corpus,
            backbone,
            denoiser,
            scorer,
            losses: FoundationLosses {
                denoiser: dn_losses,
                backbone: bb_losses,
                scorer: sc_losses,
            },
        })
    }

    pub fn frozen(&self) -> FrozenModels<'_> {
        FrozenModels {
            backbone: &self.backbone,
            denoiser: &self.denoiser,
            dict: &self.corpus.dictionary,
        }
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.corpus.dictionary.write_to(ckpt)?;
        self.backbone.write_to(ckpt)?;
        self.denoiser.write_to(ckpt)?;
        self.scorer.write_to(ckpt)?;
        ckpt.set_meta("foundation.config", &self.config)?;
        ckpt.put_sidecar("foundation_losses.json", &self.losses)
    }

    /// The corpus is regenerated from its spec (deterministic); the models
    /// come from the checkpoint.
    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let config: FoundationConfig = ckpt.meta("foundation.config")?;
        let corpus = Corpus::generate(config.corpus.clone())?;
        let scorer = TwoTowerScorer::read_from(ckpt, &corpus.dictionary)?;
        Ok(Self {
            backbone: ImageBackbone::read_from(ckpt)?,
            denoiser: DenoiserModel::read_from(ckpt)?,
            scorer,
            losses: ckpt.sidecar("foundation_losses.json")?,
            corpus,
            config,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        self.write_to(&mut ckpt)?;
        ckpt.save(&dir.join(FOUNDATION_CKPT))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::read_from(&Checkpoint::load(&dir.join(FOUNDATION_CKPT))?)
    }

    pub fn cache_dir(root: &Path, config: &FoundationConfig) -> PathBuf {
        root.join(format!("foundation-{}", config.fingerprint()))
    }

    /// Load from `root` if this exact config was built before, else build and store.
    pub fn load_or_build(config: FoundationConfig, root: &Path) -> Result<Self> {
        let dir = Self::cache_dir(root, &config);
        if dir.join(FOUNDATION_CKPT).join("manifest.json").exists() {
            let f = Self::load(&dir)?;
            if f.config == config {
                log::info!("loaded foundation from {}", dir.display());
                return Ok(f);
            }
        }
        let f = Self::build(config)?;
        write_dir_atomic(&dir, |tmp| f.save(tmp))?;
        Ok(f)
    }
}
