//! Small deterministic fixtures shared by unit, integration and acceptance
//! tests: random dictionaries and micro-sized model configurations.

use crate::backbone::{BackboneConfig, ImageBackbone};
use crate::corpus::{Corpus, CorpusSpec};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::encoder::{EncoderConfig, FrozenModels, TuningEncoder};
use crate::nn::Rng;
use crate::token_space::TokenDictionary;

/// `v` Gaussian rows of width `d`, labelled `w0 .. w{v-1}`.
pub fn random_dictionary(v: usize, d: usize, seed: u64) -> TokenDictionary {
    let mut rng = Rng::derive(seed, "fixture-dictionary");
    let labels = (0..v).map(|i| format!("w{i}")).collect();
    TokenDictionary::new(rng.normal_vec(v * d, 1.0), d, labels).expect("gaussian rows are valid")
}

/// An 8×8 denoiser small enough for exhaustive tests.
pub fn micro_denoiser_config(embed_dim: usize) -> DenoiserConfig {
    DenoiserConfig {
        image_size: 8,
        channels: 3,
        widths: [8, 16, 16],
        embed_dim,
        seq_len: 4,
        heads: 2,
        groups: 4,
        timesteps: 50,
        beta_start: 2e-3,
        beta_end: 0.4,
    }
}

/// A corpus with matching untrained frozen models, all at micro scale.
pub struct MicroWorld {
    pub corpus: Corpus,
    pub backbone: ImageBackbone,
    pub denoiser: DenoiserModel,
}

impl MicroWorld {
    pub fn new(seed: u64) -> Self {
        let corpus = Corpus::generate(CorpusSpec {
            n_concepts: 12,
            images_per_concept: 3,
            image_size: 8,
            vocab_size: 64,
            embed_dim: 8,
            seed,
        })
        .expect("micro corpus");
        let backbone = ImageBackbone::new(
            BackboneConfig {
                widths: [4, 8, 8],
                ..BackboneConfig::default()
            },
            seed,
        )
        .expect("micro backbone");
        let denoiser = DenoiserModel::new(micro_denoiser_config(8), &corpus.dictionary, seed).expect("micro denoiser");
        Self {
            corpus,
            backbone,
            denoiser,
        }
    }

    pub fn frozen(&self) -> FrozenModels<'_> {
        FrozenModels {
            backbone: &self.backbone,
            denoiser: &self.denoiser,
            dict: &self.corpus.dictionary,
        }
    }

    pub fn encoder_config() -> EncoderConfig {
        EncoderConfig {
            grid: 4,
            trunk_width: 16,
            ..EncoderConfig::default()
        }
    }

    pub fn encoder(&self, seed: u64) -> TuningEncoder {
        TuningEncoder::for_models(Self::encoder_config(), self.frozen(), seed).expect("micro encoder")
    }
}
