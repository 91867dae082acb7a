//! Run configuration: one TOML file holding every knob of a run. Sections may
//! be partial (missing keys take defaults) but unknown keys are rejected, and
//! every section is validated on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Context;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluator::PROMPT_BANK;
use crate::foundation::FoundationConfig;
use crate::personalize::PersonalizeConfig;
use crate::pretrain::PretrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root for run outputs; the `TUNENC_OUT` environment variable wins over it.
    pub out_root: PathBuf,
    /// Where built foundations and pretrained encoders are cached, keyed by
    /// their config hash. Defaults to `<out_root>/cache`.
    pub cache: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_root: PathBuf::from("runs"),
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out concepts to evaluate (first n of the held-out list).
    pub n_concepts: usize,
    pub n_seeds: usize,
    pub sample_steps: usize,
    pub prompts: Vec<Context>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_concepts: 10,
            n_seeds: 5,
            sample_steps: 25,
            prompts: PROMPT_BANK.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts == 0 || self.n_seeds == 0 || self.sample_steps == 0 || self.prompts.is_empty() {
            return Err(Error::config("n_concepts, n_seeds, sample_steps and prompts must be nonempty"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for encoder initialization.
    pub seed: u64,
    pub paths: PathsConfig,
    pub foundation: FoundationConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub personalize: PersonalizeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale sizes used by the acceptance suite and smoke runs.
    pub fn tiny() -> Self {
        Self {
            foundation: FoundationConfig::tiny(),
            encoder: EncoderConfig {
                trunk_width: 64,
                ..EncoderConfig::default()
            },
            pretrain: PretrainConfig {
                base_lr: 3e-4,
                warmup_steps: 50,
                total_steps: 800,
                batch_size: 8,
                checkpoint_every: 200,
                ..PretrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("[{name}] {m}")),
                other => other,
            })
        };
        section("foundation", self.foundation.validate())?;
        section("encoder", self.encoder.validate())?;
        section("pretrain", self.pretrain.validate())?;
        section(
            "pretrain.contrastive",
            self.pretrain.contrastive.validate(self.foundation.corpus.vocab_size),
        )?;
        section("personalize", self.personalize.validate())?;
        section("eval", self.eval.validate())?;
        let held_out = (self.foundation.corpus.n_concepts / 10).max(1);
        if self.eval.n_concepts > held_out {
            return Err(Error::config(format!(
                "[eval] n_concepts = {} but the corpus holds out only {held_out}",
                self.eval.n_concepts
            )));
        }
        Ok(())
    }

    /// Seconds-scale sizes for smoke runs and command-line tests. The models
    /// are too small to learn much; use `tiny` for meaningful numbers.
    pub fn micro() -> Self {
        let mut f = FoundationConfig::tiny();
        f.corpus = crate::corpus::CorpusSpec {
            n_concepts: 20,
            images_per_concept: 3,
            image_size: 8,
            vocab_size: 64,
            embed_dim: 8,
            seed: 0,
        };
        f.denoiser = crate::denoiser::DenoiserConfig {
            seq_len: 8,
            ..crate::fixtures::micro_denoiser_config(8)
        };
        f.denoiser_train.steps = 30;
        f.denoiser_train.warmup_steps = 5;
        f.denoiser_train.batch_size = 4;
        f.backbone.widths = [4, 8, 8];
        f.backbone.steps = 10;
        f.scorer.widths = [4, 8, 8];
        f.scorer.token_dim = 8;
        f.scorer.embed_dim = 8;
        f.scorer.steps = 10;
        f.scorer.batch_size = 8;
        Self {
            foundation: f,
            encoder: crate::fixtures::MicroWorld::encoder_config(),
            pretrain: PretrainConfig {
                warmup_steps: 2,
                total_steps: 6,
                batch_size: 4,
                checkpoint_every: 3,
                ..PretrainConfig::default()
            },
            personalize: PersonalizeConfig {
                max_steps: 3,
                batch_size: 2,
                ..PersonalizeConfig::default()
            },
            eval: EvalConfig {
                n_concepts: 2,
                n_seeds: 2,
                sample_steps: 3,
                prompts: PROMPT_BANK[..2].to_vec(),
            },
            ..Self::default()
        }
    }

    /// Parse and validate. Syntax and unknown-key errors carry the line.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Output root with the environment override applied.
    pub fn out_root(&self) -> PathBuf {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| self.paths.out_root.clone())
    }

    pub fn cache_root(&self) -> PathBuf {
        self.paths.cache.clone().unwrap_or_else(|| self.out_root().join("cache"))
    }
}

pub const OUT_ENV: &str = "TUNENC_OUT";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_tiny_validate_and_round_trip() -> Result<()> {
        for cfg in [RunConfig::default(), RunConfig::tiny(), RunConfig::micro()] {
            cfg.validate()?;
            assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()?)?, cfg);
        }
        Ok(())
    }

    #[test]
    fn partial_sections_take_defaults() -> Result<()> {
        let cfg = RunConfig::from_toml_str("seed = 3\n[pretrain]\ntotal_steps = 100\nwarmup_steps = 10\n[pretrain.blend]\nalpha_blend = 0.5\n")?;
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.pretrain.total_steps, 100);
        assert_eq!(cfg.pretrain.blend.alpha_blend, 0.5);
        assert_eq!(cfg.pretrain.base_lr, 1e-4);
        assert_eq!(cfg.personalize, PersonalizeConfig::default());
        Ok(())
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::from_toml_str("seed = 1\n[pretrain]\ntotal_stepz = 5\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("total_stepz"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
        assert!(RunConfig::from_toml_str("[nonsense]\n").is_err());
    }

    #[test]
    fn semantic_errors_name_the_section() {
        let err = RunConfig::from_toml_str("[personalize]\nlr = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("[personalize]"), "{err}");
        let err = RunConfig::from_toml_str("[pretrain.blend]\nalpha_blend = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("[pretrain]"), "{err}");
        let err = RunConfig::from_toml_str("[eval]\nn_concepts = 50\n").unwrap_err();
        assert!(err.to_string().contains("[eval]"), "{err}");
    }

    #[test]
    fn missing_file_is_not_found() {
        let r = RunConfig::load(Path::new("/definitely/not/here.toml"));
        assert!(matches!(r, Err(Error::NotFound(_))));
    }
}
