//! Orchestration shared by the command line and the acceptance suite:
//! cached pretraining runs, per-concept personalization, and paired
//! comparisons between tuning arms.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::checkpoint::Checkpoint;
use crate::encoder::{EncoderConfig, TuningEncoder};
use crate::error::{Error, Result};
use crate::evaluator::{run_eval, EvalReport, EvalSubject, ImageGrid, Scorer};
use crate::corpus::Context;
use crate::foundation::Foundation;
use crate::personalize::{PersonalizationState, PersonalizeConfig, TuneRecord};
use crate::pretrain::{run_pretraining, PretrainConfig, RunOptions, TrainReport};
use crate::token_space::ConceptEmbedding;

/// Directory of a pretraining run, keyed by everything that determines it.
pub fn pretrain_dir(root: &Path, f: &Foundation, enc: &EncoderConfig, pre: &PretrainConfig, seed: u64) -> PathBuf {
    let key = serde_json::to_vec(&(f.config.fingerprint(), enc, pre, seed)).expect("configs serialize");
    root.join(format!("encoder-{}", hex::encode(&Sha256::digest(&key)[..8])))
}

/// Pretrain an encoder, resuming (or simply reloading) a previous run of
/// the same configuration under `root`.
pub fn pretrain_cached(
    f: &Foundation,
    enc: &EncoderConfig,
    pre: &PretrainConfig,
    seed: u64,
    root: &Path,
) -> Result<(TuningEncoder, TrainReport)> {
    let dir = pretrain_dir(root, f, enc, pre, seed);
    let init = TuningEncoder::for_models(enc.clone(), f.frozen(), seed)?;
    run_pretraining(
        pre,
        &f.corpus,
        f.frozen(),
        init,
        RunOptions {
            out_dir: Some(&dir),
            resume: true,
            stop_at: None,
        },
    )
}

/// The encoder stored by a pretraining run in `dir`.
pub fn load_encoder(dir: &Path) -> Result<TuningEncoder> {
    let ckpt = dir.join(crate::pretrain::CHECKPOINT_DIR);
    if !ckpt.join(crate::checkpoint::MANIFEST_FILE).exists() {
        return Err(Error::NotFound(ckpt));
    }
    let mut encoder = crate::pretrain::PretrainState::read_from(&Checkpoint::load(&ckpt)?)?.encoder;
    encoder.params_mut().set_trainable(false);
    Ok(encoder)
}

/// The first `n` held-out concepts.
pub fn held_out_concepts(f: &Foundation, n: usize) -> Result<Vec<usize>> {
    let ids = &f.corpus.catalog.held_out;
    if ids.len() < n {
        return Err(Error::config(format!("asked for {n} held-out concepts, corpus has {}", ids.len())));
    }
    Ok(ids[..n].to_vec())
}

/// Encoder initialization for `concept` followed by the full tuning budget.
pub fn personalize_concept(
    f: &Foundation,
    encoder: &TuningEncoder,
    concept: usize,
    cfg: &PersonalizeConfig,
) -> Result<PersonalizationState> {
    let image = f.corpus.reference_image(concept).to_tensor()?;
    let mut state = PersonalizationState::init_from_encoder(encoder, &image, f.frozen(), cfg.clone())?;
    state.run(&f.denoiser, &f.corpus.dictionary)?;
    Ok(state)
}

/// Metrics of one (concept, seed) pair under one arm, averaged over prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub concept: usize,
    pub seed: u64,
    pub text_alignment: f64,
    pub identity_similarity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub label: String,
    pub pairs: Vec<PairScore>,
    pub report: EvalReport,
    pub tune_curves: Vec<Vec<TuneRecord>>,
}

impl ArmResult {
    pub fn mean_identity(&self) -> f64 {
        self.report.identity_similarity.mean
    }

    pub fn mean_text(&self) -> f64 {
        self.report.text_alignment.mean
    }
}

/// Which handle of a personalization run to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// The encoder's prediction, before any tuning step.
    EncoderOnly,
    /// After the full tuning budget.
    Tuned,
}

/// Personalize every `(concept, seed)` pair (the seed drives both the
/// refinement noise and the tuning draws) and evaluate the requested stages
/// on the prompt bank with that same seed.
pub fn run_arms(
    f: &Foundation,
    encoder: &TuningEncoder,
    concepts: &[usize],
    seeds: &[u64],
    cfg: &PersonalizeConfig,
    prompts: &[Context],
    sample_steps: usize,
    stages: &[Stage],
) -> Result<Vec<ArmResult>> {
    let scorer: &dyn Scorer = &f.scorer;
    let mut records: Vec<Vec<_>> = vec![Vec::new(); stages.len()];
    let mut pairs: Vec<Vec<PairScore>> = vec![Vec::new(); stages.len()];
    let mut curves = Vec::new();
    for &c in concepts {
        for &seed in seeds {
            let pcfg = PersonalizeConfig { seed, ..cfg.clone() };
            let image = f.corpus.reference_image(c).to_tensor()?;
            let mut state = PersonalizationState::init_from_encoder(encoder, &image, f.frozen(), pcfg)?;
            for (k, stage) in stages.iter().enumerate() {
                if *stage == Stage::Tuned {
                    state.run(&f.denoiser, &f.corpus.dictionary)?;
                }
                let subject = EvalSubject {
                    concept: c,
                    handle: state.finalize(&f.denoiser, &f.corpus.dictionary)?,
                    concept_image: f.corpus.reference_image(c).clone(),
                };
                let (rep, _) = run_eval(std::slice::from_ref(&subject), prompts, &[seed], sample_steps, scorer)?;
                pairs[k].push(PairScore {
                    concept: c,
                    seed,
                    text_alignment: rep.text_alignment.mean,
                    identity_similarity: rep.identity_similarity.mean,
                });
                records[k].extend(rep.records);
            }
            curves.push(state.history().to_vec());
        }
    }
    Ok(stages
        .iter()
        .zip(records.into_iter().zip(pairs))
        .map(|(stage, (recs, pairs))| ArmResult {
            label: format!("{stage:?}"),
            pairs,
            report: EvalReport::from_records(recs),
            tune_curves: if *stage == Stage::Tuned { curves.clone() } else { Vec::new() },
        })
        .collect())
}

/// Images of every held-out subject for a grid render.
pub fn subject_grids(f: &Foundation, subjects: &[EvalSubject<'_>], prompts: &[Context], seeds: &[u64], steps: usize) -> Result<(EvalReport, Vec<ImageGrid>)> {
    run_eval(subjects, prompts, seeds, steps, &f.scorer)
}

/// One-sided paired t-test of `mean(after − before) > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
}

pub fn paired_t_test(before: &[f64], after: &[f64]) -> Result<PairedTest> {
    if before.len() != after.len() || before.len() < 2 {
        return Err(Error::invalid("paired test needs two equal-length samples of size >= 2"));
    }
    let n = before.len();
    let d: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let (t, p) = if se == 0.0 {
        let t = if mean > 0.0 { f64::INFINITY } else if mean < 0.0 { f64::NEG_INFINITY } else { 0.0 };
        (t, if mean > 0.0 { 0.0 } else if mean < 0.0 { 1.0 } else { 0.5 })
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
        (t, 1.0 - dist.cdf(t))
    };
    Ok(PairedTest {
        n,
        mean_diff: mean,
        t,
        p_value: p,
    })
}

/// Encoder predictions (after refinement) for each concept's reference image.
pub fn predicted_embeddings(f: &Foundation, encoder: &TuningEncoder, concepts: &[usize], seed: u64) -> Result<Vec<ConceptEmbedding>> {
    let prompt = crate::personalize::tuning_prompt(&f.corpus.dictionary, f.denoiser.config().seq_len)?;
    concepts
        .iter()
        .map(|&c| {
            let image = f.corpus.reference_image(c).to_tensor()?;
            let out = encoder.iterative_refine(
                &image,
                &prompt,
                encoder.config().refine_steps,
                seed,
                f.frozen(),
                crate::dual_path::BlendConfig::default(),
            )?;
            Ok(out.select(0)?.0)
        })
        .collect()
}
