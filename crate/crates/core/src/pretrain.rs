//! Encoder pretraining: each step draws distinct training concepts, noises a
//! random view of each, predicts `(v*, ΔW)` from the concept's reference image
//! and the noisy view, runs the (dual-path) denoiser and minimises the
//! diffusion loss plus the embedding and offset regularizers.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_file_atomic, Checkpoint};
use crate::corpus::{images_to_tensor, Corpus};
use crate::denoiser::{add_noise, diffusion_loss};
use crate::dual_path::{dual_forward, BlendConfig};
use crate::encoder::{extract_features, FrozenModels, TuningEncoder};
use crate::error::{Error, Result};
use crate::lora::offsets_l2;
use crate::nn::{flat_f32, scalar_f64, warmup_cosine, Adam, AdamConfig, Rng, RngState};
use crate::regularization::{contrastive_loss_batch, embedding_l2_batch, nn_cosine_loss, ContrastiveConfig};
use crate::token_space::{soft_condition, Prompt};

/// The embedding-regularization variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerVariant {
    None,
    L2Only,
    NnCosine,
    Contrastive,
}

impl RegularizerVariant {
    pub const ALL: [RegularizerVariant; 4] = [Self::None, Self::L2Only, Self::NnCosine, Self::Contrastive];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::L2Only => "l2-only",
            Self::NnCosine => "nn-cosine",
            Self::Contrastive => "contrastive",
        }
    }

    /// Copy of `cfg` with the embedding-regularizer weights of this variant.
    /// The offset penalty is left as configured.
    pub fn apply(self, cfg: &PretrainConfig) -> PretrainConfig {
        let mut out = cfg.clone();
        // An unset nearest-token weight borrows the contrastive one.
        let nn = if cfg.lambda_nn_cosine > 0.0 { cfg.lambda_nn_cosine } else { cfg.lambda_contrastive };
        let (l2, c) = (cfg.lambda_embed_l2, cfg.lambda_contrastive);
        (out.lambda_embed_l2, out.lambda_nn_cosine, out.lambda_contrastive) = match self {
            Self::None => (0.0, 0.0, 0.0),
            Self::L2Only => (l2, 0.0, 0.0),
            Self::NnCosine => (l2, nn, 0.0),
            Self::Contrastive => (l2, 0.0, c),
        };
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lambda_contrastive: f64,
    pub lambda_embed_l2: f64,
    pub lambda_offsets_l2: f64,
    /// Weight of the nearest-token cosine pull (ablation only).
    pub lambda_nn_cosine: f64,
    pub blend: BlendConfig,
    pub contrastive: ContrastiveConfig,
    /// Use the blended two-branch forward for the diffusion loss.
    pub dual_path: bool,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            warmup_steps: 250,
            total_steps: 5000,
            batch_size: 8,
            lambda_contrastive: 0.01,
            lambda_embed_l2: 0.001,
            lambda_offsets_l2: 0.01,
            lambda_nn_cosine: 0.0,
            blend: BlendConfig::default(),
            contrastive: ContrastiveConfig::default(),
            dual_path: true,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config("warmup_steps must be smaller than a positive total_steps"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be positive"));
        }
        let lambdas = [
            self.lambda_contrastive,
            self.lambda_embed_l2,
            self.lambda_offsets_l2,
            self.lambda_nn_cosine,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        if self.batch_size == 0 || (self.lambda_contrastive > 0.0 && self.batch_size < 2) {
            return Err(Error::config("batch_size must be at least 2 when the contrastive loss is on"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        self.blend.validate()
    }
}

/// Linear warm-up then cosine decay; clamps to 0 past `total_steps`.
pub fn lr_at(step: usize, cfg: &PretrainConfig) -> f64 {
    warmup_cosine(step, cfg.base_lr, cfg.warmup_steps, cfg.total_steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_diff: f64,
    pub l_c: f64,
    pub l_e: f64,
    pub l_w: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

pub const REPORT_HEADER: &str = "step,l_diff,l_c,l_e,l_w,lr";

impl TrainReport {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.records {
            // `{:?}` on f64 round-trips exactly.
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?},{:?}", r.step, r.l_diff, r.l_c, r.l_e, r.l_w, r.lr);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Format("train report has an unexpected header".into()));
        }
        let records = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || Error::Format(format!("bad report row '{l}'"));
                if f.len() != 6 {
                    return Err(bad());
                }
                let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
                Ok(StepRecord {
                    step: f[0].parse().map_err(|_| bad())?,
                    l_diff: num(1)?,
                    l_c: num(2)?,
                    l_e: num(3)?,
                    l_w: num(4)?,
                    lr: num(5)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// One pretraining micro-batch.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub concept_images: Tensor,
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: Vec<usize>,
    pub prompts: Vec<Prompt>,
    pub concepts: Vec<usize>,
}

/// Distinct training concepts, one random view each as target, the concept's
/// reference image as encoder input, a uniform timestep and fresh noise.
pub fn draw_batch(corpus: &Corpus, concepts: &[usize], batch: usize, seq_len: usize, timesteps: usize, rng: &mut Rng) -> Result<PretrainBatch> {
    if concepts.is_empty() {
        return Err(Error::config("no training concepts"));
    }
    let mut pool = concepts.to_vec();
    rng.shuffle(&mut pool);
    let chosen: Vec<usize> = (0..batch).map(|i| pool[i % pool.len()]).collect();
    let mut targets = Vec::with_capacity(batch);
    let mut prompts = Vec::with_capacity(batch);
    for &c in &chosen {
        let views = corpus.sample_ids_for(&[c]);
        let s = &corpus.samples[views[rng.below(views.len())]];
        targets.push(&s.image);
        prompts.push(corpus.placeholder_prompt(s.context, seq_len)?);
    }
    let refs: Vec<_> = chosen.iter().map(|&c| corpus.reference_image(c)).collect();
    let x0 = images_to_tensor(&targets)?;
    let t = (0..batch).map(|_| rng.below(timesteps)).collect();
    let eps = rng.normal_tensor(x0.dims(), 1.0, &Device::Cpu)?;
    Ok(PretrainBatch {
        concept_images: images_to_tensor(&refs)?,
        x0,
        eps,
        t,
        prompts,
        concepts: chosen,
    })
}

#[derive(Debug, Clone)]
pub struct StepLosses {
    pub total: Tensor,
    pub l_diff: f64,
    pub l_c: f64,
    pub l_e: f64,
    pub l_w: f64,
    pub l_nn: f64,
}

/// Forward pass and all loss components for one batch (no update).
pub fn batch_losses(
    encoder: &TuningEncoder,
    batch: &PretrainBatch,
    frozen: FrozenModels<'_>,
    cfg: &PretrainConfig,
) -> Result<StepLosses> {
    let model = frozen.denoiser;
    let schedule = model.config().schedule()?;
    let b = batch.prompts.len();
    let z_t = add_noise(&batch.x0, &batch.t, &batch.eps, &schedule)?;
    let bundle = extract_features(&batch.concept_images, &z_t, &batch.t, frozen, encoder.config().grid)?;
    let out = encoder.predict(&bundle)?;
    if !flat_f32(&out.v_star)?.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            detail: "encoder produced a non-finite embedding".into(),
        });
    }
    let eps_hat = if cfg.dual_path {
        dual_forward(model, &z_t, &batch.t, &batch.prompts, &out.v_star, Some(&out.offsets), frozen.dict, cfg.blend)?
    } else {
        let cond = soft_condition(&batch.prompts, &out.v_star, frozen.dict)?;
        model.predict_noise(&z_t, &batch.t, &cond, Some(&out.offsets))?
    };
    let l_diff = diffusion_loss(&eps_hat, &batch.eps)?;
    let l_c = if b >= 2 {
        contrastive_loss_batch(&out.v_star, frozen.dict, &cfg.contrastive)?
    } else {
        l_diff.zeros_like()?
    };
    let l_e = embedding_l2_batch(&out.v_star)?;
    let l_w = offsets_l2(&out.offsets)?.affine(1.0 / b as f64, 0.0)?;
    let mut total = l_diff
        .add(&l_c.affine(cfg.lambda_contrastive, 0.0)?)?
        .add(&l_e.affine(cfg.lambda_embed_l2, 0.0)?)?
        .add(&l_w.affine(cfg.lambda_offsets_l2, 0.0)?)?;
    let mut l_nn_value = 0.0;
    if cfg.lambda_nn_cosine > 0.0 {
        let l_nn = nn_cosine_loss(&out.v_star, frozen.dict)?;
        l_nn_value = scalar_f64(&l_nn)?;
        total = total.add(&l_nn.affine(cfg.lambda_nn_cosine, 0.0)?)?;
    }
    Ok(StepLosses {
        l_diff: scalar_f64(&l_diff)?,
        l_c: scalar_f64(&l_c)?,
        l_e: scalar_f64(&l_e)?,
        l_w: scalar_f64(&l_w)?,
        l_nn: l_nn_value,
        total,
    })
}

/// Trainable encoder, optimizer and data stream.
pub struct PretrainState {
    pub encoder: TuningEncoder,
    pub opt: Adam,
    pub rng: Rng,
    pub step: usize,
    pub report: TrainReport,
}

impl PretrainState {
    pub fn new(mut encoder: TuningEncoder, cfg: &PretrainConfig) -> Result<Self> {
        encoder.params_mut().set_trainable(true);
        let opt = Adam::new(encoder.params().vars().clone(), AdamConfig::default())?;
        Ok(Self {
            encoder,
            opt,
            rng: Rng::derive(cfg.seed, "pretrain"),
            step: 0,
            report: TrainReport::default(),
        })
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.encoder.write_to(ckpt)?;
        let (steps, moments) = self.opt.export();
        for (name, m, v) in &moments {
            ckpt.put_tensor(format!("adam.m/{name}"), m)?;
            ckpt.put_tensor(format!("adam.v/{name}"), v)?;
        }
        ckpt.set_meta("adam.steps", &steps)?;
        ckpt.set_meta("pretrain.rng", &self.rng.state())?;
        ckpt.set_meta("pretrain.step", &self.step)?;
        ckpt.put_sidecar("train_report.json", &self.report)
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let mut encoder = TuningEncoder::read_from(ckpt)?;
        encoder.params_mut().set_trainable(true);
        let mut opt = Adam::new(encoder.params().vars().clone(), AdamConfig::default())?;
        let names: Vec<String> = encoder.params().names().map(String::from).collect();
        let moments = names
            .into_iter()
            .map(|n| {
                let m = ckpt.tensor(&format!("adam.m/{n}"))?;
                let v = ckpt.tensor(&format!("adam.v/{n}"))?;
                Ok((n, m, v))
            })
            .collect::<Result<Vec<_>>>()?;
        opt.restore(ckpt.meta("adam.steps")?, moments)?;
        let rng: RngState = ckpt.meta("pretrain.rng")?;
        Ok(Self {
            encoder,
            opt,
            rng: Rng::from_state(rng),
            step: ckpt.meta("pretrain.step")?,
            report: ckpt.sidecar("train_report.json")?,
        })
    }
}

/// One optimizer step on the encoder; returns the logged record.
pub fn pretrain_step(
    state: &mut PretrainState,
    batch: &PretrainBatch,
    frozen: FrozenModels<'_>,
    cfg: &PretrainConfig,
) -> Result<StepRecord> {
    let losses = batch_losses(&state.encoder, batch, frozen, cfg).map_err(|e| match e {
        Error::NonFinite { detail, .. } => Error::NonFinite { step: state.step, detail },
        e => e,
    })?;
    let lr = lr_at(state.step, cfg);
    let record = StepRecord {
        step: state.step,
        l_diff: losses.l_diff,
        l_c: losses.l_c,
        l_e: losses.l_e,
        l_w: losses.l_w,
        lr,
    };
    let total = scalar_f64(&losses.total)?;
    if ![total, record.l_diff, record.l_c, record.l_e, record.l_w].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            step: state.step,
            detail: format!("{record:?}"),
        });
    }
    let grads = losses.total.backward()?;
    state.opt.step(&grads, lr)?;
    state.step += 1;
    state.report.records.push(record);
    Ok(record)
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPORT_CSV: &str = "train_report.csv";

/// Options controlling where a run persists and how far it goes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Directory for the rolling checkpoint and CSV report.
    pub out_dir: Option<&'a Path>,
    /// Continue from `out_dir/checkpoint` if present.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps have run in total.
    pub stop_at: Option<usize>,
}

/// Run (or continue) pretraining to `cfg.total_steps`.
pub fn run_pretraining(
    cfg: &PretrainConfig,
    corpus: &Corpus,
    frozen: FrozenModels<'_>,
    init: TuningEncoder,
    opts: RunOptions<'_>,
) -> Result<(TuningEncoder, TrainReport)> {
    cfg.validate()?;
    cfg.contrastive.validate(frozen.dict.len())?;
    let concepts = corpus.catalog.train_ids();
    if concepts.is_empty() || corpus.samples.is_empty() {
        return Err(Error::config("pretraining dataset is empty"));
    }
    let ckpt_dir = opts.out_dir.map(|d| d.join(CHECKPOINT_DIR));
    let mut state = match &ckpt_dir {
        Some(dir) if opts.resume && dir.join("manifest.json").exists() => {
            log::info!("resuming pretraining from {}", dir.display());
            PretrainState::read_from(&Checkpoint::load(dir)?)?
        }
        _ => PretrainState::new(init, cfg)?,
    };
    let seq_len = frozen.denoiser.config().seq_len;
    let timesteps = frozen.denoiser.config().timesteps;
    let end = opts.stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let save = |state: &PretrainState| -> Result<()> {
        if let (Some(dir), Some(out)) = (&ckpt_dir, opts.out_dir) {
            let mut c = Checkpoint::new();
            state.write_to(&mut c)?;
            c.save(dir)?;
            write_file_atomic(&out.join(REPORT_CSV), state.report.to_csv().as_bytes())?;
        }
        Ok(())
    };
    while state.step < end {
        let batch = draw_batch(corpus, &concepts, cfg.batch_size, seq_len, timesteps, &mut state.rng)?;
        let r = pretrain_step(&mut state, &batch, frozen, cfg)?;
        if r.step % 50 == 0 {
            log::info!(
                "pretrain step {} l_diff {:.4} l_c {:.4} l_e {:.4} l_w {:.2e} lr {:.2e}",
                r.step,
                r.l_diff,
                r.l_c,
                r.l_e,
                r.l_w,
                r.lr
            );
        }
        if state.step % cfg.checkpoint_every == 0 {
            save(&state)?;
        }
    }
    save(&state)?;
    let mut encoder = state.encoder;
    encoder.params_mut().set_trainable(false);
    Ok((encoder, state.report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::MicroWorld;

    fn micro_cfg() -> PretrainConfig {
        PretrainConfig {
            base_lr: 1e-3,
            warmup_steps: 0,
            total_steps: 6,
            batch_size: 3,
            checkpoint_every: 2,
            ..PretrainConfig::default()
        }
    }

    fn batch(w: &MicroWorld, seed: u64, b: usize) -> PretrainBatch {
        let cfg = w.denoiser.config();
        draw_batch(&w.corpus, &w.corpus.catalog.train_ids(), b, cfg.seq_len, cfg.timesteps, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = PretrainConfig {
            base_lr: 1e-4,
            warmup_steps: 10,
            total_steps: 110,
            ..PretrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(5, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_at(10, &cfg) - 1e-4).abs() < 1e-18);
        // Halfway through the decay the cosine is at zero.
        assert!((lr_at(60, &cfg) - 5e-5).abs() < 1e-15);
        assert!(lr_at(109, &cfg) > 0.0);
        assert_eq!(lr_at(110, &cfg), 0.0);
        assert_eq!(lr_at(10_000, &cfg), 0.0);
        let mut prev = f64::INFINITY;
        for s in 10..110 {
            let lr = lr_at(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(PretrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut PretrainConfig)| {
            let mut c = PretrainConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.warmup_steps = c.total_steps));
        assert!(bad(|c| c.batch_size = 1));
        assert!(bad(|c| c.lambda_embed_l2 = -1.0));
        assert!(bad(|c| c.base_lr = 0.0));
        assert!(bad(|c| c.blend.alpha_blend = 1.5));
        let mut single = PretrainConfig {
            batch_size: 1,
            lambda_contrastive: 0.0,
            ..PretrainConfig::default()
        };
        assert!(single.validate().is_ok());
        single.lambda_contrastive = 0.01;
        assert!(single.validate().is_err());
    }

    #[test]
    fn variants_only_touch_embedding_weights() {
        let base = PretrainConfig::default();
        let w = |v: RegularizerVariant| {
            let c = v.apply(&base);
            assert_eq!(c.lambda_offsets_l2, base.lambda_offsets_l2);
            (c.lambda_embed_l2, c.lambda_nn_cosine, c.lambda_contrastive)
        };
        assert_eq!(w(RegularizerVariant::None), (0.0, 0.0, 0.0));
        assert_eq!(w(RegularizerVariant::L2Only), (0.001, 0.0, 0.0));
        assert_eq!(w(RegularizerVariant::NnCosine), (0.001, 0.01, 0.0));
        assert_eq!(w(RegularizerVariant::Contrastive), (0.001, 0.0, 0.01));
    }

    #[test]
    fn zero_weights_reduce_to_diffusion_loss() -> Result<()> {
        let w = MicroWorld::new(0);
        let enc = w.encoder(1);
        let cfg = PretrainConfig {
            lambda_contrastive: 0.0,
            lambda_embed_l2: 0.0,
            lambda_offsets_l2: 0.0,
            ..micro_cfg()
        };
        let l = batch_losses(&enc, &batch(&w, 3, 3), w.frozen(), &cfg)?;
        assert_eq!(scalar_f64(&l.total)?.to_bits(), l.l_diff.to_bits());
        assert!(l.l_c > 0.0 && l.l_e > 0.0);
        // B starts at zero, so the offset penalty does too.
        assert_eq!(l.l_w, 0.0);
        Ok(())
    }

    #[test]
    fn total_is_weighted_sum() -> Result<()> {
        let w = MicroWorld::new(0);
        let enc = w.encoder(1);
        let cfg = PretrainConfig {
            lambda_contrastive: 0.3,
            lambda_embed_l2: 0.2,
            lambda_offsets_l2: 0.1,
            lambda_nn_cosine: 0.05,
            ..micro_cfg()
        };
        let l = batch_losses(&enc, &batch(&w, 3, 3), w.frozen(), &cfg)?;
        let expect = l.l_diff + 0.3 * l.l_c + 0.2 * l.l_e + 0.1 * l.l_w + 0.05 * l.l_nn;
        assert!((scalar_f64(&l.total)? - expect).abs() < 1e-5 * expect.abs().max(1.0));
        assert!(l.l_nn > 0.0);
        Ok(())
    }

    #[test]
    fn one_step_lowers_loss_on_its_batch() -> Result<()> {
        let w = MicroWorld::new(0);
        let cfg = micro_cfg();
        let mut state = PretrainState::new(w.encoder(1), &cfg)?;
        let b = batch(&w, 5, 3);
        let before = scalar_f64(&batch_losses(&state.encoder, &b, w.frozen(), &cfg)?.total)?;
        let rec = pretrain_step(&mut state, &b, w.frozen(), &cfg)?;
        let after = scalar_f64(&batch_losses(&state.encoder, &b, w.frozen(), &cfg)?.total)?;
        assert!(after < before, "{before} -> {after}");
        assert_eq!(rec.step, 0);
        assert_eq!(state.step, 1);
        assert_eq!(state.report.len(), 1);
        Ok(())
    }

    #[test]
    fn frozen_models_are_untouched() -> Result<()> {
        let w = MicroWorld::new(0);
        let sums = (w.backbone.checksum()?, w.denoiser.checksum()?, w.corpus.dictionary.tensor().sum_all()?.to_scalar::<f32>()?);
        let (enc, report) = run_pretraining(&micro_cfg(), &w.corpus, w.frozen(), w.encoder(1), RunOptions::default())?;
        assert_eq!(report.len(), 6);
        assert_ne!(enc.params().checksum()?, w.encoder(1).params().checksum()?);
        assert_eq!(
            sums,
            (w.backbone.checksum()?, w.denoiser.checksum()?, w.corpus.dictionary.tensor().sum_all()?.to_scalar::<f32>()?)
        );
        Ok(())
    }

    #[test]
    fn resume_matches_uninterrupted_run() -> Result<()> {
        let w = MicroWorld::new(0);
        let cfg = micro_cfg();
        let straight = tempfile::tempdir().unwrap();
        let (a, ra) = run_pretraining(
            &cfg,
            &w.corpus,
            w.frozen(),
            w.encoder(1),
            RunOptions {
                out_dir: Some(straight.path()),
                ..RunOptions::default()
            },
        )?;
        let split = tempfile::tempdir().unwrap();
        let opts = |stop_at| RunOptions {
            out_dir: Some(split.path()),
            resume: true,
            stop_at,
        };
        let (_, partial) = run_pretraining(&cfg, &w.corpus, w.frozen(), w.encoder(1), opts(Some(3)))?;
        assert_eq!(partial.len(), 3);
        // A different initial encoder proves the checkpoint, not the argument, is used.
        let (b, rb) = run_pretraining(&cfg, &w.corpus, w.frozen(), w.encoder(99), opts(None))?;
        assert_eq!(ra, rb);
        assert_eq!(a.params().checksum()?, b.params().checksum()?);
        let csv = std::fs::read_to_string(split.path().join(REPORT_CSV)).unwrap();
        assert_eq!(TrainReport::from_csv(&csv)?, rb);
        Ok(())
    }

    #[test]
    fn same_seed_same_run() -> Result<()> {
        let w = MicroWorld::new(0);
        let mut cfg = micro_cfg();
        cfg.total_steps = 2;
        let run = |cfg: &PretrainConfig| run_pretraining(cfg, &w.corpus, w.frozen(), w.encoder(1), RunOptions::default());
        let (a, ra) = run(&cfg)?;
        let (b, rb) = run(&cfg)?;
        assert_eq!(ra, rb);
        assert_eq!(a.params().checksum()?, b.params().checksum()?);
        cfg.seed = 1;
        assert_ne!(run(&cfg)?.1, ra);
        Ok(())
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let mut w = MicroWorld::new(0);
        w.corpus.catalog.held_out = (0..w.corpus.catalog.len()).collect();
        let enc = w.encoder(1);
        let r = run_pretraining(&micro_cfg(), &w.corpus, w.frozen(), enc, RunOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_aborts() -> Result<()> {
        let w = MicroWorld::new(0);
        let cfg = micro_cfg();
        let mut state = PretrainState::new(w.encoder(1), &cfg)?;
        let mut b = batch(&w, 5, 3);
        b.x0 = b.x0.affine(f64::NAN, 0.0)?;
        let err = pretrain_step(&mut state, &b, w.frozen(), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
        assert_eq!(state.step, 0);
        assert!(state.report.is_empty());
        Ok(())
    }

    #[test]
    fn batches_use_distinct_training_concepts() {
        let w = MicroWorld::new(0);
        for seed in 0..10 {
            let b = batch(&w, seed, 4);
            let mut c = b.concepts.clone();
            c.sort();
            c.dedup();
            assert_eq!(c.len(), 4);
            assert!(b.concepts.iter().all(|&i| !w.corpus.catalog.is_held_out(i)));
            assert!(b.prompts.iter().all(|p| p.placeholder().is_some()));
            assert!(b.t.iter().all(|&t| t < w.denoiser.config().timesteps));
        }
    }

    #[test]
    fn report_csv_round_trip() -> Result<()> {
        let r = TrainReport {
            records: vec![
                StepRecord { step: 0, l_diff: 1.0 / 3.0, l_c: 0.1, l_e: 1e-9, l_w: 0.0, lr: 1e-4 },
                StepRecord { step: 1, l_diff: 0.25, l_c: 0.2, l_e: 2.0, l_w: 3.5e-7, lr: 9.9e-5 },
            ],
        };
        let csv = r.to_csv();
        assert!(csv.starts_with("step,l_diff,l_c,l_e,l_w,lr\n"));
        assert_eq!(TrainReport::from_csv(&csv)?, r);
        assert!(TrainReport::from_csv("step,loss\n").is_err());
        assert!(TrainReport::from_csv(&format!("{REPORT_HEADER}\n1,2,3\n")).is_err());
        Ok(())
    }
}
