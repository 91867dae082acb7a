//! Inference-time personalization: initialize `(v*, ΔW)` from the encoder for
//! one concept image, then take a few Adam steps on those two quantities only,
//! anchored to the initialization by an L2 penalty.

use std::fmt::Write as _;

use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Context, Image};
use crate::denoiser::{add_noise, diffusion_loss, sample, sample_with, DenoiserModel};
use crate::dual_path::{dual_forward, BlendConfig};
use crate::encoder::{FrozenModels, TuningEncoder};
use crate::error::{Error, Result};
use crate::lora::{merge_offsets, offsets_distance_sq, LoraOffsetSet};
use crate::nn::{scalar_f64, Adam, AdamConfig, Rng};
use crate::token_space::{harden_prompt, nearest_tokens, soft_condition, ConceptEmbedding, Prompt, TokenDictionary, PLACEHOLDER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeConfig {
    pub max_steps: usize,
    pub lr: f64,
    pub mu_v: f64,
    pub mu_w: f64,
    /// Noise draws per step; fixed for the lifetime of a state.
    pub batch_size: usize,
    pub blend: BlendConfig,
    pub seed: u64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            max_steps: 12,
            lr: 2e-3,
            mu_v: 0.1,
            mu_w: 0.1,
            batch_size: 4,
            blend: BlendConfig::default(),
            seed: 0,
        }
    }
}

impl PersonalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("personalization lr must be positive"));
        }
        if !(self.mu_v >= 0.0 && self.mu_w >= 0.0) {
            return Err(Error::config("anchor weights must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("personalization batch_size must be positive"));
        }
        self.blend.validate()
    }
}

/// The prompt used while tuning.
pub fn tuning_prompt(dict: &TokenDictionary, seq_len: usize) -> Result<Prompt> {
    Prompt::parse(&Context::Plain.fill(PLACEHOLDER), dict, seq_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub step: usize,
    pub l_diff: f64,
    pub anchor: f64,
    pub total: f64,
}

pub const TUNE_HEADER: &str = "step,l_diff,anchor,total";

pub fn tune_csv(records: &[TuneRecord]) -> String {
    let mut s = format!("{TUNE_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{},{:?},{:?},{:?}", r.step, r.l_diff, r.anchor, r.total);
    }
    s
}

pub struct PersonalizationState {
    config: PersonalizeConfig,
    v_init: Tensor,
    offsets_init: LoraOffsetSet,
    v_cur: Var,
    offsets_cur: LoraOffsetSet,
    opt: Adam,
    /// `(var, init value, anchor weight)` for every tuned tensor.
    anchored: Vec<(Var, Tensor, f64)>,
    step_count: usize,
    image: Tensor,
    prompt: Prompt,
    t: Vec<usize>,
    eps: Tensor,
    history: Vec<TuneRecord>,
}

impl PersonalizationState {
    /// Start from an explicit `(v*, ΔW)`; `image` is `1 × 3 × S × S`.
    pub fn new(
        v: &ConceptEmbedding,
        offsets: &LoraOffsetSet,
        image: &Tensor,
        model: &DenoiserModel,
        dict: &TokenDictionary,
        config: PersonalizeConfig,
    ) -> Result<Self> {
        config.validate()?;
        if offsets.batch().is_some() {
            return Err(Error::invalid("personalization takes an unbatched offset set"));
        }
        model.check_offsets(offsets)?;
        let (n, ..) = image.dims4()?;
        if n != 1 {
            return Err(Error::invalid("personalization takes exactly one concept image"));
        }
        let v_init = v.to_tensor()?.unsqueeze(0)?;
        let offsets_init = offsets.deep_clone()?.detach();
        let v_cur = Var::from_tensor(&v_init.copy()?)?;
        let (offsets_cur, mut vars) = offsets_init.to_vars()?;
        let mut anchored = vec![(v_cur.clone(), v_init.clone(), config.mu_v)];
        for o in offsets_init.iter() {
            anchored.push((vars[&format!("{}.a", o.layer_name)].clone(), o.a.clone(), config.mu_w));
            anchored.push((vars[&format!("{}.b", o.layer_name)].clone(), o.b.clone(), config.mu_w));
        }
        vars.insert("v".to_string(), v_cur.clone());
        let opt = Adam::new(vars, AdamConfig::default())?;

        let b = config.batch_size;
        let timesteps = model.config().timesteps;
        let mut rng = Rng::derive(config.seed, "personalize");
        // One timestep per stratum so a small batch still covers the schedule.
        let t = (0..b).map(|j| ((j as f64 + rng.uniform()) * timesteps as f64 / b as f64) as usize).map(|t| t.min(timesteps - 1)).collect();
        let image = image.repeat((b, 1, 1, 1))?;
        let eps = rng.normal_tensor(image.dims(), 1.0, &Device::Cpu)?;
        Ok(Self {
            prompt: tuning_prompt(dict, model.config().seq_len)?,
            config,
            v_init,
            offsets_init,
            v_cur,
            offsets_cur,
            opt,
            anchored,
            step_count: 0,
            image,
            t,
            eps,
            history: Vec::new(),
        })
    }

    /// Run the encoder's refinement once and seed both slots with its output.
    pub fn init_from_encoder(
        encoder: &TuningEncoder,
        image: &Tensor,
        frozen: FrozenModels<'_>,
        config: PersonalizeConfig,
    ) -> Result<Self> {
        let prompt = tuning_prompt(frozen.dict, frozen.denoiser.config().seq_len)?;
        let out = encoder.iterative_refine(
            image,
            &prompt,
            encoder.config().refine_steps,
            config.seed,
            frozen,
            config.blend,
        )?;
        let (v, offsets) = out.select(0)?;
        Self::new(&v, &offsets, image, frozen.denoiser, frozen.dict, config)
    }

    pub fn config(&self) -> &PersonalizeConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn history(&self) -> &[TuneRecord] {
        &self.history
    }

    pub fn v_init(&self) -> Result<ConceptEmbedding> {
        ConceptEmbedding::from_tensor(&self.v_init.squeeze(0)?)
    }

    pub fn v_cur(&self) -> Result<ConceptEmbedding> {
        ConceptEmbedding::from_tensor(&self.v_cur.as_tensor().squeeze(0)?)
    }

    pub fn offsets_init(&self) -> &LoraOffsetSet {
        &self.offsets_init
    }

    /// Detached copy of the tuned offsets.
    pub fn offsets_cur(&self) -> Result<LoraOffsetSet> {
        Ok(self.offsets_cur.deep_clone()?.detach())
    }

    fn anchor(&self) -> Result<Tensor> {
        let dv = self.v_cur.as_tensor().sub(&self.v_init)?.sqr()?.sum_all()?;
        let dw = offsets_distance_sq(&self.offsets_cur, &self.offsets_init)?;
        Ok(dv.affine(self.config.mu_v, 0.0)?.add(&dw.affine(self.config.mu_w, 0.0)?)?)
    }

    pub fn anchor_penalty(&self) -> Result<f64> {
        scalar_f64(&self.anchor()?)
    }

    fn diffusion_term(&self, model: &DenoiserModel, dict: &TokenDictionary) -> Result<Tensor> {
        let b = self.config.batch_size;
        let schedule = model.config().schedule()?;
        let z_t = add_noise(&self.image, &self.t, &self.eps, &schedule)?;
        let prompts = vec![self.prompt.clone(); b];
        let v = self.v_cur.as_tensor().repeat((b, 1))?;
        let eps_hat = dual_forward(model, &z_t, &self.t, &prompts, &v, Some(&self.offsets_cur), dict, self.config.blend)?;
        diffusion_loss(&eps_hat, &self.eps)
    }

    /// Diffusion loss of the current parameters on this state's fixed draws.
    pub fn diffusion_loss(&self, model: &DenoiserModel, dict: &TokenDictionary) -> Result<f64> {
        scalar_f64(&self.diffusion_term(model, dict)?)
    }

    /// One step on `(v_cur, offsets_cur)`: Adam on the diffusion loss, then
    /// the exact proximal step of the quadratic anchor, which pulls each
    /// tensor toward its initialization by `1 / (1 + 2·lr·mu)`. (Adam alone
    /// is invariant to the gradient's scale, so an anchor folded into its
    /// gradient stops acting once it dominates.) The record holds the losses
    /// before the update.
    pub fn tuning_step(&mut self, model: &DenoiserModel, dict: &TokenDictionary) -> Result<TuneRecord> {
        if self.step_count >= self.config.max_steps {
            return Err(Error::StateExhausted(self.config.max_steps));
        }
        let l_diff = self.diffusion_term(model, dict)?;
        let anchor = self.anchor_penalty()?;
        let l = scalar_f64(&l_diff)?;
        let record = TuneRecord {
            step: self.step_count,
            l_diff: l,
            anchor,
            total: l + anchor,
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step_count,
                detail: format!("{record:?}"),
            });
        }
        let grads = l_diff.backward()?;
        self.opt.step(&grads, self.config.lr)?;
        for (var, init, mu) in &self.anchored {
            if *mu > 0.0 {
                let shrink = 1.0 / (1.0 + 2.0 * self.config.lr * mu);
                var.set(&init.add(&var.as_tensor().sub(init)?.affine(shrink, 0.0)?)?)?;
            }
        }
        self.step_count += 1;
        self.history.push(record);
        Ok(record)
    }

    /// Run the remaining budget.
    pub fn run(&mut self, model: &DenoiserModel, dict: &TokenDictionary) -> Result<&[TuneRecord]> {
        while self.step_count < self.config.max_steps {
            self.tuning_step(model, dict)?;
        }
        Ok(&self.history)
    }

    pub fn finalize<'a>(&self, model: &'a DenoiserModel, dict: &'a TokenDictionary) -> Result<PersonalizedHandle<'a>> {
        PersonalizedHandle::new(model, dict, self.v_cur()?, self.offsets_cur()?, self.config.blend)
    }
}

/// Everything needed to generate a personalized concept.
#[derive(Clone)]
pub struct PersonalizedHandle<'a> {
    pub model: &'a DenoiserModel,
    pub dict: &'a TokenDictionary,
    pub v: ConceptEmbedding,
    pub offsets: LoraOffsetSet,
    /// Dictionary id the hard branch substitutes for the placeholder.
    pub hard_token: usize,
    pub blend: BlendConfig,
}

impl<'a> PersonalizedHandle<'a> {
    pub fn new(
        model: &'a DenoiserModel,
        dict: &'a TokenDictionary,
        v: ConceptEmbedding,
        offsets: LoraOffsetSet,
        blend: BlendConfig,
    ) -> Result<Self> {
        model.check_offsets(&offsets)?;
        let hard_token = nearest_tokens(v.as_slice(), dict, 1)?.token_ids[0];
        Ok(Self {
            model,
            dict,
            v,
            offsets,
            hard_token,
            blend,
        })
    }

    pub fn hardened(&self, prompt: &Prompt) -> Result<Prompt> {
        harden_prompt(prompt, &self.v, self.dict)
    }

    /// One image per seed for `prompt`, through the blended forward.
    pub fn generate(&self, prompt: &Prompt, steps: usize, seeds: &[u64]) -> Result<Vec<Image>> {
        self.generate_rows(&vec![prompt.clone(); seeds.len()], steps, seeds)
    }

    /// One image per `(prompt, seed)` row, sampled as a single batch. Each
    /// row's noise depends only on its seed, so batching does not change it.
    pub fn generate_rows(&self, prompts: &[Prompt], steps: usize, seeds: &[u64]) -> Result<Vec<Image>> {
        if prompts.len() != seeds.len() {
            return Err(Error::invalid("one prompt per seed expected"));
        }
        let cfg = self.model.config();
        let b = seeds.len();
        let v = self.v.to_tensor()?.unsqueeze(0)?.repeat((b, 1))?;
        let x = sample_with(
            |z, t| dual_forward(self.model, z, t, prompts, &v, Some(&self.offsets), self.dict, self.blend),
            (b, cfg.channels, cfg.image_size, cfg.image_size),
            &cfg.schedule()?,
            steps,
            seeds,
        )?;
        (0..b).map(|i| Image::from_tensor(&x.get(i)?)).collect()
    }

    /// The base model with the offsets folded into its weights.
    pub fn merged(&self) -> Result<DenoiserModel> {
        merge_offsets(self.model, &self.offsets)
    }

    /// Sampling a merged model with the soft prompt alone (no hard branch).
    pub fn generate_merged(merged: &DenoiserModel, dict: &TokenDictionary, v: &ConceptEmbedding, prompt: &Prompt, steps: usize, seeds: &[u64]) -> Result<Vec<Image>> {
        let b = seeds.len();
        let v = v.to_tensor()?.unsqueeze(0)?.repeat((b, 1))?;
        let cond = soft_condition(&vec![prompt.clone(); b], &v, dict)?;
        let x = sample(merged, &cond, None, steps, seeds)?;
        (0..b).map(|i| Image::from_tensor(&x.get(i)?)).collect()
    }

    /// Personalization slots only; pair with the model and dictionary to load.
    pub fn write_to(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.put_tensor("personal/v", &self.v.to_tensor()?)?;
        self.offsets.write_to(ckpt, "personal_offsets")?;
        ckpt.set_meta("personal.blend", &self.blend)?;
        ckpt.set_meta("personal.hard_token", &self.dict.label(self.hard_token))
    }

    pub fn read_from(ckpt: &Checkpoint, model: &'a DenoiserModel, dict: &'a TokenDictionary) -> Result<Self> {
        let v = ConceptEmbedding::from_tensor(&ckpt.tensor("personal/v")?)?;
        let offsets = LoraOffsetSet::read_from(ckpt, "personal_offsets", model.attention_projections())?;
        Self::new(model, dict, v, offsets, ckpt.meta("personal.blend")?)
    }
}
