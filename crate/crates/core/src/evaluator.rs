//! Evaluation: a frozen two-tower image/text scorer trained contrastively on
//! the corpus acts as the judge for text alignment and identity similarity;
//! reports, image grids and ablation tables are assembled here.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_file_atomic, Checkpoint};
use crate::corpus::{encode_png_rgb, images_to_tensor, Context, Corpus, Image};
use crate::error::{Error, Result};
use crate::nn::{conv2d, cross_entropy, flat_f32, init_conv, init_linear, linear, warmup_cosine, Adam, AdamConfig, ParamTable, Rng};
use crate::personalize::PersonalizedHandle;
use crate::token_space::{cosine, nearest_tokens, ConceptEmbedding, Prompt, TokenDictionary, NULL_TOKEN, PLACEHOLDER};

/// Anything that embeds images and prompts into one space.
pub trait Scorer {
    fn embed_images(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

/// Mean cosine between each row of `embeddings` and `target`.
pub fn mean_cosine(embeddings: &[Vec<f32>], target: &[f32]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::invalid("no embeddings to score"));
    }
    Ok(embeddings.iter().map(|e| cosine(e, target)).sum::<f64>() / embeddings.len() as f64)
}

/// Mean cosine over all pairs `(a_i, b_j)`.
pub fn mean_pairwise_cosine(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("no embeddings to score"));
    }
    let total: f64 = a.iter().flat_map(|x| b.iter().map(move |y| cosine(x, y))).sum();
    Ok(total / (a.len() * b.len()) as f64)
}

pub fn text_alignment(images: &[&Image], text: &str, scorer: &dyn Scorer) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("text alignment of an empty image set"));
    }
    mean_cosine(&scorer.embed_images(images)?, &scorer.embed_text(text)?)
}

pub fn identity_similarity(generated: &[&Image], concept_images: &[&Image], scorer: &dyn Scorer) -> Result<f64> {
    if generated.is_empty() || concept_images.is_empty() {
        return Err(Error::invalid("identity similarity of an empty image set"));
    }
    mean_pairwise_cosine(&scorer.embed_images(generated)?, &scorer.embed_images(concept_images)?)
}

// ---------------------------------------------------------------------------
// Two-tower scorer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub widths: [usize; 3],
    pub token_dim: usize,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            token_dim: 32,
            embed_dim: 32,
            seq_len: 10,
            temperature: 0.1,
            steps: 400,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.token_dim == 0 || self.embed_dim == 0 || self.seq_len == 0 {
            return Err(Error::config("scorer sizes must be positive"));
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) || self.batch_size < 2 {
            return Err(Error::config("scorer needs temperature > 0, lr > 0 and batch_size >= 2"));
        }
        Ok(())
    }
}

/// Image conv tower and bag-of-tokens text tower, both ending in a unit vector.
#[derive(Debug, Clone)]
pub struct TwoTowerScorer {
    config: ScorerConfig,
    params: ParamTable,
    dict: TokenDictionary,
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.affine(1.0, 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

impl TwoTowerScorer {
    pub fn new(config: ScorerConfig, dict: &TokenDictionary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, "scorer-init");
        let mut p = ParamTable::new();
        let [c1, c2, c3] = config.widths;
        init_conv(&mut p, &mut rng, "image.conv1", 3, c1, 3, 1.0)?;
        init_conv(&mut p, &mut rng, "image.conv2", c1, c2, 3, 1.0)?;
        init_conv(&mut p, &mut rng, "image.conv3", c2, c3, 3, 1.0)?;
        init_linear(&mut p, &mut rng, "image.proj", c3, config.embed_dim, true)?;
        p.insert(
            "text.tokens",
            rng.normal_tensor(&[dict.len(), config.token_dim], 0.5, &Device::Cpu)?,
        )?;
        init_linear(&mut p, &mut rng, "text.proj", config.token_dim, config.embed_dim, true)?;
        p.set_trainable(false);
        Ok(Self {
            config,
            params: p,
            dict: dict.clone(),
        })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn image_tower(&self, images: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let h = conv2d(p, "image.conv1", images, 1)?.silu()?;
        let h = conv2d(p, "image.conv2", &h, 2)?.silu()?;
        let h = conv2d(p, "image.conv3", &h, 2)?.silu()?;
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        l2_normalize(&linear(p, "image.proj", &pooled)?)
    }

    pub fn text_tower(&self, texts: &[&str]) -> Result<Tensor> {
        let v = self.dict.len();
        let mut bags = vec![0f32; texts.len() * v];
        for (i, text) in texts.iter().enumerate() {
            // The placeholder is omitted, so alignment measures the rest of the
            // prompt ("S* on a beach" is scored as "on a beach").
            let kept = text.split_whitespace().filter(|w| *w != PLACEHOLDER).collect::<Vec<_>>().join(" ");
            let prompt = Prompt::parse(&kept, &self.dict, self.config.seq_len)?;
            let ids: Vec<usize> = prompt.tokens().iter().copied().filter(|&t| t != NULL_TOKEN).collect();
            if ids.is_empty() {
                return Err(Error::invalid("empty text"));
            }
            for id in &ids {
                bags[i * v + id] += 1.0 / ids.len() as f32;
            }
        }
        let bags = Tensor::from_vec(bags, (texts.len(), v), &Device::Cpu)?;
        let pooled = bags.matmul(&self.params.get("text.tokens")?)?;
        l2_normalize(&linear(&self.params, "text.proj", &pooled)?)
    }

    /// Symmetric InfoNCE on `(view, description caption)` pairs of every concept.
    pub fn train(&mut self, corpus: &Corpus, seed: u64) -> Result<Vec<f64>> {
        let cfg = self.config.clone();
        self.params.set_trainable(true);
        let mut opt = Adam::new(self.params.vars().clone(), AdamConfig::default())?;
        let mut rng = Rng::derive(seed, "scorer-train");
        let n = corpus.samples.len();
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(n)).collect();
            let images = images_to_tensor(&idx.iter().map(|&i| &corpus.samples[i].image).collect::<Vec<_>>())?;
            let captions: Vec<String> = idx.iter().map(|&i| corpus.description_caption(&corpus.samples[i])).collect();
            let img = self.image_tower(&images)?;
            let txt = self.text_tower(&captions.iter().map(String::as_str).collect::<Vec<_>>())?;
            let logits = img.matmul(&txt.t()?)?.affine(1.0 / cfg.temperature, 0.0)?;
            // Rows sharing a caption are all positives; mask duplicate columns out
            // by targeting the first matching index.
            let targets: Vec<usize> = captions
                .iter()
                .map(|c| captions.iter().position(|d| d == c).unwrap())
                .collect();
            let loss = cross_entropy(&logits, &targets)?
                .add(&cross_entropy(&logits.t()?, &targets)?)?
                .affine(0.5, 0.0)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { step, detail: "scorer loss".into() });
            }
            losses.push(value);
            let grads = loss.backward()?;
            opt.step(&grads, warmup_cosine(step, cfg.lr, cfg.steps / 20, cfg.steps))?;
        }
        self.params.set_trainable(false);
        Ok(losses)
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.put_params("scorer", &self.params)?;
        ckpt.set_meta("scorer.config", &self.config)
    }

    pub fn read_from(ckpt: &Checkpoint, dict: &TokenDictionary) -> Result<Self> {
        Ok(Self {
            config: ckpt.meta("scorer.config")?,
            params: ckpt.params("scorer")?,
            dict: dict.clone(),
        })
    }
}

impl Scorer for TwoTowerScorer {
    fn embed_images(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let e = self.image_tower(&images_to_tensor(images)?)?;
        Ok(e.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        flat_f32(&self.text_tower(&[text])?)
    }
}

// ---------------------------------------------------------------------------
// Reports

/// The evaluation prompt bank: recontextualization, style and composition.
pub const PROMPT_BANK: [Context; 8] = [
    Context::Mountain,
    Context::Beach,
    Context::Night,
    Context::Snow,
    Context::Painting,
    Context::Plain,
    Context::Hat,
    Context::Ball,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub concept: usize,
    pub prompt: String,
    pub seed: u64,
    pub text_alignment: f64,
    pub identity_similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        };
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub text_alignment: MeanSe,
    pub identity_similarity: MeanSe,
}

pub const EVAL_HEADER: &str = "concept,prompt,seed,text_alignment,identity_similarity";

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let ta: Vec<f64> = records.iter().map(|r| r.text_alignment).collect();
        let id: Vec<f64> = records.iter().map(|r| r.identity_similarity).collect();
        Self {
            text_alignment: MeanSe::of(&ta),
            identity_similarity: MeanSe::of(&id),
            records,
        }
    }

    /// Per-concept mean of a metric, in first-seen concept order.
    pub fn per_concept(&self, metric: impl Fn(&EvalRecord) -> f64) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.iter_mut().find(|(c, ..)| *c == r.concept) {
                Some(e) => {
                    e.1 += metric(r);
                    e.2 += 1;
                }
                None => out.push((r.concept, metric(r), 1)),
            }
        }
        out.into_iter().map(|(c, s, n)| (c, s / n as f64)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},\"{}\",{},{:?},{:?}",
                r.concept, r.prompt, r.seed, r.text_alignment, r.identity_similarity
            );
        }
        s
    }
}

/// One personalized concept to evaluate.
pub struct EvalSubject<'a> {
    pub concept: usize,
    pub handle: PersonalizedHandle<'a>,
    pub concept_image: Image,
}

/// Generated images of one subject: rows = prompts, columns = seeds.
pub type ImageGrid = Vec<Vec<Image>>;

/// Sample every (subject, prompt, seed) and score both metrics.
pub fn run_eval(
    subjects: &[EvalSubject<'_>],
    prompt_bank: &[Context],
    seeds: &[u64],
    sample_steps: usize,
    scorer: &dyn Scorer,
) -> Result<(EvalReport, Vec<ImageGrid>)> {
    let mut records = Vec::with_capacity(subjects.len() * prompt_bank.len() * seeds.len());
    let mut grids = Vec::with_capacity(subjects.len());
    for s in subjects {
        let seq_len = s.handle.model.config().seq_len;
        let concept_emb = scorer.embed_images(&[&s.concept_image])?;
        let mut prompts = Vec::with_capacity(prompt_bank.len() * seeds.len());
        let mut row_seeds = Vec::with_capacity(prompts.capacity());
        for &ctx in prompt_bank {
            let prompt = Prompt::parse(&ctx.fill(PLACEHOLDER), s.handle.dict, seq_len)?;
            for &seed in seeds {
                prompts.push(prompt.clone());
                row_seeds.push(seed);
            }
        }
        let images = s.handle.generate_rows(&prompts, sample_steps, &row_seeds)?;
        let embs = scorer.embed_images(&images.iter().collect::<Vec<_>>())?;
        let mut grid = Vec::with_capacity(prompt_bank.len());
        for (p, &ctx) in prompt_bank.iter().enumerate() {
            let text = scorer.embed_text(&ctx.fill(PLACEHOLDER))?;
            let row = p * seeds.len()..(p + 1) * seeds.len();
            for (e, &seed) in embs[row.clone()].iter().zip(seeds) {
                records.push(EvalRecord {
                    concept: s.concept,
                    prompt: ctx.template().to_string(),
                    seed,
                    text_alignment: cosine(e, &text),
                    identity_similarity: mean_pairwise_cosine(std::slice::from_ref(e), &concept_emb)?,
                });
            }
            grid.push(images[row].to_vec());
        }
        grids.push(grid);
    }
    Ok((EvalReport::from_records(records), grids))
}

/// Tile a grid into one RGB8 image with a one-pixel gutter.
pub fn grid_png(grid: &ImageGrid) -> Result<Vec<u8>> {
    let rows = grid.len();
    let cols = grid.iter().map(Vec::len).max().unwrap_or(0);
    let size = grid
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid("empty image grid"))?
        .size;
    let (w, h) = (cols * (size + 1) + 1, rows * (size + 1) + 1);
    let mut rgb = vec![255u8; w * h * 3];
    for (r, row) in grid.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let px = img.to_rgb8();
            for y in 0..size {
                for x in 0..size {
                    let dst = ((r * (size + 1) + 1 + y) * w + c * (size + 1) + 1 + x) * 3;
                    let src = (y * size + x) * 3;
                    rgb[dst..dst + 3].copy_from_slice(&px[src..src + 3]);
                }
            }
        }
    }
    encode_png_rgb(w as u32, h as u32, &rgb)
}

pub fn save_grid(path: &Path, grid: &ImageGrid) -> Result<()> {
    write_file_atomic(path, &grid_png(grid)?)
}

// ---------------------------------------------------------------------------
// Embedding geometry and ablation tables

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    /// Mean cosine of each embedding to its nearest dictionary token.
    pub mean_top1_cosine: f64,
    /// Mean cosine over pairs of distinct embeddings.
    pub mean_pairwise_cosine: f64,
}

pub fn embedding_stats(embeddings: &[ConceptEmbedding], dict: &TokenDictionary) -> Result<EmbeddingStats> {
    if embeddings.len() < 2 {
        return Err(Error::invalid("embedding statistics need at least two embeddings"));
    }
    let top1 = embeddings
        .iter()
        .map(|e| Ok(nearest_tokens(e.as_slice(), dict, 1)?.similarities[0]))
        .collect::<Result<Vec<f64>>>()?;
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            pair_sum += cosine(embeddings[i].as_slice(), embeddings[j].as_slice());
            pairs += 1;
        }
    }
    Ok(EmbeddingStats {
        mean_top1_cosine: top1.iter().sum::<f64>() / top1.len() as f64,
        mean_pairwise_cosine: pair_sum / pairs as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub text_alignment: MeanSe,
    pub identity_similarity: MeanSe,
    pub embeddings: Option<EmbeddingStats>,
}

impl AblationRow {
    pub fn new(label: impl Into<String>, report: &EvalReport, embeddings: Option<EmbeddingStats>) -> Self {
        Self {
            label: label.into(),
            text_alignment: report.text_alignment,
            identity_similarity: report.identity_similarity,
            embeddings,
        }
    }
}

/// Markdown table, one row per ablation arm.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "| variant | text alignment | identity similarity | top-1 token cosine | pairwise cosine |\n|---|---|---|---|---|\n",
    );
    for r in rows {
        let (t1, pw) = match r.embeddings {
            Some(e) => (format!("{:.4}", e.mean_top1_cosine), format!("{:.4}", e.mean_pairwise_cosine)),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            s,
            "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {} | {} |",
            r.label, r.text_alignment.mean, r.text_alignment.se, r.identity_similarity.mean, r.identity_similarity.se, t1, pw
        );
    }
    s
}
