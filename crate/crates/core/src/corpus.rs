//! Procedural concept sprites, the vocabulary and frozen token dictionary
//! built around them, and the on-disk corpus layout (PNG files plus a CSV
//! manifest and a JSON catalog).

use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_file_atomic, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::Rng;
use crate::token_space::{Prompt, TokenDictionary, PLACEHOLDER};

pub const SHAPES: [&str; 6] = ["disc", "square", "triangle", "diamond", "cross", "bar"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const TEXTURES: [&str; 3] = ["solid", "striped", "hollow"];

const COLOR_RGB: [[f32; 3]; 6] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.8, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.15],
    [0.9, 0.2, 0.85],
    [0.15, 0.85, 0.9],
];

/// Scene context; each has one prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    Plain,
    Mountain,
    Beach,
    Night,
    Painting,
    Hat,
    Snow,
    Ball,
}

impl Context {
    pub const ALL: [Context; 8] = [
        Context::Plain,
        Context::Mountain,
        Context::Beach,
        Context::Night,
        Context::Painting,
        Context::Hat,
        Context::Snow,
        Context::Ball,
    ];

    /// Template with `{}` where the subject goes.
    pub fn template(self) -> &'static str {
        match self {
            Context::Plain => "a photo of {}",
            Context::Mountain => "{} near a mountain",
            Context::Beach => "{} on a beach",
            Context::Night => "{} at night",
            Context::Painting => "a painting of {}",
            Context::Hat => "{} with a hat",
            Context::Snow => "{} in the snow",
            Context::Ball => "{} with a ball",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Context::Plain => "plain",
            Context::Mountain => "mountain",
            Context::Beach => "beach",
            Context::Night => "night",
            Context::Painting => "painting",
            Context::Hat => "hat",
            Context::Snow => "snow",
            Context::Ball => "ball",
        }
    }

    pub fn index(self) -> usize {
        Context::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn fill(self, subject: &str) -> String {
        self.template().replace("{}", subject)
    }
}

/// Function words used by the templates, in dictionary order after the null token.
const FUNCTION_WORDS: [&str; 16] = [
    "a", "photo", "of", "near", "mountain", "on", "beach", "at", "night", "painting", "with", "hat",
    "in", "the", "snow", "ball",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub word: String,
    pub shape: usize,
    pub color: usize,
    pub texture: usize,
}

impl Concept {
    /// "red striped disc"
    pub fn description(&self) -> String {
        format!("{} {} {}", COLORS[self.color], TEXTURES[self.texture], SHAPES[self.shape])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptCatalog {
    pub concepts: Vec<Concept>,
    /// Concept ids never shown to the encoder during pretraining.
    pub held_out: Vec<usize>,
}

impl ConceptCatalog {
    /// Draw `n` distinct attribute combinations; the last tenth is held out.
    pub fn generate(n: usize, seed: u64) -> Result<Self> {
        let total = SHAPES.len() * COLORS.len() * TEXTURES.len();
        if n < 2 || n > total {
            return Err(Error::config(format!("n_concepts must be in 2..={total}, got {n}")));
        }
        let mut combos: Vec<(usize, usize, usize)> = (0..SHAPES.len())
            .flat_map(|s| (0..COLORS.len()).flat_map(move |c| (0..TEXTURES.len()).map(move |t| (s, c, t))))
            .collect();
        let mut rng = Rng::derive(seed, "catalog");
        rng.shuffle(&mut combos);
        let concepts: Vec<Concept> = combos
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(id, (shape, color, texture))| Concept {
                id,
                word: concept_word(id),
                shape,
                color,
                texture,
            })
            .collect();
        let n_held = (n / 10).max(1);
        let held_out = ((n - n_held)..n).collect();
        Ok(Self { concepts, held_out })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn is_held_out(&self, id: usize) -> bool {
        self.held_out.contains(&id)
    }

    pub fn train_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| !self.is_held_out(*i)).collect()
    }
}

/// Pronounceable synthetic word for concept `i`, unique per index.
pub fn concept_word(i: usize) -> String {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut x = i;
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(ONSETS[x % ONSETS.len()]);
        x /= ONSETS.len();
        w.push_str(VOWELS[x % VOWELS.len()]);
        x /= VOWELS.len();
    }
    w
}

/// The frozen dictionary: null token, function words, attribute words, one
/// word per concept, then filler tokens up to `vocab_size`. Concept rows lie
/// near the normalized sum of their attribute rows, so neighbourhoods carry
/// meaning. Every row has unit norm.
pub fn build_dictionary(catalog: &ConceptCatalog, vocab_size: usize, dim: usize, seed: u64) -> Result<TokenDictionary> {
    let mut labels: Vec<String> = vec!["<null>".to_string()];
    labels.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
    let attr_start = labels.len();
    labels.extend(SHAPES.iter().chain(COLORS.iter()).chain(TEXTURES.iter()).map(|s| s.to_string()));
    let concept_start = labels.len();
    labels.extend(catalog.concepts.iter().map(|c| c.word.clone()));
    if labels.len() > vocab_size {
        return Err(Error::config(format!(
            "vocab_size {vocab_size} too small for {} required words",
            labels.len()
        )));
    }
    let mut filler = 0;
    while labels.len() < vocab_size {
        labels.push(format!("tok{filler:03}"));
        filler += 1;
    }

    let mut rng = Rng::derive(seed, "dictionary");
    let mut rows: Vec<Vec<f32>> = (0..vocab_size).map(|_| unit(rng.normal_vec(dim, 1.0))).collect();
    let shape_row = |s: usize| attr_start + s;
    let color_row = |c: usize| attr_start + SHAPES.len() + c;
    let texture_row = |t: usize| attr_start + SHAPES.len() + COLORS.len() + t;
    for c in &catalog.concepts {
        let noise = rng.normal_vec(dim, 1.0 / (dim as f64).sqrt());
        let mixed: Vec<f32> = (0..dim)
            .map(|j| {
                rows[shape_row(c.shape)][j] + rows[color_row(c.color)][j] + rows[texture_row(c.texture)][j] + 0.5 * noise[j]
            })
            .collect();
        rows[concept_start + c.id] = unit(mixed);
    }
    TokenDictionary::new(rows.concat(), dim, labels)
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

// ---------------------------------------------------------------------------
// Images

/// Square RGB image, channel-major, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn from_rgb8(size: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != size * size * 3 {
            return Err(Error::invalid("rgb buffer does not match image size"));
        }
        let mut data = vec![0f32; 3 * size * size];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * size * size + p] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Ok(Self { size, data })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.size * self.size;
        let mut out = Vec::with_capacity(n * 3);
        for p in 0..n {
            for c in 0..3 {
                let v = (self.data[c * n + p].clamp(-1.0, 1.0) + 1.0) * 127.5;
                out.push(v.round() as u8);
            }
        }
        out
    }

    /// `1 × 3 × S × S`
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, 3, self.size, self.size), &Device::Cpu)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        let size = *dims.last().unwrap_or(&0);
        if t.elem_count() != 3 * size * size {
            return Err(Error::invalid(format!("tensor {dims:?} is not a single RGB image")));
        }
        Ok(Self {
            size,
            data: crate::nn::flat_f32(t)?,
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png_rgb(self.size as u32, self.size as u32, &self.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_file_atomic(path, &self.encode_png()?)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if info.width != info.height {
            return Err(Error::invalid(format!("{}: images must be square", path.display())));
        }
        let buf = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => buf.to_vec(),
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(Error::Format(format!("unsupported PNG color type {other:?}"))),
        };
        Image::from_rgb8(info.width as usize, &rgb)
    }
}

pub fn encode_png_rgb(width: u32, height: u32, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(rgb).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let size = images.first().ok_or_else(|| Error::invalid("empty image batch"))?.size;
    if images.iter().any(|i| i.size != size) {
        return Err(Error::invalid("images in a batch must share one size"));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for im in images {
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), &Device::Cpu)?)
}

/// Placement of one sprite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub dx: f32,
    pub dy: f32,
    pub scale: f32,
    pub shade: f32,
}

impl Jitter {
    pub const CENTERED: Jitter = Jitter {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        shade: 0.0,
    };

    pub fn random(rng: &mut Rng) -> Self {
        Self {
            dx: (rng.uniform() as f32 - 0.5) * 0.12,
            dy: (rng.uniform() as f32 - 0.5) * 0.12,
            scale: 0.88 + 0.24 * rng.uniform() as f32,
            shade: (rng.uniform() as f32 - 0.5) * 0.1,
        }
    }
}

fn inside_shape(shape: usize, u: f32, v: f32) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => (-0.9..=0.85).contains(&v) && u.abs() <= (v + 0.9) * 0.6,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.32 && v.abs() <= 0.95) || (v.abs() <= 0.32 && u.abs() <= 0.95),
        _ => u.abs() <= 1.0 && v.abs() <= 0.42,
    }
}

/// Render concept `c` in `context`, quantized through 8 bits.
pub fn render(c: &Concept, context: Context, jitter: Jitter, size: usize) -> Image {
    let s = size as f32;
    let n = size * size;
    let mut rgb = vec![[0f32; 3]; n];
    let gray = 0.35 + jitter.shade;
    let bg = match context {
        Context::Night => [0.05, 0.05, 0.22],
        Context::Painting => [0.85, 0.8, 0.65],
        _ => [gray, gray, gray + 0.03],
    };
    for (p, px) in rgb.iter_mut().enumerate() {
        let (x, y) = ((p % size) as f32 + 0.5, (p / size) as f32 + 0.5);
        *px = bg;
        match context {
            Context::Mountain => {
                // triangle from the bottom corners up to 40% height
                let apex_y = 0.4 * s;
                if y >= apex_y && (x - 0.5 * s).abs() <= (y - apex_y) / (s - apex_y) * 0.5 * s {
                    *px = [0.72, 0.72, 0.75];
                }
            }
            Context::Beach => {
                *px = if y < 0.6 * s { [0.55, 0.75, 0.95] } else { [0.9, 0.8, 0.5] };
            }
            Context::Night => {
                let (mx, my) = (0.16 * s, 0.16 * s);
                if (x - mx).powi(2) + (y - my).powi(2) <= (0.1 * s).powi(2) {
                    *px = [0.95, 0.95, 0.85];
                }
            }
            Context::Snow => {
                let cell = (s / 4.0).max(4.0);
                let fx = ((x + 0.25 * s * jitter.dx) / cell).fract();
                let fy = ((y + 0.5 * cell * ((x / cell).floor() % 2.0)) / cell).fract();
                if fx < 1.0 / cell + 0.001 && fy < 1.0 / cell + 0.001 {
                    *px = [1.0, 1.0, 1.0];
                }
            }
            _ => {}
        }
    }

    let cx = s * (0.5 + jitter.dx);
    let cy = s * (0.52 + jitter.dy);
    let r = s * 0.3 * jitter.scale;
    let mask: Vec<bool> = (0..n)
        .map(|p| {
            let (x, y) = ((p % size) as f32 + 0.5, (p / size) as f32 + 0.5);
            inside_shape(c.shape, (x - cx) / r, (y - cy) / r)
        })
        .collect();
    let thickness = (size / 16).max(1);
    let period = (size / 8).max(2);
    let color = COLOR_RGB[c.color];
    for p in 0..n {
        if !mask[p] {
            continue;
        }
        let (x, y) = (p % size, p / size);
        let paint = match c.texture {
            0 => Some(color),
            1 => Some(if (y / (period / 2)) % 2 == 0 { color } else { color.map(|v| v * 0.3) }),
            _ => {
                let near_edge = (1..=thickness).any(|t| {
                    let out = |xx: isize, yy: isize| {
                        xx < 0 || yy < 0 || xx >= size as isize || yy >= size as isize || !mask[yy as usize * size + xx as usize]
                    };
                    let (xi, yi, ti) = (x as isize, y as isize, t as isize);
                    out(xi - ti, yi) || out(xi + ti, yi) || out(xi, yi - ti) || out(xi, yi + ti)
                });
                near_edge.then_some(color)
            }
        };
        if let Some(col) = paint {
            rgb[p] = col;
        }
    }

    match context {
        Context::Hat => {
            let top = (0..n).filter(|&p| mask[p]).map(|p| p / size).min().unwrap_or(size / 2) as f32;
            let h = (s / 8.0).max(2.0);
            for (p, px) in rgb.iter_mut().enumerate() {
                let (x, y) = ((p % size) as f32 + 0.5, (p / size) as f32 + 0.5);
                if y < top && y >= top - h && (x - cx).abs() <= 0.6 * r {
                    *px = [0.05, 0.05, 0.05];
                }
            }
        }
        Context::Ball => {
            let (bx, by, br) = (0.84 * s, 0.84 * s, 0.11 * s);
            for (p, px) in rgb.iter_mut().enumerate() {
                let (x, y) = ((p % size) as f32 + 0.5, (p / size) as f32 + 0.5);
                if (x - bx).powi(2) + (y - by).powi(2) <= br * br {
                    *px = [0.98, 0.98, 0.98];
                }
            }
        }
        Context::Painting => {
            let t = thickness;
            for (p, px) in rgb.iter_mut().enumerate() {
                let (x, y) = (p % size, p / size);
                if x < t || y < t || x >= size - t || y >= size - t {
                    *px = [0.5, 0.3, 0.1];
                }
            }
        }
        _ => {}
    }

    let bytes: Vec<u8> = rgb
        .iter()
        .flat_map(|px| px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    Image::from_rgb8(size, &bytes).expect("buffer sized from image")
}

// ---------------------------------------------------------------------------
// Corpus

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub concept: usize,
    pub context: Context,
    pub image: Image,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_concepts: usize,
    pub images_per_concept: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_concepts: 100,
            images_per_concept: 8,
            image_size: 32,
            vocab_size: 512,
            embed_dim: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub catalog: ConceptCatalog,
    pub dictionary: TokenDictionary,
    pub samples: Vec<Sample>,
}

pub const MANIFEST_CSV: &str = "manifest.csv";
pub const CATALOG_JSON: &str = "catalog.json";
pub const DICTIONARY_DIR: &str = "dictionary";

impl Corpus {
    /// Deterministic in `spec`. Sample 0 of every concept is the plain,
    /// centred reference view.
    pub fn generate(spec: CorpusSpec) -> Result<Self> {
        if spec.images_per_concept == 0 {
            return Err(Error::config("images_per_concept must be positive"));
        }
        if spec.image_size < 8 || spec.image_size % 4 != 0 {
            return Err(Error::config("image_size must be a multiple of 4 and at least 8"));
        }
        let catalog = ConceptCatalog::generate(spec.n_concepts, spec.seed)?;
        let dictionary = build_dictionary(&catalog, spec.vocab_size, spec.embed_dim, spec.seed)?;
        let mut rng = Rng::derive(spec.seed, "corpus");
        let mut samples = Vec::with_capacity(spec.n_concepts * spec.images_per_concept);
        for c in &catalog.concepts {
            for j in 0..spec.images_per_concept {
                let (context, jitter) = if j == 0 {
                    (Context::Plain, Jitter::CENTERED)
                } else {
                    (Context::ALL[rng.below(Context::ALL.len())], Jitter::random(&mut rng))
                };
                samples.push(Sample {
                    concept: c.id,
                    context,
                    image: render(c, context, jitter, spec.image_size),
                });
            }
        }
        Ok(Self {
            spec,
            catalog,
            dictionary,
            samples,
        })
    }

    pub fn concept(&self, id: usize) -> &Concept {
        &self.catalog.concepts[id]
    }

    /// The plain reference image of a concept.
    pub fn reference_image(&self, concept: usize) -> &Image {
        &self
            .samples
            .iter()
            .find(|s| s.concept == concept && s.context == Context::Plain)
            .expect("every concept has a plain view")
            .image
    }

    pub fn sample_ids_for(&self, concepts: &[usize]) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| concepts.contains(&self.samples[i].concept))
            .collect()
    }

    /// Caption naming the concept by its word.
    pub fn word_caption(&self, s: &Sample) -> String {
        s.context.fill(&self.concept(s.concept).word)
    }

    /// Caption naming the concept by its attribute words.
    pub fn description_caption(&self, s: &Sample) -> String {
        s.context.fill(&self.concept(s.concept).description())
    }

    pub fn placeholder_prompt(&self, context: Context, seq_len: usize) -> Result<Prompt> {
        Prompt::parse(&context.fill(PLACEHOLDER), &self.dictionary, seq_len)
    }

    pub fn file_name(index: usize) -> String {
        format!("img_{index:05}.png")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = String::from("file,concept_id,label,shape,color,texture,context,caption\n");
        for (i, s) in self.samples.iter().enumerate() {
            let c = self.concept(s.concept);
            let file = Self::file_name(i);
            s.image.save_png(&dir.join(&file))?;
            csv.push_str(&format!(
                "{file},{},{},{},{},{},{},{}\n",
                c.id,
                c.word,
                SHAPES[c.shape],
                COLORS[c.color],
                TEXTURES[c.texture],
                s.context.name(),
                self.word_caption(s)
            ));
        }
        write_file_atomic(&dir.join(MANIFEST_CSV), csv.as_bytes())?;
        let catalog = serde_json::to_string_pretty(&CatalogFile {
            spec: self.spec.clone(),
            catalog: self.catalog.clone(),
            contexts: self.samples.iter().map(|s| s.context).collect(),
        })?;
        write_file_atomic(&dir.join(CATALOG_JSON), catalog.as_bytes())?;
        let mut ckpt = Checkpoint::new();
        self.dictionary.write_to(&mut ckpt)?;
        ckpt.save(&dir.join(DICTIONARY_DIR))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cat_path = dir.join(CATALOG_JSON);
        if !cat_path.exists() {
            return Err(Error::NotFound(cat_path));
        }
        let text = fs::read_to_string(&cat_path).map_err(|e| Error::io(&cat_path, e))?;
        let file: CatalogFile = serde_json::from_str(&text)?;
        let dictionary = TokenDictionary::read_from(&Checkpoint::load(&dir.join(DICTIONARY_DIR))?)?;
        let per = file.spec.images_per_concept;
        let mut samples = Vec::with_capacity(file.contexts.len());
        for (i, &context) in file.contexts.iter().enumerate() {
            let image = Image::load_png(&dir.join(Self::file_name(i)))?;
            if image.size != file.spec.image_size {
                return Err(Error::Format(format!("{}: unexpected image size", Self::file_name(i))));
            }
            samples.push(Sample {
                concept: i / per,
                context,
                image,
            });
        }
        if samples.is_empty() {
            return Err(Error::config(format!("corpus at {} is empty", dir.display())));
        }
        Ok(Self {
            spec: file.spec,
            catalog: file.catalog,
            dictionary,
            samples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CatalogFile {
    spec: CorpusSpec,
    catalog: ConceptCatalog,
    contexts: Vec<Context>,
}
