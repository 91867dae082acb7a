//! `tunenc` command line: corpus generation, encoder pretraining, one-image
//! personalization, sampling, evaluation and parameter sweeps.
//!
//! Exit codes: 0 success, 1 user error (bad arguments, config, missing or
//! malformed inputs), 2 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tunenc::checkpoint::{write_file_atomic, Checkpoint};
use tunenc::config::RunConfig;
use tunenc::corpus::{Corpus, Image};
use tunenc::dual_path::BlendConfig;
use tunenc::error::Error;
use tunenc::evaluator::{ablation_table, embedding_stats, grid_png, run_eval, AblationRow, EvalReport, EvalSubject};
use tunenc::experiment::{held_out_concepts, load_encoder, predicted_embeddings, pretrain_cached};
use tunenc::foundation::Foundation;
use tunenc::personalize::{tune_csv, PersonalizationState, PersonalizedHandle};
use tunenc::pretrain::{run_pretraining, RegularizerVariant, RunOptions};
use tunenc::token_space::Prompt;
use tunenc::encoder::TuningEncoder;

const CONFIG_COPY: &str = "config.toml";
const HANDLE_DIR: &str = "handle";

#[derive(Parser)]
#[command(name = "tunenc", version, about = "One-shot concept personalization with a tuning encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Without it the built-in `tiny` profile is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the seconds-scale `micro` profile instead of `tiny` when no config is given.
    #[arg(long, global = true)]
    micro: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write images, manifest and dictionary.
    MakeCorpus {
        #[command(flatten)]
        common: Common,
        /// Output directory [default: <out>/corpus]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the tuning encoder (resumes an interrupted run in the same directory).
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Output directory [default: <out>/pretrain]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start over even if a checkpoint exists.
        #[arg(long)]
        fresh: bool,
        /// Stop after this many total steps (the schedule is unchanged).
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Personalize the model to the concept in one image.
    Personalize {
        #[command(flatten)]
        common: Common,
        /// Square PNG at the corpus image size.
        #[arg(long)]
        image: PathBuf,
        /// Pretraining run directory [default: <out>/pretrain]
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        alpha_blend: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default: <out>/personal]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample images from a personalized handle.
    Generate {
        /// Personalization output directory [default: <out>/personal]
        #[arg(long)]
        personal: Option<PathBuf>,
        /// Prompt containing the placeholder `S*`.
        #[arg(long, default_value = "a photo of S*")]
        prompt: String,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        /// One image per seed, tiled left to right.
        #[arg(long = "seed", default_values_t = [0u64])]
        seeds: Vec<u64>,
        /// Output PNG [default: <out>/generated.png]
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Personalize held-out concepts and score them over the prompt bank.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Output directory [default: <out>/eval]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate once per value of a parameter, e.g. `--sweep alpha_blend=0,0.25,1`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2,...`; keys: alpha_blend, steps, lr, mu_v, mu_w, regularizer
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Output directory [default: <out>/ablate]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classified for the exit code.
enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn user(msg: impl Into<String>) -> Failure {
    Failure::User(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    Ok(match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if common.micro => RunConfig::micro(),
        None => RunConfig::tiny(),
    })
}

fn foundation(cfg: &RunConfig) -> CliResult<Foundation> {
    Ok(Foundation::load_or_build(cfg.foundation.clone(), &cfg.cache_root())?)
}

/// Record the exact configuration next to a run's outputs.
fn freeze_config(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    write_file_atomic(&dir.join(CONFIG_COPY), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn encoder_dir(cfg: &RunConfig, arg: Option<PathBuf>) -> PathBuf {
    arg.unwrap_or_else(|| cfg.out_root().join("pretrain"))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::MakeCorpus { common, out } => {
            let cfg = load_config(&common)?;
            let dir = out.unwrap_or_else(|| cfg.out_root().join("corpus"));
            let corpus = Corpus::generate(cfg.foundation.corpus.clone())?;
            corpus.save(&dir)?;
            println!("wrote {} images of {} concepts to {}", corpus.samples.len(), corpus.catalog.len(), dir.display());
        }
        Command::Pretrain {
            common,
            out,
            fresh,
            stop_at,
        } => {
            let cfg = load_config(&common)?;
            let dir = encoder_dir(&cfg, out);
            let f = foundation(&cfg)?;
            std::fs::create_dir_all(&dir).map_err(|e| Failure::Internal(format!("{}: {e}", dir.display())))?;
            freeze_config(&dir, &cfg)?;
            let init = TuningEncoder::for_models(cfg.encoder.clone(), f.frozen(), cfg.seed)?;
            let (_, report) = run_pretraining(
                &cfg.pretrain,
                &f.corpus,
                f.frozen(),
                init,
                RunOptions {
                    out_dir: Some(&dir),
                    resume: !fresh,
                    stop_at,
                },
            )?;
            if let Some(last) = report.records.last() {
                println!("pretrained to step {} (l_diff {:.4}) in {}", last.step + 1, last.l_diff, dir.display());
            }
        }
        Command::Personalize {
            common,
            image,
            encoder,
            steps,
            lr,
            alpha_blend,
            seed,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.personalize.max_steps = s;
            }
            if let Some(l) = lr {
                cfg.personalize.lr = l;
            }
            if let Some(a) = alpha_blend {
                cfg.personalize.blend = BlendConfig::new(a)?;
            }
            if let Some(s) = seed {
                cfg.personalize.seed = s;
            }
            cfg.validate()?;
            let img = Image::load_png(&image)?;
            if img.size != cfg.foundation.corpus.image_size {
                return Err(user(format!(
                    "{}: image is {}px, the model works at {}px",
                    image.display(),
                    img.size,
                    cfg.foundation.corpus.image_size
                )));
            }
            let enc = load_encoder(&encoder_dir(&cfg, encoder))?;
            let f = foundation(&cfg)?;
            let mut state = PersonalizationState::init_from_encoder(&enc, &img.to_tensor()?, f.frozen(), cfg.personalize.clone())?;
            state.run(&f.denoiser, &f.corpus.dictionary)?;
            let handle = state.finalize(&f.denoiser, &f.corpus.dictionary)?;
            let dir = out.unwrap_or_else(|| cfg.out_root().join("personal"));
            let mut ckpt = Checkpoint::new();
            handle.write_to(&mut ckpt)?;
            ckpt.save(&dir.join(HANDLE_DIR))?;
            write_file_atomic(&dir.join("tune_loss.csv"), tune_csv(state.history()).as_bytes())?;
            freeze_config(&dir, &cfg)?;
            if let (Some(first), Some(last)) = (state.history().first(), state.history().last()) {
                println!(
                    "tuned {} steps: l_diff {:.4} -> {:.4}; handle in {}",
                    state.step_count(),
                    first.l_diff,
                    last.l_diff,
                    dir.display()
                );
            }
        }
        Command::Generate {
            personal,
            prompt,
            steps,
            seeds,
            out,
            common,
        } => {
            // The personalization run's frozen config wins unless one is given.
            let mut cfg = load_config(&common)?;
            let dir = personal.unwrap_or_else(|| cfg.out_root().join("personal"));
            if common.config.is_none() && dir.join(CONFIG_COPY).exists() {
                cfg = RunConfig::load(&dir.join(CONFIG_COPY))?;
            }
            if steps == 0 {
                return Err(user("--steps must be positive"));
            }
            let ckpt_dir = dir.join(HANDLE_DIR);
            if !ckpt_dir.exists() {
                return Err(Failure::from(Error::NotFound(ckpt_dir)));
            }
            let f = foundation(&cfg)?;
            let handle = PersonalizedHandle::read_from(&Checkpoint::load(&ckpt_dir)?, &f.denoiser, &f.corpus.dictionary)?;
            let p = Prompt::parse(&prompt, &f.corpus.dictionary, f.denoiser.config().seq_len)?;
            if p.placeholder().is_none() {
                return Err(user(format!("prompt `{prompt}` has no S* placeholder")));
            }
            let images = handle.generate(&p, steps, &seeds)?;
            let path = out.unwrap_or_else(|| cfg.out_root().join("generated.png"));
            write_file_atomic(&path, &grid_png(&vec![images])?)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { common, encoder, out } => {
            let cfg = load_config(&common)?;
            let f = foundation(&cfg)?;
            let enc = load_encoder(&encoder_dir(&cfg, encoder))?;
            let dir = out.unwrap_or_else(|| cfg.out_root().join("eval"));
            let report = evaluate(&cfg, &f, &enc, &dir, true)?;
            freeze_config(&dir, &cfg)?;
            println!(
                "text alignment {:.4} ± {:.4}, identity similarity {:.4} ± {:.4} ({} samples) -> {}",
                report.text_alignment.mean,
                report.text_alignment.se,
                report.identity_similarity.mean,
                report.identity_similarity.se,
                report.records.len(),
                dir.display()
            );
        }
        Command::Ablate {
            common,
            sweep,
            encoder,
            out,
        } => {
            let cfg = load_config(&common)?;
            let (key, values) = parse_sweep(&sweep)?;
            let f = foundation(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.out_root().join("ablate"));
            let fixed_encoder = if key == "regularizer" {
                None
            } else {
                Some(load_encoder(&encoder_dir(&cfg, encoder))?)
            };
            let mut rows = Vec::new();
            for value in &values {
                let mut c = cfg.clone();
                let label = format!("{key}={value}");
                let trained;
                let enc = match &fixed_encoder {
                    Some(e) => {
                        apply_override(&mut c, &key, value)?;
                        e
                    }
                    None => {
                        let variant = RegularizerVariant::ALL
                            .into_iter()
                            .find(|v| v.name() == value.as_str())
                            .ok_or_else(|| user(format!("unknown regularizer `{value}` (none, l2-only, nn-cosine, contrastive)")))?;
                        c.pretrain = variant.apply(&cfg.pretrain);
                        trained = pretrain_cached(&f, &c.encoder, &c.pretrain, c.seed, &cfg.cache_root())?.0;
                        &trained
                    }
                };
                c.validate()?;
                let sub = dir.join(&label);
                let report = evaluate(&c, &f, enc, &sub, false)?;
                freeze_config(&sub, &c)?;
                let concepts: Vec<usize> = f.corpus.catalog.held_out.clone();
                let emb = embedding_stats(&predicted_embeddings(&f, enc, &concepts, c.personalize.seed)?, &f.corpus.dictionary)?;
                rows.push(AblationRow::new(label, &report, Some(emb)));
            }
            let table = ablation_table(&rows);
            write_file_atomic(&dir.join("ablation.md"), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

/// Personalize the configured held-out concepts and evaluate them over the
/// prompt bank; writes `eval.csv`, `summary.json`, tuning curves and grids.
fn evaluate(cfg: &RunConfig, f: &Foundation, enc: &TuningEncoder, dir: &Path, grids: bool) -> CliResult<EvalReport> {
    let concepts = held_out_concepts(f, cfg.eval.n_concepts)?;
    let mut subjects = Vec::with_capacity(concepts.len());
    let mut curves = String::from("concept,");
    curves.push_str(tunenc::personalize::TUNE_HEADER);
    curves.push('\n');
    for &c in &concepts {
        let state = tunenc::experiment::personalize_concept(f, enc, c, &cfg.personalize)?;
        for line in tune_csv(state.history()).lines().skip(1) {
            curves.push_str(&format!("{c},{line}\n"));
        }
        subjects.push(EvalSubject {
            concept: c,
            handle: state.finalize(&f.denoiser, &f.corpus.dictionary)?,
            concept_image: f.corpus.reference_image(c).clone(),
        });
    }
    let (report, image_grids) = run_eval(&subjects, &cfg.eval.prompts, &cfg.eval.seeds(), cfg.eval.sample_steps, &f.scorer)?;
    write_file_atomic(&dir.join("eval.csv"), report.to_csv().as_bytes())?;
    write_file_atomic(&dir.join("tune_loss.csv"), curves.as_bytes())?;
    let summary = serde_json::json!({
        "text_alignment": report.text_alignment,
        "identity_similarity": report.identity_similarity,
        "concepts": concepts,
    });
    write_file_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(|e| Failure::Internal(e.to_string()))?.as_bytes())?;
    if grids {
        for (s, grid) in subjects.iter().zip(&image_grids) {
            write_file_atomic(&dir.join("grids").join(format!("concept_{:03}.png", s.concept)), &grid_png(grid)?)?;
        }
    }
    Ok(report)
}

fn parse_sweep(spec: &str) -> CliResult<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| user(format!("--sweep `{spec}` must look like key=v1,v2")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(user(format!("--sweep `{spec}` lists no values")));
    }
    Ok((key.trim().to_string(), values))
}

fn apply_override(cfg: &mut RunConfig, key: &str, value: &str) -> CliResult<()> {
    let num = || value.parse::<f64>().map_err(|_| user(format!("`{value}` is not a number for {key}")));
    match key {
        "alpha_blend" => cfg.personalize.blend = BlendConfig::new(num()?)?,
        "lr" => cfg.personalize.lr = num()?,
        "mu_v" => cfg.personalize.mu_v = num()?,
        "mu_w" => cfg.personalize.mu_w = num()?,
        "steps" => {
            cfg.personalize.max_steps = value.parse().map_err(|_| user(format!("`{value}` is not a step count")))?;
        }
        other => {
            return Err(user(format!(
                "unknown sweep key `{other}` (alpha_blend, steps, lr, mu_v, mu_w, regularizer)"
            )))
        }
    }
    Ok(())
}
