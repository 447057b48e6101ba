//! Batch command line for the recognition pipeline: synthetic data
//! generation, training, evaluation, single-image prediction, and the
//! finite-difference gradient gate.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Results go to
//! stdout, diagnostics to stderr. `HTR_LOG={error,info,debug}` controls
//! verbosity (default info).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU8, Ordering};

use clap::{Parser, Subcommand};

use htr::codec::Vocab;
use htr::dataset::{load_manifest, prepare_lines, synth_corpus, GlyphSet, PreparedLine};
use htr::image_prep::{load_image, normalize_image, otsu_binarize, CANONICAL_HEIGHT, MAX_WIDTH};
use htr::metrics::CerReport;
use htr::model::ModelConfig;
use htr::trainer::{fit, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig};
use htr::HtrError;

// ---- logging ----

static LOG_LEVEL: AtomicU8 = AtomicU8::new(1);

fn log_enabled(level: u8) -> bool {
    LOG_LEVEL.load(Ordering::Relaxed) >= level
}

macro_rules! info {
    ($($arg:tt)*) => { if log_enabled(1) { eprintln!($($arg)*); } };
}

macro_rules! debug {
    ($($arg:tt)*) => { if log_enabled(2) { eprintln!($($arg)*); } };
}

fn init_log() -> Result<(), CliError> {
    match std::env::var("HTR_LOG") {
        Ok(v) => {
            let level = match v.as_str() {
                "error" => 0,
                "info" => 1,
                "debug" => 2,
                other => {
                    return Err(CliError::Usage(format!(
                        "HTR_LOG must be one of error, info, debug; got {other:?}"
                    )))
                }
            };
            LOG_LEVEL.store(level, Ordering::Relaxed);
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

// ---- error/exit plumbing ----

enum CliError {
    Usage(String),
    Runtime(HtrError),
}

impl From<HtrError> for CliError {
    fn from(e: HtrError) -> CliError {
        CliError::Runtime(e)
    }
}

// ---- argument surface ----

#[derive(Parser)]
#[command(name = "htr", about = "Handwritten text line recognition toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic line corpus with a manifest.
    Synth {
        /// Word list, one word per line.
        #[arg(long)]
        lexicon: PathBuf,
        /// Alphabet file for the glyph set; defaults to the lexicon's characters.
        #[arg(long)]
        glyphs: Option<PathBuf>,
        /// Number of line images to generate.
        #[arg(long)]
        count: usize,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Additive pixel noise amplitude in [0, 1].
        #[arg(long, default_value_t = 0.15)]
        noise: f32,
        /// Maximum words per line.
        #[arg(long, default_value_t = 3)]
        max_words: usize,
    },
    /// Train a model on a manifest of line images.
    Train {
        /// TSV manifest: image path, tab, transcription.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
        /// `key = value` config file; flags take precedence over it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from an existing checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Binarize inputs with Otsu thresholding.
        #[arg(long)]
        binarize: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        eval_every: Option<u64>,
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        enc_layers: Option<usize>,
        #[arg(long)]
        dec_layers: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        width_scale: Option<f64>,
    },
    /// Score a checkpoint against a manifest (character/word error rates).
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Emit the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        binarize: bool,
        /// Beam width; 1 is greedy.
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Transcribe a single line image.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        binarize: bool,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seed: u64,
    },
}

// ---- config file / flag merging ----

/// Apply one `key = value` pair onto the configs; unknown keys are rejected
/// by name.
fn apply_key(
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    key: &str,
    value: &str,
) -> Result<(), CliError> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
        value.parse().map_err(|_| {
            CliError::Usage(format!("config key {key}: cannot parse value {value:?}"))
        })
    }
    match key {
        "learning_rate" => train.learning_rate = parse(key, value)?,
        "beta1" => train.beta1 = parse(key, value)?,
        "beta2" => train.beta2 = parse(key, value)?,
        "eps" => train.eps = parse(key, value)?,
        "max_steps" => train.max_steps = parse(key, value)?,
        "batch_size" => train.batch_size = parse(key, value)?,
        "grad_clip" => train.grad_clip = parse(key, value)?,
        "seed" => train.seed = parse(key, value)?,
        "eval_every" => train.eval_every = parse(key, value)?,
        "val_fraction" => train.val_fraction = parse(key, value)?,
        "d_model" => model.transformer.d_model = parse(key, value)?,
        "n_heads" => model.transformer.n_heads = parse(key, value)?,
        "enc_layers" => model.transformer.enc_layers = parse(key, value)?,
        "dec_layers" => model.transformer.dec_layers = parse(key, value)?,
        "d_ff" => model.transformer.d_ff = parse(key, value)?,
        "dropout" => model.transformer.dropout = parse(key, value)?,
        "max_target_len" => model.transformer.max_target_len = parse(key, value)?,
        "width_scale" => model.resnet.width_scale = parse(key, value)?,
        "proj_depth" => model.proj_depth = parse(key, value)?,
        other => return Err(CliError::Usage(format!("unknown config key: {other}"))),
    }
    Ok(())
}

fn apply_config_file(
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    path: &Path,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| HtrError::io(path, e))?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{}:{}: expected `key = value`, got {line:?}",
                path.display(),
                i + 1
            ))
        })?;
        apply_key(model, train, key.trim(), value.trim())?;
    }
    Ok(())
}

// ---- subcommands ----

fn read_alphabet(path: &Path) -> Result<Vec<char>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| HtrError::io(path, e))?;
    let mut chars: Vec<char> =
        text.chars().filter(|c| *c != '\n' && *c != '\r').collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if !chars.contains(&' ') {
        chars.push(' ');
    }
    Ok(chars)
}

fn run_synth(
    lexicon: &Path,
    glyphs: Option<&Path>,
    count: usize,
    out: &Path,
    seed: u64,
    noise: f32,
    max_words: usize,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(lexicon).map_err(|e| HtrError::io(lexicon, e))?;
    let words: Vec<String> =
        text.lines().map(str::trim).filter(|w| !w.is_empty()).map(String::from).collect();
    if words.is_empty() {
        return Err(CliError::Usage(format!("lexicon {} has no words", lexicon.display())));
    }
    let alphabet = match glyphs {
        Some(p) => read_alphabet(p)?,
        None => {
            let mut chars: std::collections::BTreeSet<char> =
                words.iter().flat_map(|w| w.chars()).collect();
            chars.insert(' ');
            chars.into_iter().collect()
        }
    };
    debug!("glyph alphabet: {alphabet:?}");
    let glyph_set = GlyphSet::generate(&alphabet, seed);
    let manifest = synth_corpus(&words, &glyph_set, count, out, seed, noise, max_words)?;
    info!("wrote {count} line images to {}", out.display());
    println!("{}", manifest.display());
    Ok(())
}

fn load_lines(manifest: &Path, binarize: bool) -> Result<Vec<PreparedLine>, CliError> {
    let entries = load_manifest(manifest)?;
    info!("manifest {}: {} lines", manifest.display(), entries.len());
    Ok(prepare_lines(&entries, binarize)?)
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    manifest: &Path,
    out: &Path,
    config: Option<&Path>,
    resume: Option<&Path>,
    binarize: bool,
    flag_overrides: &[(&str, String)],
) -> Result<(), CliError> {
    let lines = load_lines(manifest, binarize)?;
    let mut ckpt = match resume {
        Some(p) => {
            let mut c = load_checkpoint(p)?;
            info!("resuming from {} at step {}", p.display(), c.step);
            // only explicit flags override the checkpointed configs
            for (k, v) in flag_overrides {
                apply_key(&mut c.model_cfg, &mut c.train_cfg, k, v)?;
            }
            c
        }
        None => {
            let mut model_cfg = ModelConfig::default();
            let mut train_cfg = TrainConfig::default();
            if let Some(p) = config {
                apply_config_file(&mut model_cfg, &mut train_cfg, p)?;
            }
            for (k, v) in flag_overrides {
                apply_key(&mut model_cfg, &mut train_cfg, k, v)?;
            }
            let texts: Vec<&str> = lines.iter().map(|l| l.text.as_str()).collect();
            let vocab = Vocab::build(&texts)?;
            info!("vocabulary: {} symbols", vocab.size());
            Checkpoint::init(model_cfg, train_cfg, vocab)?
        }
    };
    std::fs::create_dir_all(out).map_err(|e| HtrError::io(out, e))?;
    let ckpt_path = out.join("model.ckpt");
    let log_path = out.join("train_log.jsonl");

    // drive training in chunks so progress is visible at info level
    let target = ckpt.train_cfg.max_steps;
    let chunk = if ckpt.train_cfg.eval_every > 0 { ckpt.train_cfg.eval_every } else { 50 };
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| HtrError::io(&log_path, e))?;
    use std::io::Write as _;
    while ckpt.step < target {
        ckpt.train_cfg.max_steps = (ckpt.step + chunk).min(target);
        let entries = fit(&mut ckpt, &lines, Some(&ckpt_path))?;
        for e in &entries {
            debug!("step {} loss {:.4}", e.step, e.loss);
            writeln!(log_file, "{}", serde_json::to_string(e).expect("log entry serialization"))
                .map_err(|e| HtrError::io(&log_path, e))?;
        }
        if let Some(last) = entries.last() {
            match last.val_cer {
                Some(c) => info!("step {} loss {:.4} val_cer {:.2}", last.step, last.loss, c),
                None => info!("step {} loss {:.4}", last.step, last.loss),
            }
        }
    }
    ckpt.train_cfg.max_steps = target;
    save_checkpoint(&ckpt_path, &ckpt)?;
    info!("training complete at step {}", ckpt.step);
    println!("{}", ckpt_path.display());
    Ok(())
}

fn run_eval(
    manifest: &Path,
    ckpt_path: &Path,
    json: bool,
    binarize: bool,
    beam: usize,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = ckpt.model()?;
    let lines = load_lines(manifest, binarize)?;
    let mut pairs = Vec::with_capacity(lines.len());
    for l in &lines {
        let hyp = model.transcribe(&ckpt.store, &l.image, beam)?;
        debug!("{:?} -> {:?}", l.text, hyp);
        pairs.push((l.text.clone(), hyp));
    }
    let report = CerReport::score(&pairs)?;
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn run_predict(
    image: &Path,
    ckpt_path: &Path,
    beam: usize,
    binarize: bool,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = ckpt.model()?;
    let raw = load_image(image)?;
    let mut img = normalize_image(&raw, CANONICAL_HEIGHT, MAX_WIDTH)?;
    if binarize {
        img = otsu_binarize(&img)?;
    }
    let text = model.transcribe(&ckpt.store, &img, beam)?;
    println!("{text}");
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<(), CliError> {
    let results = htr::gradcheck::run_suite(seed);
    let mut failed = 0;
    for r in &results {
        let ok = r.max_rel_err < htr::gradcheck::TOLERANCE;
        if !ok {
            failed += 1;
        }
        println!(
            "{:<40} max_rel_err {:>10.3e}  {}",
            r.name,
            r.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(CliError::Runtime(HtrError::Contract(format!(
            "{failed} of {} gradient checks failed",
            results.len()
        ))));
    }
    info!("all {} gradient checks passed", results.len());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { lexicon, glyphs, count, out, seed, noise, max_words } => {
            run_synth(&lexicon, glyphs.as_deref(), count, &out, seed, noise, max_words)
        }
        Command::Train {
            manifest,
            out,
            config,
            resume,
            binarize,
            seed,
            lr,
            max_steps,
            batch_size,
            eval_every,
            val_fraction,
            d_model,
            enc_layers,
            dec_layers,
            dropout,
            width_scale,
        } => {
            let mut overrides: Vec<(&str, String)> = Vec::new();
            let mut add = |k: &'static str, v: Option<String>| {
                if let Some(v) = v {
                    overrides.push((k, v));
                }
            };
            add("seed", seed.map(|v| v.to_string()));
            add("learning_rate", lr.map(|v| v.to_string()));
            add("max_steps", max_steps.map(|v| v.to_string()));
            add("batch_size", batch_size.map(|v| v.to_string()));
            add("eval_every", eval_every.map(|v| v.to_string()));
            add("val_fraction", val_fraction.map(|v| v.to_string()));
            add("d_model", d_model.map(|v| v.to_string()));
            add("enc_layers", enc_layers.map(|v| v.to_string()));
            add("dec_layers", dec_layers.map(|v| v.to_string()));
            add("dropout", dropout.map(|v| v.to_string()));
            add("width_scale", width_scale.map(|v| v.to_string()));
            run_train(&manifest, &out, config.as_deref(), resume.as_deref(), binarize, &overrides)
        }
        Command::Eval { manifest, ckpt, json, binarize, beam } => {
            run_eval(&manifest, &ckpt, json, binarize, beam)
        }
        Command::Predict { image, ckpt, beam, binarize } => {
            run_predict(&image, &ckpt, beam, binarize)
        }
        Command::Gradcheck { seed } => run_gradcheck(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_log() {
        if let CliError::Usage(msg) = e {
            eprintln!("error: {msg}");
        }
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
