//! Library side of the `roleret` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use roleret_core::data_io::{load_checkpoint, save_checkpoint, synth_dataset, Dataset, SynthSpec};
use roleret_core::eval::{rank_order, score_matrix, semantic_similarity};
use roleret_core::model::{ModelConfig, ModelParams};
use roleret_core::selfcheck::{run_suite, CheckDims};
use roleret_core::train::{embed_items, evaluate_items, prepare_items, train_items, Item};
use roleret_core::Error;

pub mod config;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("incompatible: {0}")]
    Compat(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 0 ok, 2 usage, 3 IO/data, 4 numeric, 5 compatibility, 6 gradcheck.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Compat(_) => 5,
            CliError::GradCheck(_) => 6,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::DatasetTooSmall { .. }
                | Error::EmptyDataset
                | Error::TokenizationEmpty => 2,
                Error::Io { .. }
                | Error::Parse { .. }
                | Error::BadMagic(_)
                | Error::TruncatedPayload(_)
                | Error::NonFiniteValue(_)
                | Error::DuplicateId(_)
                | Error::MissingAnnotation(_) => 3,
                Error::NonFinite(_) | Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => 4,
                Error::VersionMismatch(_) | Error::Shape(_) => 5,
                _ => 1,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "roleret", version, about = "Role-disentangled text-video retrieval")]
pub struct Cli {
    /// Seed for data synthesis, weight init, shuffling and mining.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` config file with [model], [train] and [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, `section.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus train_log.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint: mAP and nDCG in both directions.
    Eval(EvalArgs),
    /// Rank the gallery for one query.
    Retrieve(RetrieveArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub verbs: usize,
    #[arg(long, default_value_t = 8)]
    pub nouns: usize,
    #[arg(long, default_value_t = 400)]
    pub items: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub segments: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub word_dim: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Requires a checkpoint trained with text self-attention.
    TextSelfAttention,
    /// Temporal max pooling instead of mean when building clip tokens.
    MaxPooling,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for metrics.csv; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    T2v,
    V2t,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Caption id for t2v, clip id for v2t.
    #[arg(long)]
    pub query: String,
    #[arg(long, value_enum, default_value_t = Direction::T2v)]
    pub direction: Direction,
    /// Number of results; defaults to eval.k.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated sizes, e.g. `model_dim=8,heads=2,tokens=3`.
    #[arg(long)]
    pub dims: Option<String>,
    /// Arms a broken backward rule; the check must then fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

pub fn main_with(args: impl IntoIterator<Item = String>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = run_config(&cli)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed.unwrap_or(42)),
        Command::Train(a) => cmd_train(a, cfg),
        Command::Eval(a) => cmd_eval(a, cfg),
        Command::Retrieve(a) => cmd_retrieve(a, cfg),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.seed.unwrap_or(42)),
    }
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<(), CliError> {
    for (name, v) in [
        ("--verbs", a.verbs),
        ("--nouns", a.nouns),
        ("--items", a.items),
        ("--feature-dim", a.feature_dim),
        ("--segments", a.segments),
        ("--word-dim", a.word_dim),
    ] {
        if v == 0 {
            return Err(CliError::Usage(format!("{name} must be positive")));
        }
    }
    if !(a.noise.is_finite() && a.noise >= 0.0) {
        return Err(CliError::Usage(format!("--noise must be >= 0, got {}", a.noise)));
    }
    let spec = SynthSpec {
        n_verb_classes: a.verbs,
        n_noun_classes: a.nouns,
        n_items: a.items,
        feature_dim: a.feature_dim,
        segments: a.segments,
        noise_sigma: a.noise,
        word_dim: a.word_dim,
        seed,
    };
    let d = synth_dataset(&spec)?;
    d.write_dir(&a.out)?;
    println!(
        "wrote {} captions, {} clips ({} modalities x {} segments x {}) to {}",
        d.captions.len(),
        d.features.clips().len(),
        d.features.modalities().len(),
        a.segments,
        a.feature_dim,
        a.out.display()
    );
    Ok(())
}

/// Fills data-derived widths unless they were set explicitly, in which case
/// they must agree with the data.
fn fit_to_data(cfg: &mut RunConfig, data: &Dataset) -> Result<(), CliError> {
    let m = &mut cfg.train.model;
    for (key, field, actual) in [
        ("model.feature_dim", &mut m.feature_dim, data.features.dim()),
        ("model.word_dim", &mut m.word_dim, data.table.dim()),
    ] {
        if cfg.explicit.contains(key) {
            if *field != actual {
                return Err(CliError::Compat(format!("{key} = {field} but the data has {actual}")));
            }
        } else {
            *field = actual;
        }
    }
    Ok(())
}

fn items_for(data: &Dataset, model: &ModelConfig) -> Result<Vec<Item>, CliError> {
    let (items, dropped) = prepare_items(data, model)?;
    if dropped > 0 {
        eprintln!("note: skipped {dropped} captions without both a noun and a verb");
    }
    if items.is_empty() {
        return Err(CliError::Core(Error::EmptyDataset));
    }
    Ok(items)
}

fn cmd_train(a: &TrainArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let data = Dataset::load_dir(&a.data)?;
    fit_to_data(&mut cfg, &data)?;
    cfg.validate()?;
    let items = items_for(&data, &cfg.train.model)?;
    let (params, log) = train_items(&items, &cfg.train)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let ckpt = a.out.join("model.json");
    save_checkpoint(&params, &ckpt)?;
    let log_path = a.out.join("train_log.csv");
    std::fs::write(&log_path, log.to_csv()).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
    for r in &log.records {
        println!("epoch {:>3}  loss {:.6}", r.epoch, r.loss.total);
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// Loads a checkpoint and checks it against explicitly configured model keys
/// and the dataset.
fn load_compatible(path: &Path, cfg: &RunConfig, data: &Dataset) -> Result<ModelParams, CliError> {
    let params = load_checkpoint(path).map_err(|e| match e {
        Error::VersionMismatch(msg) => CliError::Compat(msg),
        other => CliError::Core(other),
    })?;
    let have = params.config;
    let want = cfg.train.model;
    let checks: [(&str, String, String); 10] = [
        ("model.word_dim", have.word_dim.to_string(), want.word_dim.to_string()),
        ("model.feature_dim", have.feature_dim.to_string(), want.feature_dim.to_string()),
        ("model.embed_dim", have.embed_dim.to_string(), want.embed_dim.to_string()),
        ("model.model_dim", have.model_dim.to_string(), want.model_dim.to_string()),
        ("model.heads", have.heads.to_string(), want.heads.to_string()),
        ("model.ff_hidden", have.ff_hidden.to_string(), want.ff_hidden.to_string()),
        ("model.text_hidden", have.text_hidden.to_string(), want.text_hidden.to_string()),
        (
            "model.text_self_attention",
            have.text_self_attention.to_string(),
            want.text_self_attention.to_string(),
        ),
        ("model.single_space", have.single_space.to_string(), want.single_space.to_string()),
        ("model.token_axis", format!("{:?}", have.token_axis), format!("{:?}", want.token_axis)),
    ];
    for (key, h, w) in checks {
        if cfg.explicit.contains(key) && h != w {
            return Err(CliError::Compat(format!("{key}: checkpoint has {h}, config asks for {w}")));
        }
    }
    if have.feature_dim != data.features.dim() {
        return Err(CliError::Compat(format!(
            "checkpoint expects {}-dim features, data has {}",
            have.feature_dim,
            data.features.dim()
        )));
    }
    if have.word_dim != data.table.dim() {
        return Err(CliError::Compat(format!(
            "checkpoint expects {}-dim word vectors, data has {}",
            have.word_dim,
            data.table.dim()
        )));
    }
    Ok(params)
}

fn eval_model(params: &ModelParams, cfg: &RunConfig) -> ModelConfig {
    let mut m = params.config;
    if cfg.explicit.contains("model.pooling") {
        m.pooling = cfg.train.model.pooling;
    }
    m
}

fn cmd_eval(a: &EvalArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    for ab in &a.ablate {
        match ab {
            Ablation::TextSelfAttention => cfg.set("model.text_self_attention", "true")?,
            Ablation::MaxPooling => cfg.set("model.pooling", "max")?,
        }
    }
    let data = Dataset::load_dir(&a.data)?;
    let params = load_compatible(&a.checkpoint, &cfg, &data)?;
    let items = items_for(&data, &eval_model(&params, &cfg))?;
    let report = evaluate_items(&params, &items)?;
    println!("{report}");
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("metrics.csv");
    std::fs::write(&path, report.to_csv()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(())
}

fn cmd_retrieve(a: &RetrieveArgs, cfg: RunConfig) -> Result<(), CliError> {
    let k = a.k.unwrap_or(cfg.k);
    if k == 0 {
        return Err(CliError::Usage("--k must be >= 1".into()));
    }
    let data = Dataset::load_dir(&a.data)?;
    let params = load_compatible(&a.checkpoint, &cfg, &data)?;
    let items = items_for(&data, &eval_model(&params, &cfg))?;
    let query = match a.direction {
        Direction::T2v => items.iter().position(|it| it.caption.id == a.query),
        Direction::V2t => items.iter().position(|it| it.caption.video_id == a.query),
    }
    .ok_or_else(|| CliError::Usage(format!("unknown query id {:?}", a.query)))?;
    let (text, video) = embed_items(&params, &items)?;
    let scores = match a.direction {
        Direction::T2v => score_matrix(&text[query..=query], &video)?,
        Direction::V2t => score_matrix(&text, &video[query..=query])?.transpose(),
    };
    let row = scores.row(0);
    println!("rank\tid\tscore\trelevance");
    for (rank, g) in rank_order(row).into_iter().take(k).enumerate() {
        let id = match a.direction {
            Direction::T2v => &items[g].caption.video_id,
            Direction::V2t => &items[g].caption.id,
        };
        let rel = semantic_similarity(&items[query].caption, &items[g].caption)?;
        println!("{}\t{}\t{:.6}\t{:.4}", rank + 1, id, row[g], rel);
    }
    Ok(())
}

fn parse_dims(spec: &str) -> Result<CheckDims, CliError> {
    let mut d = CheckDims::default();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--dims entry {part:?} is not key=value")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("--dims {k}: bad value {v:?}")))?;
        let slot = match k.trim() {
            "model_dim" => &mut d.model_dim,
            "heads" => &mut d.heads,
            "tokens" => &mut d.tokens,
            "word_dim" => &mut d.word_dim,
            "feature_dim" => &mut d.feature_dim,
            "embed_dim" => &mut d.embed_dim,
            "batch" => &mut d.batch,
            other => return Err(CliError::Usage(format!("--dims: unknown key {other}"))),
        };
        *slot = v;
    }
    d.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(d)
}

fn cmd_gradcheck(a: &GradcheckArgs, seed: u64) -> Result<(), CliError> {
    let dims = parse_dims(a.dims.as_deref().unwrap_or(""))?;
    let start = std::time::Instant::now();
    let report = run_suite(seed, &dims, a.inject_fault)?;
    println!("{:<16} {:>12}  {:>7}  worst", "component", "max_rel_err", "skipped");
    for c in &report.components {
        let mark = if c.report.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
        println!(
            "{:<16} {:>12.3e}  {:>7}  {} {}",
            c.name,
            c.report.max_rel_error,
            c.report.skipped.len(),
            c.worst,
            mark
        );
    }
    println!("tolerance {:e}, {:.2}s", report.tolerance, start.elapsed().as_secs_f64());
    if report.passed() {
        Ok(())
    } else {
        let bad: Vec<String> = report.failures().map(|c| format!("{} ({})", c.name, c.worst)).collect();
        Err(CliError::GradCheck(bad.join(", ")))
    }
}
